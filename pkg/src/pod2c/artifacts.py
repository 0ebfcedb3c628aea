"""Text serialisation of trajectories and policies.

Both formats are line oriented::

    pod2c-<kind> 1
    <header integers>
    cost <float>
    sha256 <hex digest of everything after this line>
    <name> <rows> <cols>
    <rows of space-separated floats>
    ...

Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .dynamics import Trajectory
from .infostate import InfoStateLTV
from .lqg import Policy

__all__ = ["ArtifactError", "save_trajectory", "load_trajectory", "save_policy", "load_policy"]

VERSION = 1


class ArtifactError(ValueError):
    pass


def _blocks_text(blocks) -> str:
    out = []
    for name, mat in blocks:
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        out.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        out.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    return "\n".join(out) + "\n"


def _write(path, kind, header, cost, blocks):
    body = _blocks_text(blocks)
    digest = hashlib.sha256(body.encode()).hexdigest()
    head = f"pod2c-{kind} {VERSION}\n{' '.join(str(int(h)) for h in header)}\ncost {float(cost)!r}\nsha256 {digest}\n"
    Path(path).write_text(head + body)


def _read(path, kind, n_header):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    lines = path.read_text().splitlines(keepends=True)
    if len(lines) < 4 or lines[0].split() != [f"pod2c-{kind}", str(VERSION)]:
        raise ArtifactError(f"{path}: not a version {VERSION} {kind} file")
    try:
        header = [int(v) for v in lines[1].split()]
        cost_tag, cost = lines[2].split()
        sha_tag, digest = lines[3].split()
    except ValueError as exc:
        raise ArtifactError(f"{path}: malformed header") from exc
    if len(header) != n_header or cost_tag != "cost" or sha_tag != "sha256":
        raise ArtifactError(f"{path}: malformed header")
    body = "".join(lines[4:])
    if hashlib.sha256(body.encode()).hexdigest() != digest:
        raise ArtifactError(f"{path}: checksum mismatch")
    blocks = []
    rows = body.splitlines()
    pos = 0
    while pos < len(rows):
        try:
            name, r, c = rows[pos].split()
            r, c = int(r), int(c)
            mat = np.array([[float(v) for v in rows[pos + 1 + i].split()] for i in range(r)])
        except (ValueError, IndexError) as exc:
            raise ArtifactError(f"{path}: bad block at line {pos + 5}") from exc
        if mat.shape != (r, c):
            raise ArtifactError(f"{path}: block {name} has shape {mat.shape}, header says {(r, c)}")
        blocks.append((name, mat))
        pos += r + 1
    return header, float(cost), blocks


def _take(blocks, name, shape, path):
    if not blocks or blocks[0][0] != name:
        raise ArtifactError(f"{path}: expected block {name!r}")
    mat = blocks.pop(0)[1]
    if mat.shape != shape:
        raise ArtifactError(f"{path}: block {name!r} has shape {mat.shape}, expected {shape}")
    return mat


def save_trajectory(traj: Trajectory, path) -> None:
    T, n_x = traj.states.shape[0] - 1, traj.states.shape[1]
    n_z, n_u = traj.outputs.shape[1], traj.controls.shape[1]
    _write(path, "trajectory", (T, n_x, n_z, n_u), traj.cost,
           [("states", traj.states), ("outputs", traj.outputs), ("controls", traj.controls)])


def load_trajectory(path) -> Trajectory:
    (T, n_x, n_z, n_u), cost, blocks = _read(path, "trajectory", 4)
    states = _take(blocks, "states", (T + 1, n_x), path)
    outputs = _take(blocks, "outputs", (T + 1, n_z), path)
    controls = _take(blocks, "controls", (T, n_u), path)
    return Trajectory(states, outputs, controls, cost)


def save_policy(policy: Policy, path) -> None:
    """Header ``q d n_u n_z T n_w``; blocks are the nominal, then per-step
    ``K``, ``L``, ``A``, ``B``, ``D`` (``L`` also at ``t = T``)."""
    ltv = policy.ltv
    T = policy.T
    blocks = [("controls", policy.controls), ("outputs", policy.outputs)]
    for t in range(T):
        blocks.append((f"K{t}", policy.K[t]))
    for t in range(T + 1):
        blocks.append((f"L{t}", policy.L[t]))
    for t in range(T):
        blocks += [(f"A{t}", ltv.A[t]), (f"B{t}", ltv.B[t]), (f"D{t}", ltv.D[t])]
    _write(path, "policy", (ltv.q, ltv.d, ltv.n_u, ltv.n_z, T, ltv.n_w), policy.nominal_cost, blocks)


def load_policy(path) -> Policy:
    (q, d, n_u, n_z, T, n_w), cost, blocks = _read(path, "policy", 6)
    if d != q * n_z + (q - 1) * n_u:
        raise ArtifactError(f"{path}: d={d} inconsistent with q={q}, n_z={n_z}, n_u={n_u}")
    controls = _take(blocks, "controls", (T, n_u), path)
    outputs = _take(blocks, "outputs", (T + 1, n_z), path)
    K = np.stack([_take(blocks, f"K{t}", (n_u, d), path) for t in range(T)]) if T else np.zeros((0, n_u, d))
    L = np.stack([_take(blocks, f"L{t}", (d, d), path) for t in range(T + 1)])
    A = np.zeros((T, d, d))
    B = np.zeros((T, d, n_u))
    D = np.zeros((T, d, n_w))
    for t in range(T):
        A[t] = _take(blocks, f"A{t}", (d, d), path)
        B[t] = _take(blocks, f"B{t}", (d, n_u), path)
        D[t] = _take(blocks, f"D{t}", (d, n_w), path)
    if blocks:
        raise ArtifactError(f"{path}: trailing block {blocks[0][0]!r}")
    return Policy(controls, outputs, K, L, InfoStateLTV(q, n_z, n_u, A, B, D), cost)
