"""Information-state LTV system built from per-timestep ARMA blocks.

The information state at time ``t`` stacks the ``q`` newest outputs followed by
the ``q - 1`` newest past controls, newest first::

    Z_t = (z_t, z_{t-1}, ..., z_{t-q+1}, u_{t-1}, ..., u_{t-q+1})

so ``d = q n_z + (q - 1) n_u``.  ``A[t], B[t], D[t]`` map ``dZ_t`` to ``dZ_{t+1}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .sysid import ArmaModel

__all__ = [
    "InfoStateLTV",
    "info_dim",
    "assemble",
    "propagate",
    "stack_deviations",
    "write_ltv_text",
    "read_ltv_text",
]

NOISE_MODES = ("sum", "per-lag")


def info_dim(q: int, n_z: int, n_u: int) -> int:
    return q * n_z + (q - 1) * n_u


@dataclass(frozen=True)
class InfoStateLTV:
    """``dZ_{t+1} = A[t] dZ_t + B[t] du_t + D[t] w_t`` for ``t = 0..T-1``."""

    q: int
    n_z: int
    n_u: int
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def n_w(self) -> int:
        return self.D.shape[2]

    def output_block(self) -> slice:
        return slice(0, self.n_z)

    def control_block(self) -> slice:
        return slice(self.q * self.n_z, self.d)


def assemble(arma: ArmaModel, noise_mode: str = "sum") -> InfoStateLTV:
    """Lay out ``A_t, B_t, D_t`` from the ARMA blocks fitted at ``t + 1``.

    With ``noise_mode="sum"`` the process-noise column is the sum of the
    control blocks, ``gamma = beta_1 + ... + beta_q``.  ``"per-lag"`` instead
    gives ``D`` one column block per lag, ``[beta_1 | ... | beta_q]``, to be
    paired with a block-diagonal noise covariance.
    """
    if noise_mode not in NOISE_MODES:
        raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
    q, n_z, n_u, T = arma.q, arma.n_z, arma.n_u, arma.T
    d = info_dim(q, n_z, n_u)
    uo = q * n_z
    n_w = n_u if noise_mode == "sum" else q * n_u
    A = np.zeros((T, d, d))
    B = np.zeros((T, d, n_u))
    D = np.zeros((T, d, n_w))
    for t in range(T):
        alpha, beta = arma.alpha[t + 1], arma.beta[t + 1]
        if alpha.shape != (q, n_z, n_z) or beta.shape != (q, n_z, n_u):
            raise ValueError(f"inconsistent block dimensions at t={t + 1}")
        for i in range(q):
            A[t, :n_z, i * n_z:(i + 1) * n_z] = alpha[i]
        for i in range(1, q):
            A[t, :n_z, uo + (i - 1) * n_u: uo + i * n_u] = beta[i]
        # shift older outputs and controls down one slot
        for i in range(1, q):
            A[t, i * n_z:(i + 1) * n_z, (i - 1) * n_z: i * n_z] = np.eye(n_z)
        for i in range(1, q - 1):
            A[t, uo + i * n_u: uo + (i + 1) * n_u, uo + (i - 1) * n_u: uo + i * n_u] = np.eye(n_u)
        B[t, :n_z] = beta[0]
        if q > 1:
            B[t, uo: uo + n_u] = np.eye(n_u)
        if noise_mode == "sum":
            D[t, :n_z] = beta.sum(axis=0)
        else:
            D[t, :n_z] = np.concatenate(list(beta), axis=1)
    return InfoStateLTV(q, n_z, n_u, A, B, D)


def propagate(ltv: InfoStateLTV, dZ0, du, w: Optional[np.ndarray] = None) -> np.ndarray:
    """Run the linear recursion; returns ``dZ_0 .. dZ_T`` with shape ``(T + 1, d)``."""
    dZ0 = np.asarray(dZ0, dtype=float)
    du = np.asarray(du, dtype=float)
    if dZ0.shape != (ltv.d,):
        raise ValueError(f"initial deviation has shape {dZ0.shape}, expected ({ltv.d},)")
    if du.shape != (ltv.T, ltv.n_u):
        raise ValueError(f"control deviations have shape {du.shape}, expected {(ltv.T, ltv.n_u)}")
    if w is not None and np.shape(w) != (ltv.T, ltv.n_w):
        raise ValueError(f"noise sequence has shape {np.shape(w)}, expected {(ltv.T, ltv.n_w)}")
    out = np.empty((ltv.T + 1, ltv.d))
    out[0] = dZ0
    for t in range(ltv.T):
        out[t + 1] = ltv.A[t] @ out[t] + ltv.B[t] @ du[t]
        if w is not None:
            out[t + 1] += ltv.D[t] @ w[t]
    return out


def stack_deviations(dz: np.ndarray, du: np.ndarray, t: int, q: int) -> np.ndarray:
    """``dZ_t`` from per-time output and control deviations (zero before ``t = 0``).

    Works on batches: ``dz`` is ``(..., T + 1, n_z)`` and ``du`` ``(..., T, n_u)``.
    """
    dz = np.asarray(dz, dtype=float)
    du = np.asarray(du, dtype=float)
    lead = dz.shape[:-2]
    parts = []
    for i in range(q):
        s = t - i
        parts.append(dz[..., s, :] if s >= 0 else np.zeros(lead + dz.shape[-1:]))
    for i in range(1, q):
        s = t - i
        parts.append(du[..., s, :] if s >= 0 else np.zeros(lead + du.shape[-1:]))
    return np.concatenate(parts, axis=-1)


def write_ltv_text(ltv: InfoStateLTV, path) -> None:
    """Plain-text dump: a header line ``q n_z n_u T d n_w`` then, for each ``t``
    and each of ``A``, ``B``, ``D``, a tag line ``<name> <t>`` followed by the
    matrix rows (space-separated ``repr`` floats)."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{ltv.q} {ltv.n_z} {ltv.n_u} {ltv.T} {ltv.d} {ltv.n_w}\n")
        for t in range(ltv.T):
            for name, mat in (("A", ltv.A[t]), ("B", ltv.B[t]), ("D", ltv.D[t])):
                fh.write(f"{name} {t}\n")
                for row in mat:
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_ltv_text(path) -> InfoStateLTV:
    lines = Path(path).read_text().splitlines()
    q, n_z, n_u, T, d, n_w = (int(v) for v in lines[0].split())
    A = np.zeros((T, d, d))
    B = np.zeros((T, d, n_u))
    D = np.zeros((T, d, n_w))
    pos = 1
    for t in range(T):
        for name, mat in (("A", A), ("B", B), ("D", D)):
            tag = lines[pos].split()
            if tag != [name, str(t)]:
                raise ValueError(f"line {pos + 1}: expected '{name} {t}', got {lines[pos]!r}")
            pos += 1
            for r in range(d):
                mat[t, r] = [float(v) for v in lines[pos].split()]
                pos += 1
    return InfoStateLTV(q, n_z, n_u, A, B, D)
