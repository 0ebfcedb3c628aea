"""Output-feedback wrapper around an optimised nominal.

The information-state LTV model is treated as fully measured with additive
noise (``dY_t = dZ_t + v_t``), so the estimator gain is ``L_t = P_t (P_t + V_t)^-1``
and the regulator is the finite-horizon LQR for ``(A_t, B_t)``.  The composite
law is ``u_t = u*_t - K_t dZhat_t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import BlackboxSystem, NoiseSpec, Trajectory, noise_streams
from .infostate import InfoStateLTV, assemble, stack_deviations
from .pomilqr import CostModel
from .sysid import SysidConfig, identify

__all__ = [
    "Policy",
    "RiccatiState",
    "observer_gains",
    "feedback_gains",
    "noise_covariances",
    "synthesize",
    "retune_observer",
    "simulate",
    "run_closed_loop",
    "run_lqr_only",
    "run_open_loop",
    "EpisodeBatch",
    "run_episodes",
]

V_FLOOR = 1e-10
SYM_TOL = 1e-10
PSD_TOL = 1e-10


@dataclass(frozen=True)
class Policy:
    controls: np.ndarray
    outputs: np.ndarray
    K: np.ndarray
    L: np.ndarray
    ltv: InfoStateLTV = field(repr=False)
    nominal_cost: float = float("nan")

    def __post_init__(self):
        T = self.controls.shape[0]
        if (self.outputs.shape[0] != T + 1 or self.K.shape[0] != T or self.L.shape[0] < T
                or self.ltv.T != T):
            raise ValueError("policy horizons are inconsistent")
        for name in ("controls", "outputs", "K", "L"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in policy {name}")

    @property
    def q(self) -> int:
        return self.ltv.q

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    @property
    def d(self) -> int:
        return self.ltv.d


@dataclass(frozen=True)
class RiccatiState:
    P: np.ndarray
    S: np.ndarray
    W: np.ndarray
    V: np.ndarray
    P0: np.ndarray


def _symmetrize_checked(M, name, t):
    scale = max(1.0, float(np.max(np.abs(M))))
    asym = float(np.max(np.abs(M - M.T))) / scale
    if asym > 1e-6:
        raise FloatingPointError(f"{name}_{t} lost symmetry (relative asymmetry {asym:.2e})")
    M = 0.5 * (M + M.T)
    lo = float(np.linalg.eigvalsh(M).min())
    if lo < -PSD_TOL * scale:
        raise FloatingPointError(f"{name}_{t} not positive semidefinite (min eigenvalue {lo:.3e})")
    return M


def _seq(M, T, shape):
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M * np.eye(shape[0])
    if M.ndim == 2:
        M = np.broadcast_to(M, (T,) + M.shape)
    if M.shape[1:] != shape:
        raise ValueError(f"expected matrices of shape {shape}, got {M.shape[1:]}")
    return M


def observer_gains(ltv: InfoStateLTV, W, V, P0) -> tuple[np.ndarray, np.ndarray]:
    """Forward covariance recursion; returns ``L_0..L_T`` and ``P_0..P_T``."""
    T, d = ltv.T, ltv.d
    Ws = _seq(W, T, (ltv.n_w, ltv.n_w))
    Vs = _seq(V, T + 1, (d, d))
    P = np.zeros((T + 1, d, d))
    L = np.zeros((T + 1, d, d))
    P0 = np.asarray(P0, dtype=float)
    P[0] = _symmetrize_checked(P0 * np.eye(d) if P0.ndim == 0 else P0, "P", 0)
    for t in range(T + 1):
        innov = P[t] + Vs[t]
        L[t] = np.linalg.solve(innov.T, P[t].T).T
        if t == T:
            break
        post = P[t] - L[t] @ P[t]
        nxt = ltv.A[t] @ post @ ltv.A[t].T + ltv.D[t] @ Ws[t] @ ltv.D[t].T
        P[t + 1] = _symmetrize_checked(nxt, "P", t + 1)
    return L, P


def feedback_gains(ltv: InfoStateLTV, Q, R, Q_T) -> tuple[np.ndarray, np.ndarray]:
    """Backward Riccati recursion; returns ``K_0..K_{T-1}`` and ``S_0..S_T``."""
    T, d, n_u = ltv.T, ltv.d, ltv.n_u
    Qs = _seq(Q, T, (d, d))
    Rs = _seq(R, T, (n_u, n_u))
    S = np.zeros((T + 1, d, d))
    K = np.zeros((T, n_u, d))
    S[T] = _symmetrize_checked(np.asarray(Q_T, dtype=float), "S", T)
    eye = np.eye(d)
    for t in range(T - 1, -1, -1):
        A, B, Sn = ltv.A[t], ltv.B[t], S[t + 1]
        G = Rs[t] + B.T @ Sn @ B
        K[t] = np.linalg.solve(G, B.T @ Sn @ A)
        nxt = A.T @ Sn @ (eye - B @ np.linalg.solve(G, B.T @ Sn)) @ A + Qs[t]
        S[t] = _symmetrize_checked(nxt, "S", t)
    return K, S


def noise_covariances(ltv: InfoStateLTV, noise: NoiseSpec):
    """``(W, V, P0)`` implied by a noise spec with reference scales attached.

    Measurement variance sits on the output blocks; control blocks of the
    measured information state are known exactly and get a small floor so that
    ``V`` stays invertible.
    """
    n_z, n_u, q, d = ltv.n_z, ltv.n_u, ltv.q, ltv.d
    w_var = noise.process_sigma(n_u) ** 2
    W = np.diag(np.tile(w_var, ltv.n_w // n_u))
    v_var = noise.measurement_sigma(n_z) ** 2
    diag = np.full(d, V_FLOOR)
    diag[: q * n_z] = np.maximum(np.tile(v_var, q), V_FLOOR)
    V = np.diag(diag)
    P0 = V.copy()
    return W, V, P0


def synthesize(sys: BlackboxSystem, nominal: Trajectory, cost: CostModel, q: int,
               noise: NoiseSpec, sysid: SysidConfig = SysidConfig(), seed: int = 0,
               noise_mode: str = "sum") -> Policy:
    """Re-identify around the optimised nominal and compute ``K_t`` and ``L_t``.

    ``noise`` should already carry reference scales from the nominal.
    """
    model = identify(sys, nominal, q, sysid, seed)
    ltv = assemble(model, noise_mode)
    QZ, R, QfZ = cost.lifted(q, sys.n_u)
    K, _ = feedback_gains(ltv, QZ, R, QfZ)
    W, V, P0 = noise_covariances(ltv, noise)
    L, _ = observer_gains(ltv, W, V, P0)
    return Policy(nominal.controls.copy(), nominal.outputs.copy(), K, L, ltv, nominal.cost)


def retune_observer(policy: Policy, noise: NoiseSpec) -> Policy:
    """Same regulator, estimator gains recomputed for other noise levels."""
    W, V, P0 = noise_covariances(policy.ltv, noise)
    L, _ = observer_gains(policy.ltv, W, V, P0)
    return Policy(policy.controls, policy.outputs, policy.K, L, policy.ltv, policy.nominal_cost)


@dataclass(frozen=True)
class EpisodeBatch:
    """Realised rollouts, one row per episode."""

    states: np.ndarray
    outputs: np.ndarray
    measurements: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    diverged: np.ndarray

    def trajectory(self, i: int = 0) -> Trajectory:
        return Trajectory(self.states[i], self.outputs[i], self.controls[i], float(self.costs[i]))


def _draw_noise(noise, episodes, T, n_u, n_z):
    M = len(episodes)
    w = np.zeros((M, T, n_u))
    v = np.zeros((M, T + 1, n_z))
    if noise is None or noise.is_zero:
        return w, v
    ws, vs = noise.process_sigma(n_u), noise.measurement_sigma(n_z)
    for i, ep in enumerate(episodes):
        rng_w, rng_v = noise_streams(noise.seed, ep)
        w[i] = rng_w.standard_normal((T, n_u)) * ws
        v[i] = rng_v.standard_normal((T + 1, n_z)) * vs
    return w, v


def simulate(sys: BlackboxSystem, policy: Policy, noise: Optional[NoiseSpec],
             episodes: Sequence[int] = (0,), mode: str = "lqg", x0=None,
             penalty: Optional[float] = None) -> EpisodeBatch:
    """Run episodes of the true system under ``mode`` in {"open", "lqr", "lqg"}.

    Episodes are vectorised; each draws its noise from its own stream keyed on
    ``(noise.seed, episode)``.  Diverged episodes score ``penalty`` (default ten
    times the nominal cost).
    """
    if mode not in ("open", "lqr", "lqg"):
        raise ValueError(f"unknown mode {mode!r}")
    if sys.n_u != policy.controls.shape[1] or sys.n_z != policy.outputs.shape[1]:
        raise ValueError("policy does not match the system dimensions")
    T, q, M = policy.T, policy.q, len(episodes)
    n_u, n_z = sys.n_u, sys.n_z
    A, B = policy.ltv.A, policy.ltv.B
    w, v = _draw_noise(noise, list(episodes), T, n_u, n_z)
    x = np.broadcast_to(sys.x0 if x0 is None else np.asarray(x0, float), (M, sys.n_x)).copy()
    states = np.empty((M, T + 1, sys.n_x))
    outputs = np.empty((M, T + 1, n_z))
    meas_dev = np.zeros((M, T + 1, n_z))
    du = np.zeros((M, T, n_u))
    controls = np.empty((M, T, n_u))
    Zhat = np.zeros((M, policy.d))
    states[:, 0] = x
    with np.errstate(all="ignore"):
        for t in range(T):
            outputs[:, t] = sys.output(x, t)
            meas_dev[:, t] = outputs[:, t] + v[:, t] - policy.outputs[t]
            if mode == "open":
                u = np.broadcast_to(policy.controls[t], (M, n_u)).copy()
            else:
                dY = stack_deviations(meas_dev, du, t, q)
                if mode == "lqr":
                    est = dY
                else:
                    pred = (Zhat @ A[t - 1].T + du[:, t - 1] @ B[t - 1].T) if t > 0 \
                        else np.zeros_like(dY)
                    Zhat = pred + (dY - pred) @ policy.L[t].T
                    est = Zhat
                u = policy.controls[t] - est @ policy.K[t].T
            controls[:, t] = u
            du[:, t] = u - policy.controls[t]
            x = sys.step(x, u + w[:, t], t)
            states[:, t + 1] = x
        outputs[:, T] = sys.output(x, T)
        meas_dev[:, T] = outputs[:, T] + v[:, T] - policy.outputs[T]
    diverged = ~np.all(np.isfinite(states.reshape(M, -1)), axis=1)
    return EpisodeBatch(states, outputs, meas_dev + policy.outputs[None], controls,
                        np.full(M, np.nan), diverged)


def _score(batch: EpisodeBatch, cost: CostModel, penalty: float) -> EpisodeBatch:
    with np.errstate(all="ignore"):
        costs = cost.episodic(batch.outputs, batch.controls)
    bad = batch.diverged | ~np.isfinite(costs)
    costs = np.where(bad, penalty, costs)
    return EpisodeBatch(batch.states, batch.outputs, batch.measurements, batch.controls,
                        costs, bad)


def run_episodes(sys, policy, noise, cost, episodes=(0,), mode="lqg", penalty=None):
    """:func:`simulate` plus episodic cost, capped at ``penalty``."""
    if penalty is None:
        penalty = 10.0 * policy.nominal_cost
    return _score(simulate(sys, policy, noise, episodes, mode), cost, penalty)


def run_closed_loop(sys: BlackboxSystem, policy: Policy, noise: Optional[NoiseSpec],
                    cost: CostModel, episode: int = 0) -> tuple[Trajectory, float]:
    b = run_episodes(sys, policy, noise, cost, (episode,), "lqg")
    return b.trajectory(0), float(b.costs[0])


def run_lqr_only(sys: BlackboxSystem, policy: Policy, noise: Optional[NoiseSpec],
                 cost: CostModel, episode: int = 0) -> tuple[Trajectory, float]:
    b = run_episodes(sys, policy, noise, cost, (episode,), "lqr")
    return b.trajectory(0), float(b.costs[0])


def run_open_loop(sys: BlackboxSystem, policy: Policy, noise: Optional[NoiseSpec],
                  cost: CostModel, episode: int = 0) -> tuple[Trajectory, float]:
    b = run_episodes(sys, policy, noise, cost, (episode,), "open")
    return b.trajectory(0), float(b.costs[0])
