"""Open-loop trajectory optimisation on the information state (POM-iLQR).

Each outer iteration re-identifies ARMA models around the current nominal,
assembles the information-state LTV system, runs a regularised backward pass
and accepts a line-searched forward pass on the true blackbox.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import BlackboxSystem, Trajectory, rollout
from .infostate import InfoStateLTV, assemble, info_dim, stack_deviations
from .sysid import ArmaModel, SysidConfig, identify

log = logging.getLogger(__name__)

__all__ = [
    "CostModel",
    "IlqrGains",
    "SolverConfig",
    "IterationRecord",
    "OptimizeResult",
    "BackwardPassError",
    "backward_pass",
    "forward_pass",
    "optimize",
    "initial_trajectory",
    "write_convergence_csv",
]

MU_MIN, MU_MAX = 1e-12, 1e10


class BackwardPassError(RuntimeError):
    pass


def _check_psd(M, name, strict=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric square matrix")
    lo = np.linalg.eigvalsh(M).min() if M.size else 0.0
    if (strict and lo <= 0) or lo < -1e-12:
        raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return M


@dataclass(frozen=True)
class CostModel:
    """Quadratic output-tracking cost.

    Running cost ``(z - goal)' Q (z - goal) + u' R u``; terminal cost
    ``(z_T - goal)' Qf (z_T - goal) + (z_T - z_{T-1})' Qf_diff (z_T - z_{T-1})``.
    The difference term penalises terminal rates using only outputs, and needs
    ``q >= 2`` to be expressible on the information state.
    """

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    goal: np.ndarray
    Qf_diff: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_psd(self.Q, "Q"))
        object.__setattr__(self, "R", _check_psd(self.R, "R", strict=True))
        object.__setattr__(self, "Qf", _check_psd(self.Qf, "Qf"))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(-1))
        if self.Qf_diff is not None:
            object.__setattr__(self, "Qf_diff", _check_psd(self.Qf_diff, "Qf_diff"))
        n_z = self.Q.shape[0]
        if self.Qf.shape != (n_z, n_z) or self.goal.shape != (n_z,):
            raise ValueError("cost weights disagree on the output dimension")

    @property
    def n_z(self) -> int:
        return self.Q.shape[0]

    @property
    def n_u(self) -> int:
        return self.R.shape[0]

    def running(self, z, u) -> np.ndarray:
        e = np.asarray(z) - self.goal
        u = np.asarray(u)
        return (np.einsum("...i,ij,...j->...", e, self.Q, e)
                + np.einsum("...i,ij,...j->...", u, self.R, u))

    def terminal(self, z_T, z_prev) -> np.ndarray:
        e = np.asarray(z_T) - self.goal
        out = np.einsum("...i,ij,...j->...", e, self.Qf, e)
        if self.Qf_diff is not None:
            r = np.asarray(z_T) - np.asarray(z_prev)
            out = out + np.einsum("...i,ij,...j->...", r, self.Qf_diff, r)
        return out

    def episodic(self, outputs, controls) -> np.ndarray:
        """Summed running plus terminal cost; batches over leading axes."""
        outputs = np.asarray(outputs, dtype=float)
        controls = np.asarray(controls, dtype=float)
        run = self.running(outputs[..., :-1, :], controls).sum(axis=-1)
        return run + self.terminal(outputs[..., -1, :], outputs[..., -2, :])

    # -- information-state partials ------------------------------------------------

    def lifted(self, q: int, n_u: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(Q_Z, R, Qf_Z)`` on the ``d``-dimensional information state."""
        n_z = self.n_z
        d = info_dim(q, n_z, n_u)
        QZ = np.zeros((d, d))
        QZ[:n_z, :n_z] = self.Q
        QfZ = np.zeros((d, d))
        QfZ[:n_z, :n_z] = self.Qf
        if self.Qf_diff is not None and np.any(self.Qf_diff):
            if q < 2:
                raise ValueError("terminal rate penalty needs an information state with q >= 2")
            S = np.zeros((n_z, d))
            S[:, :n_z] = np.eye(n_z)
            S[:, n_z:2 * n_z] = -np.eye(n_z)
            QfZ += S.T @ self.Qf_diff @ S
        return QZ, self.R, QfZ

    def running_partials(self, Zbar, ubar, q):
        """``(c_Z, c_u, c_ZZ, c_uZ, c_uu)`` at the nominal information state."""
        QZ, R, _ = self.lifted(q, self.n_u)
        n_z = self.n_z
        e = np.zeros(QZ.shape[0])
        e[:n_z] = Zbar[:n_z] - self.goal
        c_Z = 2.0 * QZ @ e
        c_u = 2.0 * R @ ubar
        return c_Z, c_u, 2.0 * QZ, np.zeros((self.n_u, QZ.shape[0])), 2.0 * R

    def terminal_partials(self, Zbar, q):
        _, _, QfZ = self.lifted(q, self.n_u)
        n_z = self.n_z
        # goal enters only through the absolute output block
        grad = 2.0 * QfZ @ Zbar
        grad[:n_z] -= 2.0 * self.Qf @ self.goal
        return grad, 2.0 * QfZ


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.3
    alpha_factor: float = 0.5
    alpha_floor: float = 1e-3
    mu: float = 1e-6
    mu_increase: float = 10.0
    mu_decrease: float = 2.0
    epsilon: float = 1e-3
    max_iterations: int = 100

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 < self.alpha_factor < 1:
            raise ValueError("alpha_factor must lie in (0, 1)")
        if not self.mu > 0 or not self.epsilon > 0:
            raise ValueError("mu and epsilon must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class IlqrGains:
    k: np.ndarray
    K: np.ndarray
    J_Z: np.ndarray
    J_ZZ: np.ndarray
    expected_decrease: float = 0.0


def info_trajectory(traj: Trajectory, q: int) -> np.ndarray:
    """Nominal information states ``Z_0 .. Z_T``, padding before ``t = 0`` with the
    initial output and zero controls."""
    T = traj.horizon
    z = traj.outputs
    u = traj.controls
    out = []
    for t in range(T + 1):
        parts = [z[max(t - i, 0)] for i in range(q)]
        parts += [u[t - i] if t - i >= 0 else np.zeros(u.shape[1]) for i in range(1, q)]
        out.append(np.concatenate(parts))
    return np.array(out)


def backward_pass(ltv: InfoStateLTV, traj: Trajectory, cost: CostModel, mu: float,
                  cfg: SolverConfig = SolverConfig()) -> tuple[IlqrGains, float]:
    """Riccati-like sweep producing feedforward ``k_t`` and feedback ``K_t``.

    When ``Q_uu`` is not positive definite the regulariser grows by
    ``cfg.mu_increase`` and the current step is recomputed.  A full successful
    pass shrinks it by ``cfg.mu_decrease``.
    """
    q, T, d, n_u = ltv.q, ltv.T, ltv.d, ltv.n_u
    if traj.horizon != T:
        raise ValueError(f"trajectory horizon {traj.horizon} != model horizon {T}")
    Z = info_trajectory(traj, q)
    k = np.zeros((T, n_u))
    K = np.zeros((T, n_u, d))
    J_Z = np.zeros((T + 1, d))
    J_ZZ = np.zeros((T + 1, d, d))
    J_Z[T], J_ZZ[T] = cost.terminal_partials(Z[T], q)
    expected = 0.0
    eye = np.eye(d)
    for t in range(T - 1, -1, -1):
        A, B = ltv.A[t], ltv.B[t]
        c_Z, c_u, c_ZZ, c_uZ, c_uu = cost.running_partials(Z[t], traj.controls[t], q)
        Vz, Vzz = J_Z[t + 1], J_ZZ[t + 1]
        Q_Z = c_Z + A.T @ Vz
        Q_u = c_u + B.T @ Vz
        Q_ZZ = c_ZZ + A.T @ Vzz @ A
        while True:
            Vreg = Vzz + mu * eye
            Q_uZ = c_uZ + B.T @ Vreg @ A
            Q_uu = c_uu + B.T @ Vreg @ B
            Q_uu = 0.5 * (Q_uu + Q_uu.T)
            try:
                L = np.linalg.cholesky(Q_uu)
            except np.linalg.LinAlgError:
                mu *= cfg.mu_increase
                if mu > MU_MAX:
                    raise BackwardPassError("backward pass irrecoverably ill-conditioned")
                continue
            break
        k[t] = -_chol_solve(L, Q_u)
        K[t] = -_chol_solve(L, Q_uZ)
        J_Z[t] = Q_Z + K[t].T @ Q_uu @ k[t] + K[t].T @ Q_u + Q_uZ.T @ k[t]
        Jzz = Q_ZZ + K[t].T @ Q_uu @ K[t] + K[t].T @ Q_uZ + Q_uZ.T @ K[t]
        J_ZZ[t] = 0.5 * (Jzz + Jzz.T)
        expected += float(k[t] @ Q_u)
    mu = max(mu / cfg.mu_decrease, MU_MIN)
    return IlqrGains(k, K, J_Z, J_ZZ, expected), mu


def _chol_solve(L, b):
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


def forward_pass(sys: BlackboxSystem, traj_prev: Trajectory, gains: IlqrGains, alpha: float,
                 cost: CostModel, q: Optional[int] = None) -> tuple[Trajectory, float]:
    """Roll the blackbox forward under ``u = u_prev + alpha k + K dZ``.

    ``dZ`` stacks the observed deviations from the previous nominal.  A diverged
    rollout returns ``inf`` cost so the caller can shrink ``alpha``.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    T = traj_prev.horizon
    if gains.k.shape[0] != T:
        raise ValueError("gains do not cover the horizon")
    if q is None:
        q = _order_from_dim(gains.K.shape[2], sys.n_z, sys.n_u)
    x = traj_prev.x0.copy()
    states = np.empty_like(traj_prev.states)
    outputs = np.empty_like(traj_prev.outputs)
    controls = np.empty_like(traj_prev.controls)
    dz = np.zeros_like(traj_prev.outputs)
    du = np.zeros_like(traj_prev.controls)
    states[0] = x
    with np.errstate(all="ignore"):
        for t in range(T):
            outputs[t] = sys.output(x, t)
            dz[t] = outputs[t] - traj_prev.outputs[t]
            dZ = stack_deviations(dz, du, t, q)
            controls[t] = traj_prev.controls[t] + alpha * gains.k[t] + gains.K[t] @ dZ
            du[t] = controls[t] - traj_prev.controls[t]
            x = sys.step(x, controls[t], t)
            states[t + 1] = x
            if not np.all(np.isfinite(x)):
                return traj_prev, float("inf")
        outputs[T] = sys.output(x, T)
        c = float(cost.episodic(outputs, controls))
    if not np.isfinite(c):
        return traj_prev, float("inf")
    return Trajectory(states, outputs, controls, c), c


def _order_from_dim(d, n_z, n_u):
    q, rem = divmod(d + n_u, n_z + n_u)
    if rem or q < 1:
        raise ValueError(f"gain dimension {d} is not an information-state size")
    return q


def initial_trajectory(sys: BlackboxSystem, cost: CostModel, T: int,
                       controls: Optional[np.ndarray] = None, x0=None) -> Trajectory:
    """Roll out the initial guess (zero controls unless given)."""
    u = np.zeros((T, sys.n_u)) if controls is None else np.asarray(controls, dtype=float)
    u = u.reshape(T, sys.n_u)
    x0 = sys.x0 if x0 is None else np.asarray(x0, dtype=float)
    states, outputs = rollout(sys, x0, u)
    return Trajectory(states, outputs, u, float(cost.episodic(outputs, u)))


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    alpha: float
    mu: float
    residual: float


@dataclass
class OptimizeResult:
    trajectory: Trajectory
    log: list[IterationRecord]
    converged: bool
    reason: str
    model: Optional[ArmaModel] = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.log) - 1

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.log])


def _mean_relative_residual(model: ArmaModel) -> float:
    scale = model.scale[1:]
    ok = scale > 0
    if not np.any(ok):
        return 0.0
    return float(np.mean(model.residual[1:][ok] / scale[ok]))


def optimize(sys: BlackboxSystem, init: Trajectory, cost: CostModel, q: int,
             cfg: SolverConfig = SolverConfig(), sysid: SysidConfig = SysidConfig(),
             seed: int = 0, noise_mode: str = "sum") -> OptimizeResult:
    """Iterate identification, backward pass and line-searched forward pass.

    The line search starts each iteration from the last accepted step grown by
    ``1 / cfg.alpha_factor`` (capped at 1) and shrinks it by ``cfg.alpha_factor``
    until the episodic cost strictly decreases.  Iteration stops once the
    relative decrease falls below ``cfg.epsilon``, when no step below
    ``cfg.alpha_floor`` helps, or after ``cfg.max_iterations``.
    """
    traj = init
    if not np.isfinite(traj.cost):
        traj = Trajectory(traj.states, traj.outputs, traj.controls,
                          float(cost.episodic(traj.outputs, traj.controls)))
    mu = cfg.mu
    alpha = cfg.alpha
    history = [IterationRecord(0, traj.cost, 0.0, mu, float("nan"))]
    model = None
    for it in range(1, cfg.max_iterations + 1):
        model = identify(sys, traj, q, sysid, seed=_iteration_seed(seed, it))
        ltv = assemble(model, noise_mode)
        gains, mu = backward_pass(ltv, traj, cost, mu, cfg)
        trial = alpha
        accepted = None
        while trial >= cfg.alpha_floor:
            cand, c = forward_pass(sys, traj, gains, trial, cost, q)
            if c < traj.cost:
                accepted = cand
                break
            trial *= cfg.alpha_factor
        if accepted is None:
            log.info("iteration %d: no cost decrease down to alpha floor", it)
            return OptimizeResult(traj, history, True, "line search exhausted", model)
        rel = (traj.cost - accepted.cost) / max(abs(traj.cost), 1e-300)
        traj = accepted
        history.append(IterationRecord(it, traj.cost, trial, mu, _mean_relative_residual(model)))
        log.info("iteration %d: cost %.6g alpha %.3g mu %.3g", it, traj.cost, trial, mu)
        alpha = min(1.0, trial / cfg.alpha_factor)
        if rel < cfg.epsilon:
            return OptimizeResult(traj, history, True, "relative decrease below epsilon", model)
    return OptimizeResult(traj, history, False, "maximum iterations reached", model)


def _iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1)[0])


def write_convergence_csv(result: OptimizeResult, path) -> None:
    """Columns ``iteration,cost,alpha,mu,arma_residual``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "alpha", "mu", "arma_residual"])
        for r in result.log:
            w.writerow([r.iteration, repr(r.cost), repr(r.alpha), repr(r.mu), repr(r.residual)])
