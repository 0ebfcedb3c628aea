"""Per-timestep ARMA identification from input-output perturbation data.

Around a nominal trajectory, ``N`` rollouts are run with i.i.d. Gaussian
perturbations ``du_t`` on every control channel at every step.  For each time
``t`` the output deviation is regressed on the ``q`` previous output and control
deviations::

    dz_t = sum_i alpha[t][i] dz_{t-i} + sum_i beta[t][i] du_{t-i}      (i = 1..q)

History before ``t = 0`` is zero: the initial state is fixed, so ``dz_0 = 0`` and
there are no perturbations at negative times.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dynamics import BlackboxSystem, LinearSystemSpec, Trajectory

log = logging.getLogger(__name__)

__all__ = [
    "ArmaModel",
    "PerturbationDataset",
    "CorrelationSet",
    "OrderReport",
    "SelectionResult",
    "default_num_rollouts",
    "collect_perturbations",
    "correlations",
    "fit_arma",
    "fit_arma_correlation",
    "fit_model",
    "arma_exact",
    "arma_predict",
    "observability_stack",
    "check_order",
    "select_order",
    "write_dataset_csv",
    "write_model_csv",
    "SysidConfig",
    "identify",
    "relative_residual",
]

# relative singular-value cutoff separating unexcited regressor directions
RANK_RTOL = 1e-9
# relative residual below which fits are indistinguishable from exact
RESIDUAL_FLOOR = 1e-6
# order selection probes the local linear structure, so its perturbations are
# far smaller than those used for identification
SELECT_SIGMA_REL = 1e-6


@dataclass(frozen=True)
class PerturbationDataset:
    """Deviations of ``N`` perturbed rollouts from a nominal.

    ``du`` has shape ``(N, T, n_u)``; ``dz`` has shape ``(N, T + 1, n_z)``.
    """

    sigma: float
    du: np.ndarray
    dz: np.ndarray
    nominal: Optional[Trajectory] = field(default=None, repr=False)

    def __post_init__(self):
        if self.du.shape[0] == 0:
            raise ValueError("empty dataset")
        if self.du.shape[0] != self.dz.shape[0] or self.dz.shape[1] != self.du.shape[1] + 1:
            raise ValueError(f"inconsistent shapes du{self.du.shape} dz{self.dz.shape}")

    @property
    def N(self) -> int:
        return self.du.shape[0]

    @property
    def T(self) -> int:
        return self.du.shape[1]

    @property
    def n_u(self) -> int:
        return self.du.shape[2]

    @property
    def n_z(self) -> int:
        return self.dz.shape[2]

    def dz_at(self, t: int) -> np.ndarray:
        """``dz_t`` over all rollouts, zero before the start of the episode."""
        if t < 0:
            return np.zeros((self.N, self.n_z))
        return self.dz[:, t]

    def du_at(self, t: int) -> np.ndarray:
        """``du_t`` over all rollouts, zero outside ``0..T-1``."""
        if t < 0 or t >= self.T:
            return np.zeros((self.N, self.n_u))
        return self.du[:, t]

    def regressors(self, t: int, q: int) -> np.ndarray:
        """Rows ``[dz_{t-1} .. dz_{t-q} | du_{t-1} .. du_{t-q}]``, one per rollout."""
        cols = [self.dz_at(t - i) for i in range(1, q + 1)]
        cols += [self.du_at(t - i) for i in range(1, q + 1)]
        return np.concatenate(cols, axis=1)


@dataclass(frozen=True)
class CorrelationSet:
    """Empirical correlations anchored at one time ``t``.

    ``R[i] = mean_j dz_t dz_{t-i}^T`` and ``H[i] = mean_j dz_t du_{t-i}^T`` for
    ``i = 0..q``; ``U = mean_j du_{t-1} du_{t-1}^T`` (the latest perturbation
    that exists at every ``t >= 1``).
    """

    t: int
    R: np.ndarray
    H: np.ndarray
    U: np.ndarray


@dataclass(frozen=True)
class ArmaModel:
    """ARMA coefficients for every time ``t = 1..T``.

    ``alpha[t]`` has shape ``(q, n_z, n_z)`` and ``beta[t]`` ``(q, n_z, n_u)``;
    index 0 along the first axis is lag 1.  Entry ``t = 0`` is unused and zero.
    """

    q: int
    alpha: np.ndarray
    beta: np.ndarray
    residual: np.ndarray
    scale: np.ndarray = None

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("ARMA order must be at least 1")
        if self.alpha.shape[1] != self.q or self.beta.shape[1] != self.q:
            raise ValueError("coefficient blocks do not match the order")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ValueError("non-finite ARMA coefficients")

    @property
    def T(self) -> int:
        return self.alpha.shape[0] - 1

    @property
    def n_z(self) -> int:
        return self.alpha.shape[2]

    @property
    def n_u(self) -> int:
        return self.beta.shape[3]

    def row(self, t: int) -> np.ndarray:
        """``[alpha_1 .. alpha_q | beta_1 .. beta_q]`` at time ``t``."""
        return np.concatenate(list(self.alpha[t]) + list(self.beta[t]), axis=1)


def default_num_rollouts(q: int, n_z: int, n_u: int) -> int:
    return 10 * (q * n_z + q * n_u)


def collect_perturbations(sys: BlackboxSystem, nominal: Trajectory, N: int, sigma: float,
                          seed: int = 0) -> PerturbationDataset:
    """Run ``N`` perturbed rollouts around ``nominal`` (vectorised over rollouts).

    Perturbations for rollout ``j`` come from an RNG stream keyed on ``(seed, j)``,
    so the dataset does not depend on how rollouts are batched.
    """
    if N <= 0:
        raise ValueError("empty dataset")
    if not sigma > 0:
        raise ValueError("perturbation std must be positive")
    T = nominal.horizon
    if sys.horizon is not None and T > sys.horizon:
        raise ValueError(f"nominal horizon {T} exceeds system horizon {sys.horizon}")
    if nominal.controls.shape[1] != sys.n_u or nominal.outputs.shape[1] != sys.n_z:
        raise ValueError("nominal trajectory does not match system dimensions")
    du = np.empty((N, T, sys.n_u))
    for j in range(N):
        rng = np.random.default_rng([int(seed), j])
        du[j] = sigma * rng.standard_normal((T, sys.n_u))
    x = np.broadcast_to(nominal.x0, (N, sys.n_x)).copy()
    z = np.empty((N, T + 1, sys.n_z))
    for t in range(T):
        z[:, t] = sys.output(x, t)
        x = sys.step(x, nominal.controls[t] + du[:, t], t)
    z[:, T] = sys.output(x, T)
    dz = z - nominal.outputs[None]
    if not np.all(np.isfinite(dz)):
        raise FloatingPointError("perturbed rollout diverged; reduce sigma")
    return PerturbationDataset(float(sigma), du, dz, nominal)


def correlations(data: PerturbationDataset, t: int, q: int) -> CorrelationSet:
    if t < q:
        raise ValueError(f"time {t} has insufficient history for order {q}")
    N = data.N
    zt = data.dz_at(t)
    R = np.stack([zt.T @ data.dz_at(t - i) / N for i in range(q + 1)])
    H = np.stack([zt.T @ data.du_at(t - i) / N for i in range(q + 1)])
    ut = data.du_at(t - 1)
    return CorrelationSet(t, R, H, ut.T @ ut / N)


def _canonicalise(theta: np.ndarray, X: np.ndarray, n_ar: int,
                  rtol: float = RANK_RTOL) -> np.ndarray:
    """Pick, among coefficient rows fitting the data equally well, the one whose
    autoregressive part has minimum norm.

    When the regressors are rank deficient (more stacked outputs than state
    dimensions, or unexcited directions early in the episode) the fit is not
    unique.  Null directions of ``X`` pair an output-lag vector ``w`` with a
    control-lag vector; the chosen solution satisfies ``alpha @ w = 0`` for all of
    them, which is the pseudo-inverse solution for an exactly linear system.
    """
    scale = np.sqrt(np.mean(X * X, axis=0))
    live = scale > 0
    Xs = X[:, live] / scale[live]
    if Xs.shape[1] == 0:
        return theta
    if Xs.shape[0] < Xs.shape[1]:
        # zero rows leave the row space unchanged and make Vt square
        Xs = np.vstack([Xs, np.zeros((Xs.shape[1] - Xs.shape[0], Xs.shape[1]))])
    _, s_full, Vt = np.linalg.svd(Xs, full_matrices=False)
    null = Vt[s_full <= rtol * s_full[0]].T
    if null.shape[1] == 0:
        return theta
    basis = np.zeros((X.shape[1], null.shape[1]))
    basis[live] = null / scale[live][:, None]
    W = basis[:n_ar]
    C = -theta[:, :n_ar] @ W @ np.linalg.pinv(W.T @ W)
    return theta + C @ basis.T


def fit_arma(data: PerturbationDataset, t: int, q: int,
             rtol: float = RANK_RTOL) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares ARMA coefficients at time ``t``.

    Singular directions of the column-scaled regressors below ``rtol`` times the
    largest are treated as null.  The default suits noiseless linear data; on a
    nonlinear blackbox second-order effects leave spurious directions near
    ``sigma``-relative size, so identification rounds use a looser value.

    Returns ``(alpha, beta, residual)`` with ``alpha`` of shape ``(q, n_z, n_z)``,
    ``beta`` of shape ``(q, n_z, n_u)`` and ``residual`` the per-rollout RMS of
    the fit error.
    """
    if q < 1:
        raise ValueError("order must be at least 1")
    if not 1 <= t <= data.T:
        raise ValueError(f"time {t} outside 1..{data.T}")
    X = data.regressors(t, q)
    Y = data.dz_at(t)
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0] = 1.0
    coef, *_ = np.linalg.lstsq(X / scale, Y, rcond=rtol)
    theta = (coef / scale[:, None]).T
    theta = _canonicalise(theta, X, q * data.n_z, rtol)
    if not np.all(np.isfinite(theta)):
        raise np.linalg.LinAlgError("singular regression; order too large or too few rollouts")
    resid = Y - X @ theta.T
    residual = float(np.sqrt(np.sum(resid * resid) / data.N))
    return _split(theta, q, data.n_z, data.n_u) + (residual,)


def fit_arma_correlation(data: PerturbationDataset, t: int, q: int,
                         reg: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Block-correlation form of the ARMA fit.

    The normal equations are assembled from correlations anchored at ``t`` and
    its ``q`` predecessors, imposing the structure expected of i.i.d.
    perturbations: outputs are uncorrelated with later perturbations and
    perturbations at different times are uncorrelated.  It converges to
    :func:`fit_arma` as ``N`` grows.
    """
    if t < q:
        raise ValueError(f"time {t} has insufficient history for order {q}")
    n_z, n_u = data.n_z, data.n_u
    anchors = {s: correlations(data, s, q) if s >= q else _short_correlations(data, s, q)
               for s in range(t - q, t + 1)}
    p = q * (n_z + n_u)
    G = np.zeros((p, p))
    zoff, uoff = 0, q * n_z
    for a in range(1, q + 1):
        ca = anchors[t - a]
        for b in range(a, q + 1):
            blk = ca.R[b - a]
            G[zoff + (a - 1) * n_z: zoff + a * n_z, zoff + (b - 1) * n_z: zoff + b * n_z] = blk
            G[zoff + (b - 1) * n_z: zoff + b * n_z, zoff + (a - 1) * n_z: zoff + a * n_z] = blk.T
            if b > a:
                h = ca.H[b - a]
                G[zoff + (a - 1) * n_z: zoff + a * n_z, uoff + (b - 1) * n_u: uoff + b * n_u] = h
                G[uoff + (b - 1) * n_u: uoff + b * n_u, zoff + (a - 1) * n_z: zoff + a * n_z] = h.T
        # U anchored at t - a + 1 is the second moment of du_{t-a}
        G[uoff + (a - 1) * n_u: uoff + a * n_u,
          uoff + (a - 1) * n_u: uoff + a * n_u] = anchors[t - a + 1].U
    ct = anchors[t]
    rhs = np.concatenate([ct.R[i] for i in range(1, q + 1)] + [ct.H[i] for i in range(1, q + 1)],
                         axis=1)
    lam = reg * np.trace(G) / p
    theta = np.linalg.solve(G + lam * np.eye(p), rhs.T).T
    alpha, beta = _split(theta, q, n_z, n_u)
    return alpha, beta


def _short_correlations(data, s, q):
    # anchors before q: correlations against negative times vanish
    N = data.N
    zs, us = data.dz_at(s), data.du_at(s - 1)
    R = np.stack([zs.T @ data.dz_at(s - i) / N for i in range(q + 1)])
    H = np.stack([zs.T @ data.du_at(s - i) / N for i in range(q + 1)])
    return CorrelationSet(s, R, H, us.T @ us / N)


def _split(theta, q, n_z, n_u):
    alpha = theta[:, : q * n_z].reshape(n_z, q, n_z).transpose(1, 0, 2)
    beta = theta[:, q * n_z:].reshape(n_z, q, n_u).transpose(1, 0, 2)
    return alpha.copy(), beta.copy()


def fit_model(data: PerturbationDataset, q: int, rtol: float = RANK_RTOL) -> ArmaModel:
    """Fit ARMA blocks at every ``t = 1..T`` of the dataset."""
    T = data.T
    alpha = np.zeros((T + 1, q, data.n_z, data.n_z))
    beta = np.zeros((T + 1, q, data.n_z, data.n_u))
    residual = np.zeros(T + 1)
    scale = np.zeros(T + 1)
    for t in range(1, T + 1):
        alpha[t], beta[t], residual[t] = fit_arma(data, t, q, rtol)
        scale[t] = np.sqrt(np.mean(np.sum(data.dz_at(t) ** 2, axis=1)))
    return ArmaModel(q, alpha, beta, residual, scale)


def arma_predict(model: ArmaModel, dz_hist: np.ndarray, du: np.ndarray, t: int) -> np.ndarray:
    """One-step ARMA prediction of ``dz_t`` from full deviation histories.

    ``dz_hist[s]`` and ``du[s]`` are deviations at time ``s``; earlier history
    is zero.
    """
    out = np.zeros(model.n_z)
    for i in range(1, model.q + 1):
        if t - i >= 0:
            out += model.alpha[t, i - 1] @ dz_hist[t - i] + model.beta[t, i - 1] @ du[t - i]
    return out


# --------------------------------------------------------------------------- #
# analytic oracle for linear systems
# --------------------------------------------------------------------------- #

def _transition(spec: LinearSystemSpec, t: int, s: int) -> np.ndarray:
    """State transition ``A_{t-1} ... A_s`` (identity when ``t == s``)."""
    Phi = np.eye(spec.n_x)
    for k in range(s, t):
        Phi = spec.at(k)[0] @ Phi
    return Phi


def observability_stack(spec: LinearSystemSpec, q: int, t: Optional[int] = None) -> np.ndarray:
    """Stack mapping ``dx_{t-q}`` to ``(dz_{t-1}, ..., dz_{t-q})``.

    For time-invariant systems this is ``[C A^{q-1}; ...; C A; C]``; for
    time-varying ones the powers become transition products ending at ``t - q``.
    """
    if spec.time_varying:
        if t is None:
            raise ValueError("time-varying systems need an anchor time t")
        if t < q:
            raise ValueError(f"anchor time {t} precedes the order {q}")
    else:
        t = q if t is None else t
    return np.vstack([spec.C_at(t - k) @ _transition(spec, t - k, t - q) for k in range(1, q + 1)])


def _toeplitz_block(spec: LinearSystemSpec, q: int, t: int) -> np.ndarray:
    # dz_{t-k} depends on du_{t-m} for m > k through C_{t-k} Phi(t-k, t-m+1) B_{t-m}
    n_z, n_u = spec.n_z, spec.n_u
    Hq = np.zeros((q * n_z, q * n_u))
    for k in range(1, q + 1):
        for m in range(k + 1, q + 1):
            blk = spec.C_at(t - k) @ _transition(spec, t - k, t - m + 1) @ spec.at(t - m)[1]
            Hq[(k - 1) * n_z: k * n_z, (m - 1) * n_u: m * n_u] = blk
    return Hq


def arma_exact(spec: LinearSystemSpec, q: int, t: Optional[int] = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Exact ARMA coefficients of a linear system whose order-``q`` observability
    stack has full column rank."""
    t = q if t is None else t
    O = observability_stack(spec, q, t)
    rank = np.linalg.matrix_rank(O)
    if rank < spec.n_x:
        raise ValueError(
            f"order q={q} insufficient: observability stack rank-deficient "
            f"(rank {rank} < n_x {spec.n_x})")
    Ct = spec.C_at(t)
    CAq = Ct @ _transition(spec, t, t - q)
    ar = CAq @ np.linalg.pinv(O)
    markov = np.hstack([Ct @ _transition(spec, t, t - i + 1) @ spec.at(t - i)[1]
                        for i in range(1, q + 1)])
    ma = markov - ar @ _toeplitz_block(spec, q, t)
    return _split(np.hstack([ar, ma]), q, spec.n_z, spec.n_u)


@dataclass(frozen=True)
class OrderReport:
    rank: int
    n_x: int
    sufficient: bool
    q: int


def check_order(spec: LinearSystemSpec, q: int, t: Optional[int] = None) -> OrderReport:
    """Rank of the observability stack against the state dimension."""
    if spec.time_varying and t is None:
        T = spec.horizon
        ranks = [np.linalg.matrix_rank(observability_stack(spec, q, s)) for s in range(q, T + 1)]
        rank = int(min(ranks)) if ranks else 0
    else:
        rank = int(np.linalg.matrix_rank(observability_stack(spec, q, t)))
    return OrderReport(rank, spec.n_x, rank >= spec.n_x, q)


# --------------------------------------------------------------------------- #
# empirical order selection
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class SelectionResult:
    q: int
    orders: tuple[int, ...]
    residuals: tuple[float, ...]
    fallback: bool


def relative_residual(data: PerturbationDataset, q: int, times: Sequence[int]) -> float:
    """RMS fit residual over ``times``, relative to the output-deviation RMS and
    clipped below at :data:`RESIDUAL_FLOOR`."""
    num = den = 0.0
    for t in times:
        _, _, r = fit_arma(data, t, q)
        num += r * r
        den += float(np.mean(np.sum(data.dz_at(t) ** 2, axis=1)))
    if den == 0:
        return RESIDUAL_FLOOR
    return max(float(np.sqrt(num / den)), RESIDUAL_FLOOR)


def select_order(sys: BlackboxSystem, nominal: Trajectory, q_max: int, N: Optional[int] = None,
                 sigma: Optional[float] = None, seed: int = 0, threshold: float = 1.05,
                 times: Optional[Sequence[int]] = None) -> SelectionResult:
    """Smallest ``q`` beyond which a larger order no longer improves the fit.

    ``q`` is accepted once ``residual(q) / residual(q + 1) < threshold``.  When no
    order up to ``q_max - 1`` qualifies, ``q_max`` is returned with ``fallback``
    set.

    On a nonlinear system the fit residual has a part proportional to ``sigma``
    that extra lags partly absorb, so the default ``sigma`` is tiny
    (``SELECT_SIGMA_REL * max(max|u|, 1)``) to push that part below
    :data:`RESIDUAL_FLOOR`.
    """
    if q_max < 1:
        raise ValueError("q_max must be at least 1")
    if N is None:
        N = 2 * default_num_rollouts(q_max + 1, sys.n_z, sys.n_u)
    if sigma is None:
        sigma = SELECT_SIGMA_REL * max(float(np.max(np.abs(nominal.controls))), 1.0)
    data = collect_perturbations(sys, nominal, N, sigma, seed)
    T = nominal.horizon
    if times is None:
        start = min(q_max + 1 + sys.n_x, T)
        times = range(start, T + 1)
    orders = tuple(range(1, q_max + 2)) if q_max + 1 <= T else tuple(range(1, q_max + 1))
    residuals = tuple(relative_residual(data, q, times) for q in orders)
    for q in range(1, q_max + 1):
        if q < len(orders) and residuals[q - 1] / residuals[q] < threshold:
            return SelectionResult(q, orders, residuals, False)
    warnings.warn(f"no order up to {q_max} reached the residual plateau; using q_max")
    return SelectionResult(q_max, orders, residuals, True)


# --------------------------------------------------------------------------- #
# CSV dumps
# --------------------------------------------------------------------------- #

def write_dataset_csv(data: PerturbationDataset, path) -> None:
    """One row per (rollout, time): ``rollout,t,du_0..,dz_0..`` (``du`` empty at ``t = T``)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout", "t"] + [f"du_{k}" for k in range(data.n_u)]
                   + [f"dz_{k}" for k in range(data.n_z)])
        for j in range(data.N):
            for t in range(data.T + 1):
                du = [repr(float(v)) for v in data.du[j, t]] if t < data.T else [""] * data.n_u
                w.writerow([j, t] + du + [repr(float(v)) for v in data.dz[j, t]])


def write_model_csv(model: ArmaModel, path) -> None:
    """One row per coefficient: ``t,kind,lag,row,col,value`` with ``kind`` in {alpha, beta}."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "lag", "row", "col", "value"])
        for t in range(1, model.T + 1):
            for kind, blocks in (("alpha", model.alpha[t]), ("beta", model.beta[t])):
                for lag, blk in enumerate(blocks, start=1):
                    for (r, c), v in np.ndenumerate(blk):
                        w.writerow([t, kind, lag, r, c, repr(float(v))])


@dataclass(frozen=True)
class SysidConfig:
    """Perturbation budget for one identification round.

    ``sigma = max(sigma_rel * max|u_nominal|, sigma_min)``; ``num_rollouts=None``
    uses twice :func:`default_num_rollouts`.  ``rank_rtol`` is passed to
    :func:`fit_arma`.
    """

    num_rollouts: Optional[int] = None
    sigma_rel: float = 1e-2
    sigma_min: float = 1e-3
    q: Optional[int] = None
    rank_rtol: float = 1e-4

    def __post_init__(self):
        if self.num_rollouts is not None and self.num_rollouts <= 0:
            raise ValueError("empty dataset")
        if self.sigma_rel < 0 or not self.sigma_min > 0:
            raise ValueError("perturbation scales must be positive")
        if not 0 < self.rank_rtol < 1:
            raise ValueError("rank_rtol must lie in (0, 1)")

    def sigma(self, nominal: Trajectory) -> float:
        return max(self.sigma_rel * float(np.max(np.abs(nominal.controls))), self.sigma_min)

    def rollouts(self, q: int, n_z: int, n_u: int) -> int:
        if self.num_rollouts is not None:
            return self.num_rollouts
        return 2 * default_num_rollouts(q, n_z, n_u)


def identify(sys: BlackboxSystem, nominal: Trajectory, q: int, cfg: SysidConfig,
             seed: int = 0) -> ArmaModel:
    """Collect perturbation data around ``nominal`` and fit ARMA blocks for every step."""
    N = cfg.rollouts(q, sys.n_z, sys.n_u)
    data = collect_perturbations(sys, nominal, N, cfg.sigma(nominal), seed)
    return fit_model(data, q, cfg.rank_rtol)
