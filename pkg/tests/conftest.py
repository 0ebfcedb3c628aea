from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pod2c.config import load_config
from pod2c.dynamics import LinearSystemSpec, NoiseSpec, make_builtin
from pod2c.harness import build_system
from pod2c.lqg import synthesize
from pod2c.pomilqr import initial_trajectory, optimize

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def random_observable(rng, n_x, n_u, n_z, q, stable=True):
    """Random LTI system whose order-q observability stack has full column rank."""
    from pod2c.sysid import check_order

    while True:
        A = rng.standard_normal((n_x, n_x))
        if stable:
            A *= 0.9 / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
        B = rng.standard_normal((n_x, n_u))
        C = rng.standard_normal((n_z, n_x))
        spec = LinearSystemSpec(A, B, C)
        if check_order(spec, q).sufficient:
            return spec


def linear_system(spec, x0=None):
    params = {"A": spec.A, "B": spec.B, "C": spec.C}
    if x0 is not None:
        params["x0"] = x0
    return make_builtin("linear-ltv", params)


@pytest.fixture(scope="session")
def cartpole_cfg():
    return load_config(CONFIGS / "cartpole.ini")


@pytest.fixture(scope="session")
def cartpole_trained(cartpole_cfg):
    cfg = cartpole_cfg
    sys = build_system(cfg)
    init = initial_trajectory(sys, cfg.cost, cfg.system.horizon)
    res = optimize(sys, init, cfg.cost, cfg.sysid.q, cfg.solver, cfg.sysid.fit, seed=cfg.seed)
    return sys, res


@pytest.fixture(scope="session")
def cartpole_policy(cartpole_cfg, cartpole_trained):
    cfg = cartpole_cfg
    sys, res = cartpole_trained
    nom = res.trajectory
    noise = NoiseSpec(cfg.noise.design_process, cfg.noise.design_measurement,
                      cfg.evaluate.seed).with_reference(nom.controls, nom.outputs)
    return synthesize(sys, nom, cfg.cost, cfg.sysid.q, noise, cfg.sysid.fit, seed=cfg.seed)


def lq_batch_optimum(spec, x0, T, Q, R, Qf, goal):
    """Optimal cost and controls of a linear output-tracking problem by one
    dense least-squares solve over the whole control sequence."""
    A, B, C = spec.A, spec.B, spec.C
    n_z, n_u = C.shape[0], B.shape[1]
    Phi = np.zeros(((T + 1) * n_z, len(x0)))
    G = np.zeros(((T + 1) * n_z, T * n_u))
    Ak = np.eye(len(x0))
    for t in range(T + 1):
        Phi[t * n_z:(t + 1) * n_z] = C @ Ak
        Ak = A @ Ak
        for j in range(t):
            G[t * n_z:(t + 1) * n_z, j * n_u:(j + 1) * n_u] = C @ np.linalg.matrix_power(A, t - 1 - j) @ B
    W = np.zeros(((T + 1) * n_z, (T + 1) * n_z))
    for t in range(T):
        W[t * n_z:(t + 1) * n_z, t * n_z:(t + 1) * n_z] = Q
    W[T * n_z:, T * n_z:] = Qf
    Rb = np.kron(np.eye(T), R)
    target = np.tile(goal, T + 1) - Phi @ x0
    U = np.linalg.solve(G.T @ W @ G + Rb, G.T @ W @ target)
    e = G @ U - target
    return float(e @ W @ e + U @ Rb @ U), U.reshape(T, n_u)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
