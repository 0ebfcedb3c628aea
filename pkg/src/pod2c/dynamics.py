"""Deterministic blackbox simulators and the rollout interface.

Every simulator maps ``(x_t, u_t, t) -> x_{t+1}`` and ``(x_t, t) -> z_t`` and is
vectorised over leading batch axes, so ``x`` may have shape ``(n_x,)`` or
``(..., n_x)``.  Noise is never injected here by the simulator itself; callers
pass a :class:`NoiseSpec` to :func:`rollout`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

__all__ = [
    "BlackboxSystem",
    "Trajectory",
    "LinearSystemSpec",
    "NoiseSpec",
    "BUILTIN_SYSTEMS",
    "make_builtin",
    "linearize",
    "rollout",
    "noise_streams",
    "cartpole_energy",
    "rk4_step",
]


@dataclass(frozen=True)
class LinearSystemSpec:
    """``x_{t+1} = A_t x_t + B_t u_t``, ``z_t = C_t x_t``.

    Matrices are either 2-D (time-invariant) or 3-D with the time index first.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A, B, C = (np.asarray(m, dtype=float) for m in (self.A, self.B, self.C))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        if A.shape[-1] != A.shape[-2]:
            raise ValueError(f"A must be square, got {A.shape}")
        n_x = A.shape[-1]
        if B.shape[-2] != n_x or C.shape[-1] != n_x:
            raise ValueError(
                f"inconsistent dimensions A{A.shape} B{B.shape} C{C.shape}")
        lengths = {m.shape[0] for m in (A, B) if m.ndim == 3}
        if len(lengths) > 1:
            raise ValueError(f"time-varying sequences differ in length: {lengths}")
        # C may carry one extra entry for the terminal output
        if C.ndim == 3 and lengths and C.shape[0] - min(lengths) not in (0, 1):
            raise ValueError(f"C has {C.shape[0]} entries for a horizon of {min(lengths)}")
        if any(m.ndim not in (2, 3) for m in (A, B, C)):
            raise ValueError("matrices must be 2-D or 3-D (time-major)")

    @property
    def n_x(self) -> int:
        return self.A.shape[-1]

    @property
    def n_u(self) -> int:
        return self.B.shape[-1]

    @property
    def n_z(self) -> int:
        return self.C.shape[-2]

    @property
    def time_varying(self) -> bool:
        return any(m.ndim == 3 for m in (self.A, self.B, self.C))

    @property
    def horizon(self) -> Optional[int]:
        for m in (self.A, self.B, self.C):
            if m.ndim == 3:
                return m.shape[0]
        return None

    def C_at(self, t: int) -> np.ndarray:
        """Output matrix at ``t``; a short sequence repeats its last entry."""
        if self.C.ndim == 2:
            return self.C
        return self.C[min(t, self.C.shape[0] - 1)]

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Matrices in force at time ``t``."""
        def pick(m):
            if m.ndim == 2:
                return m
            if not 0 <= t < m.shape[0]:
                raise IndexError(f"time {t} outside horizon {m.shape[0]}")
            return m[t]
        return pick(self.A), pick(self.B), self.C_at(t)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian process/measurement noise expressed as fractions of reference magnitudes.

    ``process_std`` scales ``u_ref`` (max nominal control per channel) and
    ``measurement_std`` scales ``z_ref`` (max nominal output per channel).  When
    the references are left as ``None`` the fractions act as absolute values.
    """

    process_std: float = 0.0
    measurement_std: float = 0.0
    seed: int = 0
    u_ref: Optional[np.ndarray] = None
    z_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.process_std < 0 or self.measurement_std < 0:
            raise ValueError("noise standard deviations must be non-negative")

    def with_reference(self, controls: np.ndarray, outputs: np.ndarray) -> "NoiseSpec":
        """Copy whose reference scales are the per-channel max |nominal| values."""
        u_ref = np.max(np.abs(np.asarray(controls, dtype=float)), axis=0)
        z_ref = np.max(np.abs(np.asarray(outputs, dtype=float)), axis=0)
        return NoiseSpec(self.process_std, self.measurement_std, self.seed, u_ref, z_ref)

    def process_sigma(self, n_u: int) -> np.ndarray:
        ref = np.ones(n_u) if self.u_ref is None else np.asarray(self.u_ref, dtype=float)
        return self.process_std * ref

    def measurement_sigma(self, n_z: int) -> np.ndarray:
        ref = np.ones(n_z) if self.z_ref is None else np.asarray(self.z_ref, dtype=float)
        return self.measurement_std * ref

    @property
    def is_zero(self) -> bool:
        return self.process_std == 0 and self.measurement_std == 0


@dataclass(frozen=True)
class Trajectory:
    """Nominal state/output/control sequences of one episode.

    ``states`` and ``outputs`` have ``T + 1`` rows, ``controls`` has ``T``.
    """

    states: np.ndarray
    outputs: np.ndarray
    controls: np.ndarray
    cost: float = float("nan")

    def __post_init__(self):
        for name in ("states", "outputs", "controls"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        T = self.controls.shape[0]
        if self.states.shape[0] != T + 1 or self.outputs.shape[0] != T + 1:
            raise ValueError(
                f"trajectory lengths inconsistent: {self.states.shape[0]} states, "
                f"{self.outputs.shape[0]} outputs, {T} controls")

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]


def noise_streams(seed: int, episode: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (process, measurement) generators for one episode.

    The process stream does not depend on the measurement level, so sweeps over
    measurement noise reuse identical process-noise draws per episode.
    """
    proc, meas = np.random.SeedSequence([int(seed), int(episode)]).spawn(2)
    return np.random.default_rng(proc), np.random.default_rng(meas)


@dataclass(frozen=True)
class BlackboxSystem:
    name: str
    n_x: int
    n_u: int
    n_z: int
    dt: float
    step_fn: Callable[[np.ndarray, np.ndarray, int], np.ndarray] = field(repr=False)
    output_fn: Callable[[np.ndarray, int], np.ndarray] = field(repr=False)
    x0: np.ndarray = field(repr=False)
    params: Mapping = field(default_factory=dict)
    linear: Optional[LinearSystemSpec] = field(default=None, repr=False)
    horizon: Optional[int] = None

    def step(self, x, u, t: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.n_x:
            raise ValueError(f"state has dimension {x.shape[-1]}, expected {self.n_x}")
        if u.shape[-1] != self.n_u:
            raise ValueError(f"control has dimension {u.shape[-1]}, expected {self.n_u}")
        return self.step_fn(x, u, t)

    def output(self, x, t: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.output_fn(x, t)


def rk4_step(f: Callable[[np.ndarray, np.ndarray], np.ndarray], x, u, h: float):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _require_positive(params: Mapping, *names: str) -> None:
    for name in names:
        if not float(params[name]) > 0:
            raise ValueError(f"parameter {name!r} must be positive, got {params[name]!r}")


def _merge(defaults: Mapping, params: Optional[Mapping]) -> dict:
    params = dict(params or {})
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameters: {sorted(unknown)}")
    out = dict(defaults)
    out.update(params)
    return out


# --------------------------------------------------------------------------- #
# built-in families
# --------------------------------------------------------------------------- #

def _double_integrator(params):
    p = _merge({"dt": 0.1, "x0": (0.0, 0.0)}, params)
    _require_positive(p, "dt")
    dt = float(p["dt"])
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.0], [dt]])
    C = np.array([[1.0, 0.0]])

    def step(x, u, t):
        pos, vel = x[..., 0], x[..., 1]
        return np.stack([pos + dt * vel, vel + dt * u[..., 0]], axis=-1)

    def output(x, t):
        return x[..., :1].copy()

    return BlackboxSystem("double-integrator", 2, 1, 1, dt, step, output,
                          np.asarray(p["x0"], dtype=float), p, LinearSystemSpec(A, B, C))


def _linear_ltv(params):
    p = _merge({"A": None, "B": None, "C": None, "dt": 1.0, "x0": None, "T": None}, params)
    if p["A"] is None or p["B"] is None or p["C"] is None:
        raise ValueError("linear-ltv requires A, B and C")
    _require_positive(p, "dt")
    spec = LinearSystemSpec(p["A"], p["B"], p["C"])
    horizon = spec.horizon
    if p["T"] is not None and horizon is not None and int(p["T"]) != horizon:
        raise ValueError(f"T={p['T']} but matrix sequences have length {horizon}")
    # outputs are read at t = 0..T, so a time-varying C takes T+1 entries;
    # a C sequence of length T reuses its last entry at the terminal time
    def step(x, u, t):
        A = spec.A if spec.A.ndim == 2 else spec.A[t]
        B = spec.B if spec.B.ndim == 2 else spec.B[t]
        return x @ A.T + u @ B.T

    def output(x, t):
        return x @ spec.C_at(t).T

    x0 = np.zeros(spec.n_x) if p["x0"] is None else np.asarray(p["x0"], dtype=float)
    return BlackboxSystem("linear-ltv", spec.n_x, spec.n_u, spec.n_z, float(p["dt"]),
                          step, output, x0, p, spec, horizon)


def _pendulum(params):
    p = _merge({"mass": 1.0, "length": 1.0, "g": 9.81, "damping": 0.0, "dt": 0.05,
                "substeps": 1, "x0": (0.0, 0.0)}, params)
    _require_positive(p, "mass", "length", "dt", "substeps")
    m, l, g, b = float(p["mass"]), float(p["length"]), float(p["g"]), float(p["damping"])
    h = float(p["dt"]) / int(p["substeps"])

    def f(x, u):
        th, om = x[..., 0], x[..., 1]
        acc = -(g / l) * np.sin(th) - b * om + u[..., 0] / (m * l * l)
        return np.stack([om, acc], axis=-1)

    def step(x, u, t):
        for _ in range(int(p["substeps"])):
            x = rk4_step(f, x, u, h)
        return x

    def output(x, t):
        return x[..., :1].copy()

    return BlackboxSystem("pendulum", 2, 1, 1, float(p["dt"]), step, output,
                          np.asarray(p["x0"], dtype=float), p)


def _cartpole_accel(x, force, M, m, l, g):
    # theta = 0 is hanging down; uniform rod of half-length l (I_com = m l^2 / 3)
    th, thd = x[..., 1], x[..., 3]
    s, c = np.sin(th), np.cos(th)
    a11 = M + m
    a12 = m * l * c
    a22 = (4.0 / 3.0) * m * l * l
    b1 = force + m * l * s * thd * thd
    b2 = -m * g * l * s
    det = a11 * a22 - a12 * a12
    pdd = (a22 * b1 - a12 * b2) / det
    thdd = (a11 * b2 - a12 * b1) / det
    return pdd, thdd


def cartpole_energy(x, params: Mapping) -> np.ndarray:
    """Total mechanical energy of cart-pole state(s) ``x = (p, theta, pdot, thetadot)``."""
    M, m, l, g = (float(params[k]) for k in ("cart_mass", "pole_mass", "half_length", "g"))
    x = np.asarray(x, dtype=float)
    th, pd, thd = x[..., 1], x[..., 2], x[..., 3]
    kinetic = (0.5 * (M + m) * pd ** 2 + m * l * pd * thd * np.cos(th)
               + 0.5 * (4.0 / 3.0) * m * l * l * thd ** 2)
    potential = -m * g * l * np.cos(th)
    return kinetic + potential


def _cartpole(params):
    p = _merge({"cart_mass": 1.0, "pole_mass": 0.1, "half_length": 0.5, "g": 9.81,
                "dt": 0.1, "substeps": 5, "x0": (0.0, 0.0, 0.0, 0.0)}, params)
    _require_positive(p, "cart_mass", "pole_mass", "half_length", "dt", "substeps")
    M, m, l, g = (float(p[k]) for k in ("cart_mass", "pole_mass", "half_length", "g"))
    n_sub = int(p["substeps"])
    h = float(p["dt"]) / n_sub

    def f(x, u):
        pdd, thdd = _cartpole_accel(x, u[..., 0], M, m, l, g)
        return np.stack([x[..., 2], x[..., 3], pdd, thdd], axis=-1)

    def step(x, u, t):
        for _ in range(n_sub):
            x = rk4_step(f, x, u, h)
        return x

    def output(x, t):
        return x[..., :2].copy()

    return BlackboxSystem("cartpole", 4, 1, 2, float(p["dt"]), step, output,
                          np.asarray(p["x0"], dtype=float), p)


def _swimmer_velocity(q, rates, n_links, length, c_t, c_n):
    """Body velocity of an inertia-free resistive-force swimmer.

    ``q = (x, y, heading, joint angles...)`` locates the head link's centre.  The
    body velocity is the unique one for which the net drag force and torque vanish.
    """
    dim = 3 + n_links - 1
    heading = q[2]
    angles = heading + np.concatenate([[0.0], np.cumsum(q[3:])])
    # d(theta_i)/dq and d(r_i)/dq as rows over the generalised velocity
    a = np.zeros((n_links, dim))
    a[:, 2] = 1.0
    for i in range(1, n_links):
        a[i, 3:3 + i] = 1.0
    M = np.zeros((n_links, 2, dim))
    M[0, 0, 0] = M[0, 1, 1] = 1.0
    pos = np.zeros((n_links, 2))
    pos[0] = q[:2]
    for i in range(1, n_links):
        prev, cur = angles[i - 1], angles[i]
        perp_prev = np.array([-np.sin(prev), np.cos(prev)])
        perp_cur = np.array([-np.sin(cur), np.cos(cur)])
        M[i] = (M[i - 1] + 0.5 * length * np.outer(perp_prev, a[i - 1])
                + 0.5 * length * np.outer(perp_cur, a[i]))
        pos[i] = (pos[i - 1] + 0.5 * length * np.array([np.cos(prev), np.sin(prev)])
                  + 0.5 * length * np.array([np.cos(cur), np.sin(cur)]))
    G = np.zeros((3, dim))
    for i in range(n_links):
        tang = np.array([np.cos(angles[i]), np.sin(angles[i])])
        norm = np.array([-np.sin(angles[i]), np.cos(angles[i])])
        drag = length * (c_t * np.outer(tang, tang) + c_n * np.outer(norm, norm))
        force = -drag @ M[i]
        G[:2] += force
        G[2] += pos[i, 0] * force[1] - pos[i, 1] * force[0]
        G[2] -= c_n * length ** 3 / 12.0 * a[i]
    body = np.linalg.solve(G[:, :3], -G[:, 3:] @ rates)
    return np.concatenate([body, rates])


def _nlink_swimmer(params):
    p = _merge({"n_links": 3, "link_length": 1.0, "drag_normal": 1.0,
                "drag_tangent": 0.5, "dt": 0.1, "substeps": 2, "x0": None}, params)
    _require_positive(p, "n_links", "link_length", "drag_normal", "drag_tangent", "dt",
                      "substeps")
    n_links = int(p["n_links"])
    if n_links < 2:
        raise ValueError("a swimmer needs at least two links")
    length, c_n, c_t = float(p["link_length"]), float(p["drag_normal"]), float(p["drag_tangent"])
    n_u = n_links - 1
    n_x = 3 + n_u
    observed = list(range(0, n_u, 2))
    n_sub = int(p["substeps"])
    h = float(p["dt"]) / n_sub

    def f_single(q, rates):
        return _swimmer_velocity(q, rates, n_links, length, c_t, c_n)

    def f(x, u):
        flat_x = x.reshape(-1, n_x)
        flat_u = np.broadcast_to(u, x.shape[:-1] + (n_u,)).reshape(-1, n_u)
        out = np.array([f_single(a, b) for a, b in zip(flat_x, flat_u)])
        return out.reshape(x.shape)

    def step(x, u, t):
        for _ in range(n_sub):
            x = rk4_step(f, x, u, h)
        return x

    def output(x, t):
        # head position plus every other joint angle
        return np.concatenate([x[..., :2], x[..., [3 + j for j in observed]]], axis=-1)

    x0 = np.zeros(n_x) if p["x0"] is None else np.asarray(p["x0"], dtype=float)
    return BlackboxSystem("nlink-swimmer", n_x, n_u, 2 + len(observed), float(p["dt"]),
                          step, output, x0, p)


BUILTIN_SYSTEMS = {
    "double-integrator": _double_integrator,
    "linear-ltv": _linear_ltv,
    "pendulum": _pendulum,
    "cartpole": _cartpole,
    "nlink-swimmer": _nlink_swimmer,
}


def make_builtin(name: str, params: Optional[Mapping] = None) -> BlackboxSystem:
    """Construct one of the built-in simulators by name."""
    try:
        factory = BUILTIN_SYSTEMS[name]
    except KeyError:
        raise ValueError(
            f"unknown system {name!r}; choose from {sorted(BUILTIN_SYSTEMS)}") from None
    return factory(params)


def linearize(sys: BlackboxSystem, nominal: "Trajectory", h: float = 1e-6) -> BlackboxSystem:
    """Deviation dynamics about ``nominal`` as a ``linear-ltv`` system.

    Jacobians of ``step`` and ``output`` come from central differences with
    step ``h``; the returned system starts at the zero deviation.
    """
    T, n_x, n_u = nominal.horizon, sys.n_x, sys.n_u
    A = np.zeros((T, n_x, n_x))
    B = np.zeros((T, n_x, n_u))
    C = np.zeros((T + 1, sys.n_z, n_x))
    ex, eu = h * np.eye(n_x), h * np.eye(n_u)
    for t in range(T + 1):
        x = nominal.states[t]
        for i in range(n_x):
            C[t, :, i] = (sys.output(x + ex[i], t) - sys.output(x - ex[i], t)) / (2 * h)
        if t == T:
            break
        u = nominal.controls[t]
        for i in range(n_x):
            A[t, :, i] = (sys.step(x + ex[i], u, t) - sys.step(x - ex[i], u, t)) / (2 * h)
        for i in range(n_u):
            B[t, :, i] = (sys.step(x, u + eu[i], t) - sys.step(x, u - eu[i], t)) / (2 * h)
    return make_builtin("linear-ltv", {"A": A, "B": B, "C": C, "dt": sys.dt})


def rollout(sys: BlackboxSystem, x0, controls, noise: Optional[NoiseSpec] = None,
            episode: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Chain ``T`` one-step simulations.

    Returns ``(states, outputs)`` of lengths ``T + 1``.  With noise, a Gaussian
    ``w_t`` is added to every control channel before stepping and ``v_t`` to
    every output channel after reading it.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls[:, None]
    if controls.ndim != 2 or controls.shape[0] < 1:
        raise ValueError("controls must be a non-empty (T, n_u) sequence")
    if controls.shape[1] != sys.n_u:
        raise ValueError(f"controls have {controls.shape[1]} channels, system has {sys.n_u}")
    T = controls.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((T + 1, sys.n_x))
    outputs = np.empty((T + 1, sys.n_z))
    if noise is not None and not noise.is_zero:
        rng_w, rng_v = noise_streams(noise.seed, episode)
        w = rng_w.standard_normal((T, sys.n_u)) * noise.process_sigma(sys.n_u)
        v = rng_v.standard_normal((T + 1, sys.n_z)) * noise.measurement_sigma(sys.n_z)
    else:
        w = np.zeros((T, sys.n_u))
        v = np.zeros((T + 1, sys.n_z))
    states[0] = x
    for t in range(T):
        outputs[t] = sys.output(x, t)
        x = sys.step(x, controls[t] + w[t], t)
        states[t + 1] = x
    outputs[T] = sys.output(x, T)
    return states, outputs + v
