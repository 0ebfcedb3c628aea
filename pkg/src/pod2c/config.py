"""Experiment configuration files.

Configs are INI files read with :mod:`configparser`.  Sections and keys::

    [system]     name, horizon, plus any model parameter (``dt``, ``pole_mass`` ...)
                 and for ``linear-ltv`` the matrices ``A``, ``B``, ``C``
    [cost]       Q, R, Qf, goal, Qf_diff (optional)
    [solver]     any field of SolverConfig
    [sysid]      q (integer or ``auto``), q_max, num_rollouts (integer or ``auto``),
                 sigma_rel, sigma_min, rank_rtol, noise_mode (``sum`` / ``per-lag``)
    [noise]      design_process, design_measurement, fixed_process,
                 fixed_measurement, measurement_grid, process_grid,
                 failure_threshold, retune_observer
    [evaluate]   episodes, seed, success_output, success_tolerance, penalty_factor
    [run]        seed, output_dir

Vectors are whitespace separated (``goal = 0 pi``).  Matrices separate rows with
``;`` (``A = 1 0.1; 0 1``).  A vector given for a square weight means its
diagonal, and a single number means that multiple of the identity.  ``pi`` may
appear as a number, optionally with a sign.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .pomilqr import CostModel, SolverConfig
from .sysid import SysidConfig

__all__ = [
    "ConfigError",
    "SystemConfig",
    "SysidSettings",
    "NoiseConfig",
    "EvalConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "OUTPUT_ENV",
]

OUTPUT_ENV = "POD2C_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _number(tok: str) -> float:
    t = tok.strip().lower()
    sign = -1.0 if t.startswith("-") else 1.0
    core = t.lstrip("+-")
    if core == "pi":
        return sign * math.pi
    return float(tok)


def parse_vector(text: str) -> np.ndarray:
    return np.array([_number(tok) for tok in text.replace(",", " ").split()], dtype=float)


def parse_matrix(text: str) -> np.ndarray:
    rows = [parse_vector(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows must have equal length")
    return np.array(rows)


def square_weight(text: str, n: int) -> np.ndarray:
    if ";" in text:
        M = parse_matrix(text)
    else:
        v = parse_vector(text)
        M = v[0] * np.eye(n) if v.size == 1 else np.diag(v)
    if M.shape != (n, n):
        raise ValueError(f"expected a {n}x{n} weight, got shape {M.shape}")
    return M


@dataclass(frozen=True)
class SystemConfig:
    name: str
    horizon: int
    params: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class SysidSettings:
    q: Optional[int] = 2
    q_max: int = 4
    noise_mode: str = "sum"
    fit: SysidConfig = SysidConfig()


@dataclass(frozen=True)
class NoiseConfig:
    """Noise levels are fractions of the per-channel max nominal magnitude."""

    design_process: float = 0.1
    design_measurement: float = 0.1
    fixed_process: float = 0.1
    fixed_measurement: float = 0.1
    measurement_grid: tuple = (0.0, 0.05, 0.1, 0.15, 0.2)
    process_grid: tuple = (0.05, 0.1, 0.15, 0.2)
    failure_threshold: float = float("inf")
    retune_observer: bool = True


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 200
    seed: int = 1
    success_output: int = 0
    success_tolerance: float = float("inf")
    penalty_factor: float = 10.0


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig
    cost: CostModel
    solver: SolverConfig = SolverConfig()
    sysid: SysidSettings = SysidSettings()
    noise: NoiseConfig = NoiseConfig()
    evaluate: EvalConfig = EvalConfig()
    seed: int = 0
    output_dir: str = "out"
    source: str = "<string>"


class _Reader:
    """Typed access to a parsed config with line numbers in error messages."""

    def __init__(self, cp: configparser.ConfigParser, lines: Mapping, source: str):
        self.cp, self.lines, self.source = cp, lines, source

    def where(self, section, key=None):
        n = self.lines.get((section, key))
        if n is None:
            return f"{self.source} [{section}]{'.' + key if key else ''}"
        return f"{self.source}:{n}"

    def get(self, section, key, conv=str, default=None, required=False):
        if not self.cp.has_option(section, key):
            if required:
                raise ConfigError(f"{self.where(section)}: missing required key {key!r}")
            return default
        raw = self.cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.where(section, key)}: bad value for {section}.{key}: {exc}") from None

    def keys(self, section):
        return list(self.cp[section].keys()) if self.cp.has_section(section) else []


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"{text!r} is not an integer")
    return int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _auto_int(text):
    return None if text.strip().lower() == "auto" else _int(text)


def _line_index(text: str) -> dict:
    index, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            index[(section, None)] = n
        elif section and s and not s.startswith(("#", ";")) and ("=" in s or ":" in s):
            key = s.split("=", 1)[0].split(":", 1)[0].strip().lower()
            index[(section, key)] = n
    return index


def _apply_overrides(cp, overrides: Sequence[str]):
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key.strip(), value.strip())


KNOWN = {
    "system": None,
    "cost": {"q", "r", "qf", "goal", "qf_diff"},
    "solver": {f.name for f in fields(SolverConfig)},
    "sysid": {"q", "q_max", "num_rollouts", "sigma_rel", "sigma_min", "rank_rtol", "noise_mode"},
    "noise": {f.name for f in fields(NoiseConfig)},
    "evaluate": {f.name for f in fields(EvalConfig)},
    "run": {"seed", "output_dir"},
}


def parse_config(text: str, source: str = "<string>", overrides: Sequence[str] = ()) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=source)
    except configparser.ParsingError as exc:
        first = exc.errors[0] if getattr(exc, "errors", None) else (0, "")
        raise ConfigError(f"{source}:{first[0]}: cannot parse line {first[1]}") from None
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        raise ConfigError(f"{source}:{lineno}: {exc.message}" if lineno else f"{source}: {exc}") from None
    _apply_overrides(cp, overrides)
    r = _Reader(cp, _line_index(text), source)

    for section in cp.sections():
        if section not in KNOWN:
            raise ConfigError(f"{r.where(section)}: unknown section [{section}]")
        allowed = KNOWN[section]
        if allowed is not None:
            for key in cp[section]:
                if key not in allowed:
                    raise ConfigError(f"{r.where(section, key)}: unknown key {section}.{key}")

    if not cp.has_section("system"):
        raise ConfigError(f"{source}: missing [system] section")
    name = r.get("system", "name", required=True)
    horizon = r.get("system", "horizon", _int, required=True)
    if horizon < 1:
        raise ConfigError(f"{r.where('system', 'horizon')}: horizon must be positive")
    params = {}
    for key in r.keys("system"):
        if key in ("name", "horizon"):
            continue
        if key in ("a", "b", "c"):
            params[key.upper()] = r.get("system", key, parse_matrix)
        elif key == "t":
            params["T"] = r.get("system", key, _int)
        elif key == "x0":
            params[key] = r.get("system", key, parse_vector)
        elif key == "substeps":
            params[key] = r.get("system", key, _int)
        else:
            params[key] = r.get("system", key, _number)
    system = SystemConfig(name, horizon, params)

    # dimensions come from the system itself
    from .dynamics import make_builtin  # local import keeps config importable standalone
    try:
        sys = make_builtin(name, params)
    except ValueError as exc:
        raise ConfigError(f"{r.where('system')}: {exc}") from None
    n_z, n_u = sys.n_z, sys.n_u

    if not cp.has_section("cost"):
        raise ConfigError(f"{source}: missing [cost] section")
    try:
        cost = CostModel(
            Q=r.get("cost", "q", lambda s: square_weight(s, n_z), required=True),
            R=r.get("cost", "r", lambda s: square_weight(s, n_u), required=True),
            Qf=r.get("cost", "qf", lambda s: square_weight(s, n_z), required=True),
            goal=r.get("cost", "goal", parse_vector, np.zeros(n_z)),
            Qf_diff=r.get("cost", "qf_diff", lambda s: square_weight(s, n_z)),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{r.where('cost')}: {exc}") from None

    solver_kw = {}
    for f in fields(SolverConfig):
        conv = _int if f.name == "max_iterations" else float
        v = r.get("solver", f.name, conv)
        if v is not None:
            solver_kw[f.name] = v
    try:
        solver = SolverConfig(**solver_kw)
    except ValueError as exc:
        raise ConfigError(f"{r.where('solver')}: {exc}") from None

    fit_kw = {}
    for key, conv in (("sigma_rel", float), ("sigma_min", float), ("rank_rtol", float),
                      ("num_rollouts", _auto_int)):
        v = r.get("sysid", key, conv)
        if v is not None:
            fit_kw[key] = v
    q = r.get("sysid", "q", _auto_int, 2)
    if q is not None and q < 1:
        raise ConfigError(f"{r.where('sysid', 'q')}: q must be at least 1")
    q_max = r.get("sysid", "q_max", _int, 4)
    noise_mode = r.get("sysid", "noise_mode", str, "sum")
    if noise_mode not in ("sum", "per-lag"):
        raise ConfigError(f"{r.where('sysid', 'noise_mode')}: noise_mode must be 'sum' or 'per-lag'")
    try:
        sysid = SysidSettings(q, q_max, noise_mode, SysidConfig(**fit_kw))
    except ValueError as exc:
        raise ConfigError(f"{r.where('sysid')}: {exc}") from None

    nd = NoiseConfig()
    noise_kw = {}
    for f in fields(NoiseConfig):
        if f.name.endswith("_grid"):
            conv = lambda s: tuple(float(v) for v in parse_vector(s))
        elif f.name == "retune_observer":
            conv = _bool
        else:
            conv = _number
        noise_kw[f.name] = r.get("noise", f.name, conv, getattr(nd, f.name))
        v = noise_kw[f.name]
        bad = (any(x < 0 for x in v) if isinstance(v, tuple)
               else (not isinstance(v, bool) and v < 0))
        if bad:
            raise ConfigError(f"{r.where('noise', f.name)}: noise levels must be non-negative")
    noise = NoiseConfig(**noise_kw)

    ed = EvalConfig()
    evaluate = EvalConfig(
        episodes=r.get("evaluate", "episodes", _int, ed.episodes),
        seed=r.get("evaluate", "seed", _int, ed.seed),
        success_output=r.get("evaluate", "success_output", _int, ed.success_output),
        success_tolerance=r.get("evaluate", "success_tolerance", _number, ed.success_tolerance),
        penalty_factor=r.get("evaluate", "penalty_factor", _number, ed.penalty_factor),
    )
    if evaluate.episodes < 1:
        raise ConfigError(f"{r.where('evaluate', 'episodes')}: need at least one episode")
    if not 0 <= evaluate.success_output < n_z:
        raise ConfigError(f"{r.where('evaluate', 'success_output')}: output index out of range")

    return ExperimentConfig(
        system=system,
        cost=cost,
        solver=solver,
        sysid=sysid,
        noise=noise,
        evaluate=evaluate,
        seed=r.get("run", "seed", _int, 0),
        output_dir=r.get("run", "output_dir", str, "out"),
        source=source,
    )


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
