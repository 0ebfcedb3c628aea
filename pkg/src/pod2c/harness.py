"""Pipeline stages behind the command line: train, synthesize, evaluate and
order checks, plus the CSV/SVG reporting they emit.

CSV layouts (floats written with ``repr``):

``convergence.csv``
    iteration, cost, alpha, mu, arma_residual
``eval_summary.csv``
    sweep, process_std, measurement_std, episodes, open_mean, open_var,
    closed_mean, closed_var, open_success, closed_success
``eval_episodes.csv``
    sweep, process_std, measurement_std, episode, open_cost, closed_cost,
    open_success, closed_success, open_diverged, closed_diverged
``sysid_check.csv``
    q, residual, ratio_to_next, rank, n_x, sufficient

Variances are population variances (``ddof = 0``) of the per-episode rows.
"""
from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .artifacts import load_policy, load_trajectory, save_policy, save_trajectory
from .config import OUTPUT_ENV, ExperimentConfig
from .dynamics import BlackboxSystem, NoiseSpec, Trajectory, make_builtin
from .lqg import Policy, retune_observer, run_episodes, synthesize
from .pomilqr import OptimizeResult, initial_trajectory, optimize, write_convergence_csv
from .sysid import SelectionResult, check_order, select_order

log = logging.getLogger(__name__)

__all__ = [
    "LevelStats",
    "EvalReport",
    "build_system",
    "output_dir",
    "resolve_order",
    "run_train",
    "run_synthesize",
    "run_evaluate",
    "run_sysid_check",
    "open_loop_slope",
    "write_summary_csv",
    "write_episodes_csv",
    "read_episodes_csv",
]

TRAJECTORY_FILE = "trajectory.txt"
CONVERGENCE_FILE = "convergence.csv"
POLICY_FILE = "policy.txt"
SUMMARY_FILE = "eval_summary.csv"
EPISODES_FILE = "eval_episodes.csv"
SYSID_FILE = "sysid_check.csv"


def build_system(cfg: ExperimentConfig) -> BlackboxSystem:
    return make_builtin(cfg.system.name, cfg.system.params)


def output_dir(cfg: ExperimentConfig, override: Optional[str] = None) -> Path:
    """Command-line flag, then the environment variable, then the config value."""
    path = Path(override or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _initial(cfg, sys):
    return initial_trajectory(sys, cfg.cost, cfg.system.horizon)


def resolve_order(cfg: ExperimentConfig, sys: BlackboxSystem) -> int:
    """Configured ``q``, or the empirical choice around the initial rollout."""
    if cfg.sysid.q is not None:
        return cfg.sysid.q
    sel = select_order(sys, _initial(cfg, sys), cfg.sysid.q_max, seed=cfg.seed)
    log.info("selected q=%d (residuals %s)", sel.q, sel.residuals)
    return sel.q


# --------------------------------------------------------------------------- #
# stages
# --------------------------------------------------------------------------- #

def run_train(cfg: ExperimentConfig, out: Path) -> OptimizeResult:
    sys = build_system(cfg)
    q = resolve_order(cfg, sys)
    res = optimize(sys, _initial(cfg, sys), cfg.cost, q, cfg.solver, cfg.sysid.fit,
                   seed=cfg.seed, noise_mode=cfg.sysid.noise_mode)
    save_trajectory(res.trajectory, out / TRAJECTORY_FILE)
    write_convergence_csv(res, out / CONVERGENCE_FILE)
    return res


def run_synthesize(cfg: ExperimentConfig, out: Path, trajectory_path=None) -> Policy:
    sys = build_system(cfg)
    nominal = load_trajectory(trajectory_path or out / TRAJECTORY_FILE)
    if nominal.controls.shape != (cfg.system.horizon, sys.n_u):
        raise ValueError("trajectory does not match the configured horizon or system")
    q = resolve_order(cfg, sys)
    noise = NoiseSpec(cfg.noise.design_process, cfg.noise.design_measurement,
                      cfg.evaluate.seed).with_reference(nominal.controls, nominal.outputs)
    policy = synthesize(sys, nominal, cfg.cost, q, noise, cfg.sysid.fit,
                        seed=cfg.seed, noise_mode=cfg.sysid.noise_mode)
    save_policy(policy, out / POLICY_FILE)
    return policy


@dataclass(frozen=True)
class LevelStats:
    sweep: str
    process_std: float
    measurement_std: float
    episodes: int
    open_mean: float
    open_var: float
    closed_mean: float
    closed_var: float
    open_success: float
    closed_success: float


@dataclass(frozen=True)
class EpisodeRow:
    sweep: str
    process_std: float
    measurement_std: float
    episode: int
    open_cost: float
    closed_cost: float
    open_success: bool
    closed_success: bool
    open_diverged: bool
    closed_diverged: bool


@dataclass
class EvalReport:
    levels: list
    episodes: list

    def sweep(self, name: str) -> list:
        return [lv for lv in self.levels if lv.sweep == name]


def grid_points(cfg: ExperimentConfig) -> list:
    """``(sweep, process, measurement)`` triples in evaluation order."""
    pts = [("measurement", cfg.noise.fixed_process, m) for m in cfg.noise.measurement_grid]
    pts += [("process", p, cfg.noise.fixed_measurement) for p in cfg.noise.process_grid]
    return pts


def _success(batch, cfg: ExperimentConfig) -> np.ndarray:
    k = cfg.evaluate.success_output
    err = np.abs(batch.outputs[:, -1, k] - cfg.cost.goal[k])
    return (~batch.diverged) & (err <= cfg.evaluate.success_tolerance)


def evaluate_policy(cfg: ExperimentConfig, sys: BlackboxSystem, policy: Policy) -> EvalReport:
    pts = grid_points(cfg)
    if not pts:
        raise ValueError("evaluation grid is empty")
    M = cfg.evaluate.episodes
    penalty = cfg.evaluate.penalty_factor * policy.nominal_cost
    episodes = range(M)
    levels, rows = [], []
    for sweep, p_std, m_std in pts:
        noise = NoiseSpec(p_std, m_std, cfg.evaluate.seed).with_reference(
            policy.controls, policy.outputs)
        pol = retune_observer(policy, noise) if cfg.noise.retune_observer else policy
        ol = run_episodes(sys, pol, noise, cfg.cost, episodes, "open", penalty)
        cl = run_episodes(sys, pol, noise, cfg.cost, episodes, "lqg", penalty)
        s_ol, s_cl = _success(ol, cfg), _success(cl, cfg)
        levels.append(LevelStats(sweep, p_std, m_std, M,
                                 float(np.mean(ol.costs)), float(np.var(ol.costs)),
                                 float(np.mean(cl.costs)), float(np.var(cl.costs)),
                                 float(np.mean(s_ol)), float(np.mean(s_cl))))
        for i in range(M):
            rows.append(EpisodeRow(sweep, p_std, m_std, i, float(ol.costs[i]), float(cl.costs[i]),
                                   bool(s_ol[i]), bool(s_cl[i]),
                                   bool(ol.diverged[i]), bool(cl.diverged[i])))
    return EvalReport(levels, rows)


def run_evaluate(cfg: ExperimentConfig, out: Path, policy_path=None,
                 plots: bool = False) -> EvalReport:
    sys = build_system(cfg)
    policy = load_policy(policy_path or out / POLICY_FILE)
    if policy.T != cfg.system.horizon:
        raise ValueError(f"policy horizon {policy.T} does not match configured horizon "
                         f"{cfg.system.horizon}")
    report = evaluate_policy(cfg, sys, policy)
    write_summary_csv(report, out / SUMMARY_FILE)
    write_episodes_csv(report, out / EPISODES_FILE)
    if plots:
        for sweep in ("measurement", "process"):
            if report.sweep(sweep):
                plot_sweep(report, sweep, out / f"eval_{sweep}.svg")
    return report


def run_sysid_check(cfg: ExperimentConfig, out: Path) -> tuple[SelectionResult, list]:
    """Residual-vs-order table; analytic ranks are added for linear systems."""
    sys = build_system(cfg)
    nominal = _initial(cfg, sys)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sel = select_order(sys, nominal, cfg.sysid.q_max, seed=cfg.seed)
    rows = []
    for i, q in enumerate(sel.orders):
        ratio = sel.residuals[i] / sel.residuals[i + 1] if i + 1 < len(sel.orders) else float("nan")
        rank = n_x = sufficient = ""
        if sys.linear is not None:
            rep = check_order(sys.linear, q)
            rank, n_x, sufficient = rep.rank, rep.n_x, int(rep.sufficient)
        rows.append((q, sel.residuals[i], ratio, rank, n_x, sufficient))
    with (out / SYSID_FILE).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["q", "residual", "ratio_to_next", "rank", "n_x", "sufficient"])
        for q, res, ratio, rank, n_x, suff in rows:
            w.writerow([q, repr(res), repr(ratio), rank, n_x, suff])
    return sel, rows


# --------------------------------------------------------------------------- #
# reporting
# --------------------------------------------------------------------------- #

SUMMARY_FIELDS = ["sweep", "process_std", "measurement_std", "episodes", "open_mean", "open_var",
                  "closed_mean", "closed_var", "open_success", "closed_success"]
EPISODE_FIELDS = ["sweep", "process_std", "measurement_std", "episode", "open_cost", "closed_cost",
                  "open_success", "closed_success", "open_diverged", "closed_diverged"]


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_summary_csv(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for lv in report.levels:
            w.writerow([_fmt(getattr(lv, f)) for f in SUMMARY_FIELDS])


def write_episodes_csv(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_FIELDS)
        for row in report.episodes:
            w.writerow([_fmt(getattr(row, f)) for f in EPISODE_FIELDS])


def read_episodes_csv(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(EpisodeRow(
                rec["sweep"], float(rec["process_std"]), float(rec["measurement_std"]),
                int(rec["episode"]), float(rec["open_cost"]), float(rec["closed_cost"]),
                rec["open_success"] == "1", rec["closed_success"] == "1",
                rec["open_diverged"] == "1", rec["closed_diverged"] == "1"))
    return out


def open_loop_slope(report: EvalReport, sweep: str = "measurement",
                    confidence: float = 0.95) -> tuple[float, float, float]:
    """Least-squares slope of open-loop cost against the swept level, pooled over
    episodes, with a two-sided confidence interval ``(slope, lo, hi)``."""
    from scipy import stats

    rows = [r for r in report.episodes if r.sweep == sweep]
    x = np.array([r.measurement_std if sweep == "measurement" else r.process_std for r in rows])
    y = np.array([r.open_cost for r in rows])
    if np.ptp(x) == 0:
        raise ValueError("sweep has a single level; slope undefined")
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = stats.linregress(x, y)
    half = stats.t.ppf(0.5 + confidence / 2, len(x) - 2) * fit.stderr
    return float(fit.slope), float(fit.slope - half), float(fit.slope + half)


def plot_sweep(report: EvalReport, sweep: str, path) -> None:
    """Mean cost with a one-standard-deviation band for both policies."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lv = report.sweep(sweep)
    x = np.array([100 * (v.measurement_std if sweep == "measurement" else v.process_std) for v in lv])
    fixed = lv[0].process_std if sweep == "measurement" else lv[0].measurement_std
    other = "process" if sweep == "measurement" else "measurement"
    with plt.rc_context({"svg.hashsalt": "pod2c"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, mean, var in (("open loop", "open_mean", "open_var"),
                                 ("closed loop", "closed_mean", "closed_var")):
            m = np.array([getattr(v, mean) for v in lv])
            s = np.sqrt(np.array([getattr(v, var) for v in lv]))
            ax.plot(x, m, marker="o", label=label)
            ax.fill_between(x, m - s, m + s, alpha=0.2)
        ax.set_xlabel(f"{sweep} noise (% of max nominal)")
        ax.set_ylabel("episodic cost")
        ax.set_title(f"{other} noise fixed at {100 * fixed:g}%")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
