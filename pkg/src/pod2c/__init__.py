"""Partially observed data-based control: ARMA identification, information-state
iLQR and LQG feedback for blackbox systems with output-only measurements."""

from .dynamics import (BlackboxSystem, LinearSystemSpec, NoiseSpec, Trajectory, linearize,
                       make_builtin, rollout)
from .infostate import InfoStateLTV, assemble
from .lqg import Policy, feedback_gains, observer_gains, run_closed_loop, run_lqr_only, synthesize
from .pomilqr import CostModel, SolverConfig, optimize
from .sysid import ArmaModel, SysidConfig, arma_exact, check_order, fit_arma, identify, select_order

__version__ = "0.1.0"
