"""Residual against ARMA order for the shipped examples.

Prints the relative fit residual for q = 1..q_max+1 on the double integrator,
on the cart-pole linearised about its optimised nominal, and on the raw
cart-pole at several probing amplitudes.  On the raw system the residual has a
part that grows with the amplitude and is partly absorbed by extra lags, so
the q=2 plateau only shows at small amplitudes.

    python scripts/order_check.py
"""
import argparse
import warnings

import numpy as np

from pod2c import harness
from pod2c.config import load_config
from pod2c.dynamics import linearize, make_builtin
from pod2c.pomilqr import CostModel, initial_trajectory, optimize
from pod2c.sysid import select_order

ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]


def _row(label, sel):
    r = np.array(sel.residuals)
    ratios = " ".join(f"{a / b:9.3g}" for a, b in zip(r[:-1], r[1:]))
    print(f"{label:>28}  q={sel.q}  residuals {' '.join(f'{v:9.3g}' for v in r)}  ratios {ratios}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q-max", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    warnings.simplefilter("ignore")

    di = make_builtin("double-integrator", {"dt": 0.1})
    zero = CostModel(np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), np.zeros(1))
    nom = initial_trajectory(di, zero, 20, np.sin(np.arange(20.0))[:, None])
    _row("double integrator", select_order(di, nom, args.q_max, seed=args.seed))

    cfg = load_config(ROOT / "configs" / "cartpole.ini")
    cp = harness.build_system(cfg)
    res = optimize(cp, initial_trajectory(cp, cfg.cost, cfg.system.horizon), cfg.cost,
                   cfg.sysid.q, cfg.solver, cfg.sysid.fit, seed=cfg.seed)
    nom = res.trajectory
    lin = linearize(cp, nom)
    lin_nom = initial_trajectory(lin, CostModel(np.zeros((2, 2)), np.eye(1), np.zeros((2, 2)),
                                                np.zeros(2)), nom.horizon)
    _row("cart-pole, linearised", select_order(lin, lin_nom, args.q_max, seed=args.seed))
    u_max = float(np.max(np.abs(nom.controls)))
    for rel in (1e-2, 1e-4, 1e-6):
        sel = select_order(cp, nom, args.q_max, sigma=rel * u_max, seed=args.seed)
        _row(f"cart-pole, sigma={rel:g}*|u|", sel)


if __name__ == "__main__":
    main()
