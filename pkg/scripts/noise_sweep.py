"""Sweep process and measurement noise over wider grids than a config ships with
and report where closed-loop feedback stops beating the open-loop nominal.

    python scripts/noise_sweep.py configs/cartpole.ini --process 0.05 0.1 0.2 0.3 0.4 0.5
"""
import argparse
import dataclasses

import numpy as np

from pod2c import harness
from pod2c.config import load_config
from pod2c.pomilqr import initial_trajectory, optimize
from pod2c.lqg import synthesize
from pod2c.dynamics import NoiseSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--process", type=float, nargs="*", help="process grid (default: config)")
    ap.add_argument("--measurement", type=float, nargs="*", help="measurement grid (default: config)")
    ap.add_argument("--episodes", type=int)
    ap.add_argument("--no-retune", action="store_true", help="keep the design-point observer")
    args = ap.parse_args()

    cfg = load_config(args.config)
    noise = cfg.noise
    if args.process is not None:
        noise = dataclasses.replace(noise, process_grid=tuple(args.process))
    if args.measurement is not None:
        noise = dataclasses.replace(noise, measurement_grid=tuple(args.measurement))
    if args.no_retune:
        noise = dataclasses.replace(noise, retune_observer=False)
    ev = cfg.evaluate
    if args.episodes:
        ev = dataclasses.replace(ev, episodes=args.episodes)
    cfg = dataclasses.replace(cfg, noise=noise, evaluate=ev)

    sys = harness.build_system(cfg)
    q = harness.resolve_order(cfg, sys)
    res = optimize(sys, initial_trajectory(sys, cfg.cost, cfg.system.horizon), cfg.cost, q,
                   cfg.solver, cfg.sysid.fit, seed=cfg.seed, noise_mode=cfg.sysid.noise_mode)
    nom = res.trajectory
    design = NoiseSpec(noise.design_process, noise.design_measurement, ev.seed).with_reference(
        nom.controls, nom.outputs)
    pol = synthesize(sys, nom, cfg.cost, q, design, cfg.sysid.fit, cfg.seed, cfg.sysid.noise_mode)
    report = harness.evaluate_policy(cfg, sys, pol)

    for sweep in ("measurement", "process"):
        levels = report.sweep(sweep)
        if not levels:
            continue
        print(f"\n{sweep} sweep")
        print(f"{'level':>8} {'OL mean':>10} {'CL mean':>10} {'OL var':>10} {'CL var':>10} "
              f"{'mean ok':>8} {'var ok':>7}")
        for lv in levels:
            x = lv.measurement_std if sweep == "measurement" else lv.process_std
            print(f"{x:8.3f} {lv.open_mean:10.4g} {lv.closed_mean:10.4g} {lv.open_var:10.4g} "
                  f"{lv.closed_var:10.4g} {str(lv.closed_mean < lv.open_mean):>8} "
                  f"{str(lv.closed_var < lv.open_var):>7}")
        failing = [lv for lv in levels if not lv.closed_mean < lv.open_mean]
        if failing:
            first = failing[0]
            x = first.measurement_std if sweep == "measurement" else first.process_std
            print(f"closed loop first loses on mean cost at {sweep} level {x}")
        else:
            print("closed loop wins on mean cost at every level")
    if len(report.sweep("measurement")) > 1:
        slope, lo, hi = harness.open_loop_slope(report, "measurement")
        print(f"\nopen-loop cost slope in measurement noise {slope:.3g}, 95% CI "
              f"[{lo:.3g}, {hi:.3g}]")


if __name__ == "__main__":
    main()
