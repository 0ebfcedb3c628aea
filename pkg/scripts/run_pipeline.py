"""Train, synthesize and evaluate one config end to end.

    python scripts/run_pipeline.py configs/cartpole.ini --plots
"""
import argparse
import time
from pathlib import Path

from pod2c import harness
from pod2c.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--output-dir")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--plots", action="store_true")
    args = ap.parse_args()

    cfg = load_config(args.config, args.overrides)
    out = harness.output_dir(cfg, args.output_dir)

    t0 = time.perf_counter()
    res = harness.run_train(cfg, out)
    print(f"train: {res.reason}, {res.iterations} iterations, cost {res.trajectory.cost:.6g}, "
          f"terminal output {res.trajectory.outputs[-1]} ({time.perf_counter() - t0:.1f}s)")

    t0 = time.perf_counter()
    pol = harness.run_synthesize(cfg, out)
    print(f"synthesize: q={pol.q} d={pol.d}, max |K| {abs(pol.K).max():.3g} "
          f"({time.perf_counter() - t0:.1f}s)")

    t0 = time.perf_counter()
    report = harness.run_evaluate(cfg, out, plots=args.plots)
    print(f"evaluate: {len(report.levels)} grid points x {cfg.evaluate.episodes} episodes "
          f"({time.perf_counter() - t0:.1f}s)")
    print(f"{'sweep':>12} {'process':>8} {'meas':>8} {'OL mean':>10} {'CL mean':>10} "
          f"{'OL var':>10} {'CL var':>10} {'CL succ':>8}")
    for lv in report.levels:
        print(f"{lv.sweep:>12} {lv.process_std:8.3f} {lv.measurement_std:8.3f} "
              f"{lv.open_mean:10.4g} {lv.closed_mean:10.4g} {lv.open_var:10.4g} "
              f"{lv.closed_var:10.4g} {lv.closed_success:8.2f}")
    print(f"artifacts in {Path(out).resolve()}")


if __name__ == "__main__":
    main()
