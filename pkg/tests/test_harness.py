import csv
import subprocess
import sys as _sys

import numpy as np
import pytest

from pod2c import cli, harness
from pod2c.artifacts import load_policy, load_trajectory
from pod2c.config import OUTPUT_ENV, load_config

from conftest import CONFIGS

DI = str(CONFIGS / "double_integrator.ini")
FAST = ["--set", "evaluate.episodes=40"]


@pytest.fixture(scope="module")
def di_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("di")
    for cmd in ("train", "synthesize", "evaluate"):
        extra = ["--plots"] if cmd == "evaluate" else []
        assert cli.main([cmd, DI, "--output-dir", str(out), *FAST, *extra]) == 0
    return out


def test_artifacts_written(di_run):
    for name in (harness.TRAJECTORY_FILE, harness.CONVERGENCE_FILE, harness.POLICY_FILE,
                 harness.SUMMARY_FILE, harness.EPISODES_FILE, "eval_measurement.svg",
                 "eval_process.svg"):
        assert (di_run / name).stat().st_size > 0
    pol = load_policy(di_run / harness.POLICY_FILE)
    traj = load_trajectory(di_run / harness.TRAJECTORY_FILE)
    assert pol.d == 3 and np.array_equal(pol.controls, traj.controls)
    assert abs(traj.outputs[-1, 0] - 1.0) < 0.01


def test_summary_recomputed_from_episodes(di_run):
    rows = harness.read_episodes_csv(di_run / harness.EPISODES_FILE)
    with (di_run / harness.SUMMARY_FILE).open() as fh:
        summary = list(csv.DictReader(fh))
    cfg = load_config(DI)
    assert len(summary) == len(cfg.noise.measurement_grid) + len(cfg.noise.process_grid)
    for s in summary:
        key = (s["sweep"], float(s["process_std"]), float(s["measurement_std"]))
        group = [r for r in rows if (r.sweep, r.process_std, r.measurement_std) == key]
        assert len(group) == int(s["episodes"]) == 40
        for tag in ("open", "closed"):
            c = np.array([getattr(r, f"{tag}_cost") for r in group])
            ok = np.array([getattr(r, f"{tag}_success") for r in group])
            assert float(s[f"{tag}_mean"]) == pytest.approx(c.mean(), rel=1e-12)
            assert float(s[f"{tag}_var"]) == pytest.approx(c.var(), rel=1e-12)
            assert float(s[f"{tag}_success"]) == pytest.approx(ok.mean(), abs=1e-12)


def test_noise_free_evaluation_reproduces_nominal(tmp_path):
    args = ["--output-dir", str(tmp_path), "--set", "evaluate.episodes=5",
            "--set", "noise.fixed_process=0", "--set", "noise.process_grid=0 0.1"]
    for cmd in ("train", "synthesize", "evaluate"):
        assert cli.main([cmd, DI, *args]) == 0
    nominal = load_trajectory(tmp_path / harness.TRAJECTORY_FILE).cost
    rows = harness.read_episodes_csv(tmp_path / harness.EPISODES_FILE)
    zero = [r for r in rows if r.process_std == 0 and r.measurement_std == 0]
    assert zero and all(r.open_cost == r.closed_cost == nominal for r in zero)
    with (tmp_path / harness.SUMMARY_FILE).open() as fh:
        lv = next(s for s in csv.DictReader(fh)
                  if float(s["process_std"]) == 0 and float(s["measurement_std"]) == 0)
    assert float(lv["open_var"]) == 0 and float(lv["closed_var"]) == 0


def test_pipeline_is_deterministic(di_run, tmp_path):
    for cmd in ("train", "synthesize", "evaluate"):
        assert cli.main([cmd, DI, "--output-dir", str(tmp_path), *FAST]) == 0
    for name in (harness.SUMMARY_FILE, harness.EPISODES_FILE, harness.CONVERGENCE_FILE,
                 harness.POLICY_FILE):
        assert (tmp_path / name).read_bytes() == (di_run / name).read_bytes()


def test_svg_only_on_request(tmp_path, di_run):
    import shutil
    for name in (harness.TRAJECTORY_FILE, harness.POLICY_FILE):
        shutil.copy(di_run / name, tmp_path / name)
    assert cli.main(["evaluate", DI, "--output-dir", str(tmp_path), *FAST]) == 0
    assert not list(tmp_path.glob("*.svg"))


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = load_config(DI)
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert harness.output_dir(cfg) == tmp_path / "env"
    assert harness.output_dir(cfg, str(tmp_path / "flag")) == tmp_path / "flag"
    assert (tmp_path / "flag").is_dir()
    monkeypatch.delenv(OUTPUT_ENV)
    assert str(harness.output_dir(cfg)).endswith("out/double_integrator")


def test_sysid_check_recommends_order(tmp_path, capsys):
    assert cli.main(["sysid-check", DI, "--output-dir", str(tmp_path)]) == 0
    assert "recommended q = 2" in capsys.readouterr().out
    rows = list(csv.DictReader((tmp_path / harness.SYSID_FILE).open()))
    assert [int(r["q"]) for r in rows] == [1, 2, 3, 4]
    assert [r["sufficient"] for r in rows] == ["0", "1", "1", "1"]
    assert float(rows[0]["ratio_to_next"]) > 10 and float(rows[1]["ratio_to_next"]) < 1.05


def test_slope_is_flat_under_common_random_numbers(di_run):
    cfg = load_config(DI, FAST[1:])
    sys = harness.build_system(cfg)
    report = harness.evaluate_policy(cfg, sys, load_policy(di_run / harness.POLICY_FILE))
    slope, lo, hi = harness.open_loop_slope(report, "measurement")
    assert lo <= 0 <= hi and slope == pytest.approx(0, abs=1e-9)


# -- exit codes --------------------------------------------------------------------

def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate", DI])
    assert info.value.code == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[system]\nname = cartpole\nhorizon thirty\n")
    assert cli.main(["train", str(bad)]) == 1
    assert "bad.ini:3:" in capsys.readouterr().err
    assert cli.main(["evaluate", DI, "--output-dir", str(tmp_path / "empty")]) == 1
    assert cli.main(["train", DI, "--set", "solver.alpha=7", "--output-dir", str(tmp_path)]) == 1


def test_corrupt_artifact_exits_one(tmp_path, di_run, capsys):
    text = (di_run / harness.TRAJECTORY_FILE).read_text().splitlines(keepends=True)
    text[-1] = text[-1].replace("e", "E", 1) if "e" in text[-1] else "9" + text[-1]
    (tmp_path / harness.TRAJECTORY_FILE).write_text("".join(text))
    assert cli.main(["synthesize", DI, "--output-dir", str(tmp_path)]) == 1
    assert "checksum mismatch" in capsys.readouterr().err


def test_horizon_mismatch_exits_one(tmp_path, di_run):
    rc = cli.main(["evaluate", DI, "--policy", str(di_run / harness.POLICY_FILE),
                   "--output-dir", str(tmp_path), "--set", "system.horizon=10"])
    assert rc == 1


def test_numerical_failure_exits_two(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("covariance lost symmetry")
    monkeypatch.setattr(harness, "run_train", boom)
    assert cli.main(["train", DI, "--output-dir", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([_sys.executable, "-m", "pod2c", "train", DI, "--output-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "terminal output" in proc.stdout
