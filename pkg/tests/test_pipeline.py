import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from src import storage
from src.cli import cli
from src.errors import ConfigError
from src.evaluation import TrajectoryRecord
from src.geometry import Pose
from src.models import Mode
from src.pipeline import bench_jobs, load_bench_config, load_config, with_updates

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
MINIMAL = CONFIGS / "minimal.yaml"


def write_yaml(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def test_shipped_configs_validate():
    for name in ("canyon.yaml", "single_facade.yaml", "minimal.yaml"):
        config = load_config(CONFIGS / name)
        assert config.estimator.registration.adaptive_weighting
    assert load_config(CONFIGS / "single_facade.yaml").trajectory.kind == "single_facade"
    bench = load_bench_config(CONFIGS / "bench.yaml")
    jobs = bench_jobs(bench, CONFIGS / "bench.yaml")
    assert len(jobs) == 10
    facade = [j for j in jobs if j.scenario == "single_facade"][0]
    assert facade.modes == ("vio-twin", "vio-twin-isotropic")


def test_config_errors_carry_every_field(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        load_config(write_yaml(tmp_path / "broken.yaml", "seed: [1, 2\n"))
    with pytest.raises(ConfigError):
        load_config(write_yaml(tmp_path / "list.yaml", "- 1\n- 2\n"))

    bad = write_yaml(tmp_path / "bad.yaml", "seed: -1\nimu_rate_hz: 20\ncamera:\n  rate_hz: 60\n")
    with pytest.raises(ConfigError) as exc:
        load_config(bad)
    locs = {e["loc"] for e in exc.value.context["errors"]}
    assert {"seed", "imu_rate_hz", "camera.rate_hz"} <= locs
    assert exc.value.to_dict()["error"] == "config_invalid"


def test_seed_override_and_dotted_updates():
    config = load_config(MINIMAL, seed=42)
    assert config.seed == 42
    assert config.mode is Mode.vio_twin
    updated = with_updates(config, **{"estimator.registration.adaptive_weighting": False})
    assert not updated.estimator.registration.adaptive_weighting
    assert config.estimator.registration.adaptive_weighting
    assert updated.config_hash() != config.config_hash()
    with pytest.raises(ConfigError):
        with_updates(config, **{"estimator.window_size": 1})


def test_config_hash_is_stable():
    assert load_config(MINIMAL).config_hash() == load_config(MINIMAL).config_hash()


def test_cli_reports_config_errors_as_json(tmp_path):
    result = CliRunner().invoke(cli, ["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "b")])
    assert result.exit_code == 2
    payload = json.loads(result.stdout)
    assert payload["error"] == "config_invalid"


def test_cli_evaluate(tmp_path):
    times = np.arange(30) * 0.1
    gt = TrajectoryRecord(times, [Pose.from_yaw(0.1 * t, (t, np.sin(t), 1.0)) for t in times])
    est = gt.transformed(Pose(np.eye(3), [0.0, 0.0, 0.5]))
    storage.write_trajectory(gt, tmp_path / "gt.csv")
    storage.write_trajectory(est, tmp_path / "est.csv")
    out = tmp_path / "metrics.json"
    result = CliRunner().invoke(
        cli, ["evaluate", "--gt", str(tmp_path / "gt.csv"), "--est", str(tmp_path / "est.csv"), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    metrics = json.loads(result.stdout)
    assert metrics["ate_p_m"] == pytest.approx(0.5)
    assert metrics["n_pairs"] == 30
    assert storage.read_json(out) == metrics

    far = TrajectoryRecord(times + 5.0, est.poses)
    storage.write_trajectory(far, tmp_path / "far.csv")
    result = CliRunner().invoke(cli, ["evaluate", "--gt", str(tmp_path / "gt.csv"), "--est", str(tmp_path / "far.csv")])
    assert result.exit_code == 2
    assert json.loads(result.stdout)["error"] == "empty_pairing"


def test_cli_rejects_unknown_enum_values_as_json(tmp_path):
    times = np.arange(10) * 0.1
    gt = TrajectoryRecord(times, [Pose.from_yaw(0.0, (t, 0.0, 1.0)) for t in times])
    storage.write_trajectory(gt, tmp_path / "gt.csv")
    result = CliRunner().invoke(
        cli, ["evaluate", "--gt", str(tmp_path / "gt.csv"), "--est", str(tmp_path / "gt.csv"), "--alignment", "bogus"]
    )
    assert result.exit_code == 2
    payload = json.loads(result.stdout)
    assert payload["error"] == "config_invalid"
    assert payload["choices"] == ["none", "yaw4dof", "se3"]

    # режим проверяется до чтения бандла
    result = CliRunner().invoke(cli, ["run", "--bundle", str(tmp_path), "--mode", "fly"])
    assert result.exit_code == 2
    payload = json.loads(result.stdout)
    assert payload["error"] == "config_invalid"
    assert "--mode" in payload["detail"]
    assert payload["choices"] == ["vio-only", "vio-gps", "vio-twin"]


@pytest.mark.slow
def test_simulate_run_evaluate_end_to_end(tmp_path):
    runner = CliRunner()
    bundle = tmp_path / "bundle"
    result = runner.invoke(cli, ["simulate", "--config", str(MINIMAL), "--out", str(bundle), "--seed", "3"])
    assert result.exit_code == 0, result.output
    manifest = storage.read_manifest(bundle)
    assert manifest["seed"] == 3
    for name in storage.BUNDLE_FILES:
        assert (bundle / name).exists()

    again = tmp_path / "again"
    runner.invoke(cli, ["simulate", "--config", str(MINIMAL), "--out", str(again), "--seed", "3"])
    for name in storage.BUNDLE_FILES:
        assert storage.file_sha256(bundle / name) == storage.file_sha256(again / name)

    outputs = {}
    for mode in ("vio-only", "vio-twin"):
        for attempt in ("a", "b"):
            out = tmp_path / f"{mode}-{attempt}"
            result = runner.invoke(cli, ["run", "--bundle", str(bundle), "--mode", mode, "--out", str(out), "--deterministic"])
            assert result.exit_code == 0, result.output
            outputs[mode, attempt] = json.loads(result.stdout)
        a, b = tmp_path / f"{mode}-a", tmp_path / f"{mode}-b"
        assert (a / storage.ESTIMATE_FILE).read_bytes() == (b / storage.ESTIMATE_FILE).read_bytes()

    assert outputs["vio-only", "a"]["frame"] == "L"
    assert outputs["vio-only", "a"]["metrics"]["alignment_mode"] == "yaw4dof"
    assert outputs["vio-twin", "a"]["frame"] == "W"
    assert outputs["vio-twin", "a"]["registrations_attempted"] > 0

    registrations = pd.read_csv(tmp_path / "vio-twin-a" / storage.REGISTRATION_LOG_FILE)
    assert {"t", "converged", "gamma", "w_eig_0", "w_eig_5"} <= set(registrations.columns)

    result = runner.invoke(
        cli,
        [
            "evaluate",
            "--gt",
            str(bundle / storage.GROUND_TRUTH_FILE),
            "--est",
            str(tmp_path / "vio-twin-a" / storage.ESTIMATE_FILE),
        ],
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["ate_p_m"] == pytest.approx(outputs["vio-twin", "a"]["metrics"]["ate_p_m"])


@pytest.mark.slow
def test_bench_writes_metrics_table_and_database(tmp_path):
    bench = write_yaml(
        tmp_path / "bench.yaml",
        f"name: tiny\nseeds: [0]\ncells:\n  - scenario: minimal\n    config: {MINIMAL}\n    modes: [vio-gps]\n",
    )
    db_path = tmp_path / "runs.sqlite3"
    result = CliRunner().invoke(
        cli, ["bench", "--config", str(bench), "--out", str(tmp_path / "out"), "--db", f"sqlite+aiosqlite:///{db_path}"]
    )
    assert result.exit_code == 0, result.output
    summary = json.loads(result.stdout)
    assert summary["runs"] == 1
    metrics = storage.read_json(tmp_path / "out" / "bench_metrics.json")
    assert metrics["runs"][0]["mode"] == "vio-gps"
    assert "runtime_s" not in metrics["runs"][0]
    table = pd.read_csv(tmp_path / "out" / "comparison.csv")
    assert table.loc[0, "runs"] == 1
    assert db_path.exists()

    result = CliRunner().invoke(cli, ["bench", "--config", str(bench), "--out", str(tmp_path / "again")])
    assert result.exit_code == 0, result.output
    first = (tmp_path / "out" / "bench_metrics.json").read_bytes()
    assert (tmp_path / "again" / "bench_metrics.json").read_bytes() == first
