"""Scenario-level comparisons between modes on shortened canyon and facade runs."""

from pathlib import Path

import numpy as np
import pytest

from src.alignment import PHASE_GPS, PHASE_REGISTRATION
from src.estimator.engine import Estimator
from src.evaluation import evaluate
from src.geometry import yaw_of
from src.models import AlignmentMode, Mode
from src.pipeline import eval_alignment_mode, load_config, simulate, with_updates

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = [0, 1]

pytestmark = pytest.mark.slow


def scenario_runs(name, seed, updates, variants):
    config = with_updates(load_config(CONFIGS / name, seed=seed), **updates)
    scenario, _, _ = simulate(config)
    runs = {}
    for label, (mode, adaptive) in variants.items():
        cfg = with_updates(config, **{"estimator.registration.adaptive_weighting": adaptive, "estimator.deterministic": True})
        output = Estimator(cfg, mode).run(scenario.sensor_data())
        metrics = evaluate(scenario.ground_truth, output.trajectory, eval_alignment_mode(output))
        runs[label] = (output, metrics)
    return scenario, runs


@pytest.fixture(scope="module")
def canyon():
    # два витка вместо трёх
    variants = {"vio-gps": (Mode.vio_gps, True), "vio-twin": (Mode.vio_twin, True)}
    return [scenario_runs("canyon.yaml", seed, {"trajectory.loops": 2}, variants) for seed in SEEDS]


@pytest.fixture(scope="module")
def facade():
    variants = {"vio-twin": (Mode.vio_twin, True), "vio-twin-isotropic": (Mode.vio_twin, False)}
    return [scenario_runs("single_facade.yaml", seed, {}, variants) for seed in SEEDS]


def mean_metric(cells, label, field):
    return float(np.mean([getattr(runs[label][1], field) for _, runs in cells]))


def test_gps_mode_finishes_the_canyon_in_world_frame(canyon):
    for _, runs in canyon:
        output, metrics = runs["vio-gps"]
        assert output.trajectory.frame == "W"
        assert metrics.alignment_mode is AlignmentMode.none
        assert np.isfinite(metrics.ate_p_m)
        assert np.isfinite(metrics.ate_r_deg)


def test_twin_beats_gps_in_the_canyon(canyon):
    for _, runs in canyon:
        output, _ = runs["vio-twin"]
        assert output.trajectory.frame == "W"
        assert output.registrations_converged > 0
    assert mean_metric(canyon, "vio-twin", "ate_p_m") <= 0.75 * mean_metric(canyon, "vio-gps", "ate_p_m")
    assert mean_metric(canyon, "vio-twin", "ate_r_deg") <= 0.8 * mean_metric(canyon, "vio-gps", "ate_r_deg")


def heading_errors(scenario, output):
    true_yaw = yaw_of(scenario.ground_truth.poses[0].rotation)

    def error(est):
        return abs(float(np.angle(np.exp(1j * (est.yaw - true_yaw)))))

    registered = [e for e in output.alignment if e.source == PHASE_REGISTRATION]
    first = registered[0]
    gps = [e for e in output.alignment if e.source == PHASE_GPS and e.t is not None and e.t <= first.t]
    return error(gps[-1]), error(output.alignment[-1])


def test_registration_phase_sharpens_the_heading(canyon):
    before, after = zip(*(heading_errors(scenario, runs["vio-twin"][0]) for scenario, runs in canyon))
    assert np.mean(after) * 3.0 <= np.mean(before)


def test_facade_runs_register_against_the_wall(facade):
    for _, runs in facade:
        output, metrics = runs["vio-twin"]
        assert len(output.registrations) > 0
        assert output.registrations_converged > 0
        assert np.isfinite(metrics.ate_p_m)


def test_isotropic_weighting_degrades_the_facade_run(facade):
    adaptive = mean_metric(facade, "vio-twin", "ate_p_m")
    isotropic = mean_metric(facade, "vio-twin-isotropic", "ate_p_m")
    assert isotropic >= 1.2 * adaptive
