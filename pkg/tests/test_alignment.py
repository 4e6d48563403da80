import numpy as np
import pytest

from src.alignment import (
    PHASE_GPS,
    PHASE_REGISTRATION,
    AlignmentEstimate,
    FrameAligner,
    alignment_cost,
    heading_covariance,
    run_alignment,
    umeyama_yaw,
)
from src.errors import DegenerateGeometryError, SingularSystemError
from src.geometry import rot_z
from src.models import AlignmentConfig

YAW = 0.5
OFFSET = np.array([30.0, -12.0, 2.0])


def circle(n, radius=20.0, turns=1.0):
    theta = np.linspace(0.0, 2 * np.pi * turns, n, endpoint=False)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), 0.1 * theta])


def to_world(local, yaw=YAW, offset=OFFSET):
    return local @ rot_z(yaw).T + offset


def test_noiseless_yaw_alignment_is_exact(rng):
    local = rng.uniform(-30.0, 30.0, size=(15, 3))
    est = umeyama_yaw(to_world(local, -2.9), local)
    assert est.yaw == pytest.approx(-2.9, abs=1e-9)
    assert np.allclose(est.p_WL, OFFSET, atol=1e-9)
    assert alignment_cost(to_world(local, -2.9), local, est.yaw, est.p_WL) < 1e-18
    assert heading_covariance(to_world(local, -2.9), local, est) == pytest.approx(0.0, abs=1e-20)


def test_alignment_needs_horizontal_spread():
    local = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.1, 0.0, 9.0]])
    with pytest.raises(DegenerateGeometryError):
        umeyama_yaw(to_world(local), local)
    with pytest.raises(DegenerateGeometryError):
        umeyama_yaw(OFFSET[None], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        umeyama_yaw(np.zeros((3, 3)), np.zeros((2, 3)))


def test_heading_variance_follows_noise_and_spread(rng):
    local = circle(200)
    sigma = 0.5
    world = to_world(local) + rng.normal(scale=sigma, size=local.shape)
    est = umeyama_yaw(world, local)
    variance = heading_covariance(world, local, est)
    # σ² / Σ r² для центрированных горизонтальных координат
    centered = local[:, :2] - local[:, :2].mean(axis=0)
    expected = sigma**2 / np.sum(centered**2)
    assert variance == pytest.approx(expected, rel=0.3)
    with pytest.raises(SingularSystemError):
        heading_covariance(world[:1], local[:1], est)


def feed_gps(aligner, local, sigma, rng, t0=0.0):
    world = to_world(local) + rng.normal(scale=sigma, size=local.shape)
    for k, (g, l) in enumerate(zip(world, local)):
        aligner.add_gps(t0 + k, g, l)


def feed_registrations(aligner, local, sigma, rng, t0=100.0):
    world = to_world(local) + rng.normal(scale=sigma, size=local.shape)
    for k, (g, l) in enumerate(zip(world, local)):
        aligner.add_registration(t0 + k, g, l)


def test_registrations_take_over_and_freeze_the_estimate(rng):
    aligner = FrameAligner(AlignmentConfig(min_pairs=20))
    feed_gps(aligner, circle(20), 3.0, rng)
    assert aligner.phase == PHASE_GPS
    assert aligner.estimate is not None
    assert not aligner.converged

    local = circle(20, turns=0.9)
    feed_registrations(aligner, local[:19], 0.05, rng)
    # до min_pairs регистраций решение по-прежнему по GPS
    assert aligner.estimate.source == PHASE_GPS
    feed_registrations(aligner, local[19:], 0.05, rng, t0=119.0)
    assert aligner.phase == PHASE_REGISTRATION
    assert aligner.converged
    assert aligner.estimate.source == PHASE_REGISTRATION
    assert aligner.estimate.yaw == pytest.approx(YAW, abs=np.radians(0.2))

    frozen, n_history = aligner.estimate, len(aligner.history)
    assert aligner.add_gps(500.0, OFFSET + 100.0, np.zeros(3)) is frozen
    assert aligner.add_registration(501.0, OFFSET, np.zeros(3)) is frozen
    assert len(aligner.history) == n_history


def test_require_registration_blocks_gps_convergence(rng):
    aligner = FrameAligner(AlignmentConfig(min_pairs=10, require_registration=True))
    feed_gps(aligner, circle(30), 0.01, rng)
    assert aligner.estimate.heading_variance < aligner.config.threshold
    assert not aligner.converged

    relaxed = FrameAligner(AlignmentConfig(min_pairs=10))
    feed_gps(relaxed, circle(30), 0.01, rng)
    assert relaxed.converged
    assert relaxed.estimate.n_pairs == 10


def test_position_covariance_grows_across_the_lever_arm(rng):
    aligner = FrameAligner(AlignmentConfig(min_pairs=50))
    feed_gps(aligner, circle(30), 2.0, rng)
    est = aligner.estimate
    floor = est.residual_variance / est.n_pairs
    assert est.residual_variance > 0.0
    assert np.allclose(est.position_covariance(est.centroid_l), floor * np.eye(3))

    far = est.position_covariance(est.centroid_l + np.array([100.0, 0.0, 0.0]))
    along = est.R_z_WL @ np.array([1.0, 0.0, 0.0])
    across = np.array([-along[1], along[0], 0.0])
    assert across @ far @ across == pytest.approx(est.heading_variance * 1e4 + floor)
    assert along @ far @ along == pytest.approx(floor)

    unknown = AlignmentEstimate(0.0, np.zeros(3))
    assert np.all(np.isinf(unknown.position_covariance(np.zeros(3))))


def test_min_duration_delays_convergence(rng):
    aligner = FrameAligner(AlignmentConfig(min_pairs=5, min_duration_s=20.0))
    feed_gps(aligner, circle(15), 0.01, rng)
    assert not aligner.converged
    feed_gps(aligner, circle(10, radius=25.0), 0.01, rng, t0=15.0)
    assert aligner.converged
    assert aligner.estimate.t >= 20.0


def test_offline_replay_pairs_by_nearest_stamp():
    local = circle(30)
    stamps = np.arange(30) * 0.5
    vslam = list(zip(stamps, local))
    fixes = [(t + 0.05, p) for t, p in zip(stamps, to_world(local))]
    # слишком далеко по времени от любого кадра VSLAM
    fixes += [(t + 0.25, p + 50.0) for t, p in zip(stamps, to_world(local))]
    history = run_alignment(fixes, [], vslam, AlignmentConfig(min_pairs=10, max_dt=0.1))
    assert history[-1].converged
    assert history[-1].n_pairs == 10
    assert history[-1].yaw == pytest.approx(YAW, abs=1e-9)
    assert np.allclose(history[-1].T_WL.translation, OFFSET, atol=1e-9)
    assert set(history[-1].log_row()) >= {"t", "phase", "yaw", "heading_variance", "converged"}
