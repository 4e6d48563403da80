import numpy as np
import pytest

from src.errors import ImuGapError
from src.estimator.engine import Estimator, SensorData
from src.estimator.factors import (
    STATE_DIM,
    GpsFactor,
    KeyframeState,
    Landmark,
    MapFactor,
    derive_map_measurement,
    gps_residual,
    imu_residual,
    map_residual,
    predict_state,
    visual_residual,
)
from src.estimator.marginalization import (
    WindowPrior,
    assemble,
    keyframe_terms,
    marginalize_or_drop,
    schur_complement,
)
from src.estimator.preintegration import preintegrate
from src.estimator.window import NoiseModel, SlidingWindow, step_window, triangulate
from src.geometry import Pose, exp_so3, log_so3, random_rotation
from src.gnss import GpsFix
from src.models import CameraConfig, EstimatorConfig, ExperimentConfig, Mode, NoiseConfig, TrajectoryConfig
from src.registration import RegistrationResult
from src.simkit import (
    ImuStream,
    Trajectory,
    camera_extrinsics,
    loop_trajectory,
    project,
    synthesize_imu,
    synthesize_observations,
)
from src.twin import sample_surface

NOISE = NoiseConfig()
T_BC = camera_extrinsics(10.0)


@pytest.fixture(scope="module")
def loop():
    traj = loop_trajectory(TrajectoryConfig())
    return traj, synthesize_imu(traj, 200.0, NoiseConfig.noiseless())


def truth_state(traj, kf_id, t):
    return KeyframeState(kf_id, t, traj.pose(t), traj.velocity(t))


def pre_between(imu, t_i, t_j, bg=np.zeros(3), ba=np.zeros(3)):
    return preintegrate(imu, t_i, t_j, bg, ba, NOISE.gyro_noise_density, NOISE.accel_noise_density)


def jitter(kf: KeyframeState, rng, angle=0.1, offset=0.5) -> KeyframeState:
    d = np.concatenate([rng.normal(size=3) * angle, rng.normal(size=6) * offset, rng.normal(size=6) * 1e-2])
    return kf.retract(d)


def numeric_jacobian(fn, kf: KeyframeState, eps=1e-6):
    cols = []
    for k in range(STATE_DIM):
        d = np.zeros(STATE_DIM)
        d[k] = eps
        cols.append((fn(kf.retract(d)) - fn(kf.retract(-d))) / (2 * eps))
    return np.column_stack(cols)


def assert_jacobian(num, analytic):
    scale = max(np.abs(analytic).max(), 1.0)
    assert np.allclose(num, analytic, atol=1e-5 * scale)


# --- preintegration ------------------------------------------------------------


def test_noiseless_preintegration_predicts_the_trajectory(loop):
    traj, imu = loop
    kf_i = truth_state(traj, 0, 2.0)
    pre = pre_between(imu, 2.0, 2.5)
    predicted = predict_state(kf_i, pre, 1, 2.5)
    truth = traj.pose(2.5)
    assert np.linalg.norm(predicted.pose.translation - truth.translation) < 5e-3
    assert np.linalg.norm(log_so3(predicted.pose.rotation.T @ truth.rotation)) < 1e-4
    assert np.linalg.norm(predicted.velocity - traj.velocity(2.5)) < 5e-3

    r, _, _ = imu_residual(kf_i, truth_state(traj, 1, 2.5), pre)
    assert np.linalg.norm(r) < 1e-2
    assert pre.n_samples == 101
    assert np.allclose(pre.covariance, pre.covariance.T)


def test_preintegration_off_grid_endpoints(loop):
    traj, imu = loop
    pre = pre_between(imu, 2.0013, 2.4987)
    assert pre.dt == pytest.approx(0.4974)
    predicted = predict_state(truth_state(traj, 0, 2.0013), pre, 1, 2.4987)
    assert np.linalg.norm(predicted.pose.translation - traj.position(2.4987)) < 5e-3


def test_bias_correction_is_first_order(loop):
    _, imu = loop
    base = pre_between(imu, 1.0, 1.5)
    dbg, dba = np.array([2e-4, -1e-4, 3e-4]), np.array([1e-3, 2e-3, -1e-3])
    exact = pre_between(imu, 1.0, 1.5, dbg, dba)
    dR, dv, dp = base.corrected(dbg, dba)
    assert np.linalg.norm(log_so3(dR.T @ exact.delta_R)) < 1e-7
    assert np.allclose(dv, exact.delta_v, atol=1e-6)
    assert np.allclose(dp, exact.delta_p, atol=1e-6)


def test_imu_gap_is_reported(loop):
    _, imu = loop
    keep = np.ones(len(imu), dtype=bool)
    keep[400:420] = False
    gapped = ImuStream(imu.t[keep], imu.gyro[keep], imu.accel[keep])
    with pytest.raises(ImuGapError):
        preintegrate(gapped, 1.5, 2.5, np.zeros(3), np.zeros(3), 1e-4, 1e-3, nominal_period=0.005)
    with pytest.raises(ImuGapError):
        pre_between(imu, imu.t[-1] - 0.1, imu.t[-1] + 1.0)


# --- residual Jacobians --------------------------------------------------------


def test_imu_residual_jacobians(loop, rng):
    traj, imu = loop
    pre = pre_between(imu, 3.0, 3.4, bg=np.full(3, 1e-3), ba=np.full(3, 1e-2))
    kf_i = jitter(truth_state(traj, 0, 3.0), rng)
    kf_j = jitter(truth_state(traj, 1, 3.4), rng)
    _, J_i, J_j = imu_residual(kf_i, kf_j, pre)
    assert_jacobian(numeric_jacobian(lambda s: imu_residual(s, kf_j, pre)[0], kf_i), J_i)
    assert_jacobian(numeric_jacobian(lambda s: imu_residual(kf_i, s, pre)[0], kf_j), J_j)


def test_visual_residual_jacobians(rng):
    camera = CameraConfig()
    kf = KeyframeState(0, 0.0, Pose.from_yaw(0.4, (1.0, 2.0, 5.0)), np.zeros(3))
    pose_wc = kf.pose @ T_BC
    point = pose_wc.transform(np.array([[1.5, -0.8, 15.0]]))[0]
    pixel = np.array([330.0, 250.0])
    _, J_pose, J_point = visual_residual(kf, point, pixel, camera, T_BC)
    num = numeric_jacobian(lambda s: visual_residual(s, point, pixel, camera, T_BC)[0], kf)
    assert_jacobian(num[:, :6], J_pose)
    assert np.allclose(num[:, 6:], 0.0)

    eps = 1e-6
    num_point = np.column_stack(
        [
            (visual_residual(kf, point + eps * e, pixel, camera, T_BC)[0] - visual_residual(kf, point - eps * e, pixel, camera, T_BC)[0])
            / (2 * eps)
            for e in np.eye(3)
        ]
    )
    assert_jacobian(num_point, J_point)


def test_point_behind_camera_has_no_residual():
    kf = KeyframeState(0, 0.0, Pose.identity(), np.zeros(3))
    behind = (kf.pose @ T_BC).transform(np.array([[0.0, 0.0, -5.0]]))[0]
    assert visual_residual(kf, behind, [320.0, 240.0], CameraConfig(), T_BC) is None


def test_map_and_gps_residual_jacobians(rng):
    kf = KeyframeState(0, 0.0, Pose(random_rotation(rng), rng.normal(size=3)), np.zeros(3))
    measured = Pose(kf.pose.rotation @ exp_so3([0.1, -0.2, 0.05]), kf.pose.translation + 0.3)
    factor = MapFactor(0, 0.0, measured, np.eye(6))
    _, J = map_residual(kf, factor)
    assert_jacobian(numeric_jacobian(lambda s: map_residual(s, factor)[0], kf), J)

    gps = GpsFactor(0, np.zeros(3), np.eye(3), Pose.from_yaw(0.7, (5.0, 0.0, 0.0)))
    _, J = gps_residual(kf, gps)
    assert_jacobian(numeric_jacobian(lambda s: gps_residual(s, gps)[0], kf), J)


def test_map_measurement_from_registration():
    T_WL = Pose.from_yaw(np.pi / 2, (10.0, 0.0, 0.0))
    T_LB = Pose.from_yaw(0.2, (1.0, 2.0, 3.0))
    H = np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    identity = RegistrationResult(Pose.identity(), H, H, 0.1, 100, True)
    factor = derive_map_measurement(identity, T_WL, T_LB, keyframe_id=3, t=1.5)
    assert factor.measured.allclose(T_LB)
    assert factor.keyframe_id == 3
    assert np.allclose(factor.weight, factor.weight.T)
    assert np.all(np.linalg.eigvalsh(factor.weight) > 0)
    # веса конгруэнтны: след может меняться, ранг и знак нет
    assert np.linalg.matrix_rank(factor.weight) == 6

    shifted = RegistrationResult(Pose(np.eye(3), [1.0, 0.0, 0.0]), H, H, 0.1, 100, True)
    moved = derive_map_measurement(shifted, T_WL, T_LB)
    # сдвиг на +x в W соответствует −y в L при курсе 90°
    assert np.allclose(moved.measured.translation - T_LB.translation, [0.0, -1.0, 0.0])


# --- landmarks -----------------------------------------------------------------


def test_triangulation_recovers_the_point():
    camera = CameraConfig()
    poses = [Pose.from_yaw(np.pi / 2, (x, -12.0, 6.0)) for x in (-1.0, 0.0, 1.5)]
    point = np.array([0.5, 0.0, 4.0])
    pixels = [project((p @ T_BC).inverse().transform(point[None])[0], camera) for p in poses]
    assert np.allclose(triangulate(poses, pixels, camera, T_BC, min_parallax_deg=1.0), point, atol=1e-6)
    # почти без параллакса
    close = [Pose.from_yaw(np.pi / 2, (x, -12.0, 6.0)) for x in (0.0, 0.01)]
    close_px = [project((p @ T_BC).inverse().transform(point[None])[0], camera) for p in close]
    assert triangulate(close, close_px, camera, T_BC, min_parallax_deg=1.0) is None


# --- marginalization -----------------------------------------------------------


def make_window(traj, imu, window_size=2, with_imu=True):
    config = EstimatorConfig(window_size=window_size)
    window = SlidingWindow(config, CameraConfig(), T_BC, NoiseModel.from_config(NOISE))
    stamps = [1.0, 1.5, 2.0]
    window.keyframes = [truth_state(traj, k, t) for k, t in enumerate(stamps)]
    window.prior = WindowPrior.gauge(window.keyframes[0], config)
    if with_imu:
        for k in (1, 2):
            window.imu[k] = pre_between(imu, stamps[k - 1], stamps[k])
    window.map_factors[0] = MapFactor(0, 1.0, window.keyframes[0].pose, 100.0 * np.eye(6))
    return window


def test_schur_complement_matches_dense_inverse(rng):
    a = rng.normal(size=(30, 30))
    H = a @ a.T + np.eye(30)
    g = rng.normal(size=30)
    H_star, g_star = schur_complement(H, g, 15)
    inv = np.linalg.inv(H[:15, :15])
    assert np.allclose(H_star, H[15:, 15:] - H[15:, :15] @ inv @ H[:15, 15:])
    assert np.allclose(g_star, g[15:] - H[15:, :15] @ inv @ g[:15])


def test_marginalized_prior_matches_dense_oracle(loop):
    traj, imu = loop
    window = make_window(traj, imu)
    terms = [t for t in keyframe_terms(window) if 0 in t.ids]
    H, g = assemble(terms, [0, 1])
    inv = np.linalg.inv(H[:STATE_DIM, :STATE_DIM])
    expected_H = H[STATE_DIM:, STATE_DIM:] - H[STATE_DIM:, :STATE_DIM] @ inv @ H[:STATE_DIM, STATE_DIM:]
    expected_g = g[STATE_DIM:] - H[STATE_DIM:, :STATE_DIM] @ inv @ g[:STATE_DIM]

    prior = marginalize_or_drop(window)
    assert prior.keyframe_id == 1
    assert np.allclose(prior.information, 0.5 * (expected_H + expected_H.T), rtol=1e-6, atol=1e-6 * np.abs(expected_H).max())
    assert np.allclose(prior.vector, expected_g, rtol=1e-6, atol=1e-6 * max(np.abs(expected_g).max(), 1.0))
    assert np.allclose(prior.jacobian.T @ prior.jacobian, prior.information, atol=1e-6 * np.abs(expected_H).max())

    assert [kf.id for kf in window.keyframes] == [1, 2]
    assert 1 not in window.imu
    assert 0 not in window.map_factors
    assert [kf.id for kf in window.departed] == [0]


def test_uncoupled_keyframe_hands_its_prior_to_the_next_one(loop):
    traj, imu = loop
    window = make_window(traj, imu, with_imu=False)
    before = window.prior
    prior = marginalize_or_drop(window)
    assert len(window) == 2
    assert prior.keyframe_id == 1
    assert np.allclose(prior.information, before.information)
    r, _ = prior.evaluate(window.keyframes[0])
    assert np.allclose(r, 0.0)
    # априорный член продолжает входить в окно
    families = [term.family for term in keyframe_terms(window)]
    assert families.count("prior") == 1

    moved = window.keyframes[0].retract(np.concatenate([np.zeros(3), [0.3, 0.0, 0.0], np.zeros(9)]))
    assert prior.evaluate(moved)[0] @ prior.evaluate(moved)[0] > 1e3


def test_uncoupled_keyframe_keeps_a_prior_on_a_retained_keyframe(loop):
    traj, imu = loop
    window = make_window(traj, imu, window_size=2, with_imu=False)
    window.prior = WindowPrior.gauge(window.keyframes[1], window.config)
    before = window.prior
    assert marginalize_or_drop(window) is before
    assert [kf.id for kf in window.keyframes] == [1, 2]


def test_landmarks_seen_only_by_the_departing_keyframe_are_dropped(loop):
    traj, imu = loop
    window = make_window(traj, imu)
    window.landmarks[5] = Landmark(5, np.ones(3), {0: np.zeros(2)})
    window.landmarks[6] = Landmark(6, np.ones(3), {0: np.zeros(2), 1: np.zeros(2)})
    marginalize_or_drop(window)
    assert 5 not in window.landmarks
    assert window.dropped == {5}
    assert list(window.landmarks[6].observations) == [1]


# --- optimization --------------------------------------------------------------


def test_levenberg_marquardt_never_increases_cost(single_wall, rng):
    traj = Trajectory.from_waypoints([[0, -10, -12, 6, np.pi / 2], [4, 10, -12, 6, np.pi / 2]])
    imu = synthesize_imu(traj, 200.0, NOISE, rng=1)
    landmarks = sample_surface(single_wall, density=0.5, seed=2)
    frames = synthesize_observations(traj, landmarks, CameraConfig(), 2.0, NOISE, single_wall.index, rng=3, t_bc=T_BC)

    config = EstimatorConfig(window_size=4, lm_max_iterations=5)
    window = SlidingWindow(config, CameraConfig(), T_BC, NoiseModel.from_config(NOISE))
    previous = None
    for k, frame in enumerate(frames[:6]):
        kf = truth_state(traj, k, frame.t)
        if k:
            kf = jitter(kf, rng, angle=0.005, offset=0.05)
        pre = pre_between(imu, previous, frame.t) if previous is not None else None
        report = step_window(window, kf, frame.landmark_ids, frame.pixels, pre)
        assert report.cost_after <= report.cost_before
        assert np.all(np.diff(report.history) < 0)
        previous = frame.t
    assert len(window) == 4
    assert report.n_landmarks > 0

    with pytest.raises(ValueError):
        step_window(window, truth_state(traj, 99, 0.5))


def wall_run(single_wall, noise: NoiseConfig, duration=4.0):
    """Straight pass in front of the wall at constant velocity, frames at 2 Hz."""
    traj = Trajectory.from_waypoints([[0, -10, -12, 6, np.pi / 2], [duration, 10, -12, 6, np.pi / 2]])
    imu = synthesize_imu(traj, 200.0, noise, rng=1)
    landmarks = sample_surface(single_wall, density=0.5, seed=2)
    frames = synthesize_observations(traj, landmarks, CameraConfig(), 2.0, noise, single_wall.index, rng=3, t_bc=T_BC)
    return traj, imu, frames


def fill_window(config, noise, traj, imu, frames, start=None, map_weight=None):
    """Feed frames as keyframes; start(k, truth) gives the initial state, default IMU prediction."""
    window = SlidingWindow(config, CameraConfig(), T_BC, NoiseModel.from_config(noise))
    reports = []
    for k, frame in enumerate(frames):
        truth = truth_state(traj, k, frame.t)
        pre = None
        if k == 0:
            kf = start(0, truth) if start else truth
        else:
            prev = window.newest
            pre = pre_between(imu, prev.t, frame.t, prev.gyro_bias, prev.accel_bias)
            kf = start(k, truth) if start else predict_state(prev, pre, k, frame.t)
        map_factor = None
        if map_weight is not None:
            map_factor = MapFactor(k, frame.t, truth.pose, map_weight * np.eye(6))
        reports.append(step_window(window, kf, frame.landmark_ids, frame.pixels, pre, map_factor=map_factor))
    return window, reports


def test_noiseless_ground_truth_is_a_fixed_point(single_wall):
    noiseless = NoiseConfig.noiseless()
    traj, imu, frames = wall_run(single_wall, noiseless)
    window, _ = fill_window(EstimatorConfig(window_size=5), noiseless, traj, imu, frames[:3], start=lambda k, truth: truth)
    assert len(window) == 3
    for kf in window.keyframes:
        truth = traj.pose(kf.t)
        assert np.allclose(kf.pose.translation, truth.translation, atol=1e-9)
        assert np.allclose(kf.pose.rotation, truth.rotation, atol=1e-9)
        assert np.allclose(kf.velocity, traj.velocity(kf.t), atol=1e-9)


def test_perturbed_noiseless_window_returns_to_ground_truth(single_wall):
    noiseless = NoiseConfig.noiseless()
    traj, imu, frames = wall_run(single_wall, noiseless)
    # 1° и 0.1 м
    delta = np.concatenate([np.radians(1.0) * np.array([0.6, 0.0, 0.8]), [0.0, 0.06, 0.08], np.zeros(9)])

    def perturbed(k, truth):
        return truth.retract(delta) if k else truth

    config = EstimatorConfig(window_size=5, lm_max_iterations=30)
    window, reports = fill_window(config, noiseless, traj, imu, frames[:3], start=perturbed)
    assert reports[-1].cost_after < reports[-1].cost_before
    for kf in window.keyframes:
        truth = traj.pose(kf.t)
        assert np.linalg.norm(kf.pose.translation - truth.translation) < 1e-6
        assert np.linalg.norm(log_so3(truth.rotation.T @ kf.pose.rotation)) < 1e-6


def test_window_solution_is_gauge_invariant(single_wall):
    traj, imu, frames = wall_run(single_wall, NOISE)
    gauge = Pose.from_yaw(0.7, (5.0, -3.0, 1.0))

    def moved(k, truth):
        return KeyframeState(k, truth.t, gauge @ truth.pose, gauge.rotation @ truth.velocity)

    config = EstimatorConfig(window_size=4, lm_max_iterations=30, lm_rel_tol=1e-12)
    plain, plain_reports = fill_window(config, NOISE, traj, imu, frames[:6], start=lambda k, truth: truth)
    shifted, shifted_reports = fill_window(config, NOISE, traj, imu, frames[:6], start=moved)
    assert shifted_reports[-1].cost_after == pytest.approx(plain_reports[-1].cost_after, rel=1e-6)
    for a, b in zip(plain.keyframes, shifted.keyframes):
        assert (gauge @ a.pose).allclose(b.pose, atol=1e-4)


def test_map_factors_reduce_drift(single_wall):
    # смещение акселерометра, неизвестное оценщику
    noise = NoiseConfig(initial_accel_bias=(0.2, 0.0, 0.0))
    traj, imu, frames = wall_run(single_wall, noise)
    config = EstimatorConfig(window_size=4)
    free, _ = fill_window(config, noise, traj, imu, frames)
    anchored, _ = fill_window(config, noise, traj, imu, frames, map_weight=1e4)
    t_end = free.newest.t
    truth = traj.position(t_end)
    drift = np.linalg.norm(free.newest.pose.translation - truth)
    assert np.linalg.norm(anchored.newest.pose.translation - truth) < drift
    assert len(anchored.map_factors) == len(anchored)


def test_twin_mode_without_registrations_is_reported(single_wall, caplog):
    traj, imu, frames = wall_run(single_wall, NOISE)
    t0 = frames[0].t
    initial = KeyframeState(0, t0, traj.pose(t0), traj.velocity(t0))
    data = SensorData(imu, frames, [], initial, T_BC, single_wall)
    config = ExperimentConfig(seed=0, estimator=EstimatorConfig(window_size=4, keyframe_stride=1))
    output = Estimator(config, Mode.vio_twin).run(data)
    assert output.registrations == []
    assert output.trajectory.frame == "L"
    assert "without registrations" in caplog.text


def test_gps_fixes_far_off_the_track_are_gated_then_accepted(rng):
    config = ExperimentConfig(seed=0, estimator=EstimatorConfig(gps_max_skipped=2))
    estimator = Estimator(config, Mode.vio_gps)
    theta = np.linspace(0.0, 2 * np.pi, 30, endpoint=False)
    local = np.column_stack([20.0 * np.cos(theta), 20.0 * np.sin(theta), np.zeros(30)])
    for k, p in enumerate(local):
        estimator.aligner.add_gps(float(k), p + rng.normal(scale=0.1, size=3), p)
    kf = KeyframeState(40, 40.0, Pose.identity(), np.zeros(3))

    near = GpsFix(40.0, np.array([0.3, -0.2, 0.1]), np.eye(3), 8)
    factor = estimator._gps_factor(kf, near)
    assert factor is not None
    # ковариация фикса плюс вклад выравнивания: информация не больше, чем у одного фикса
    assert np.all(np.linalg.eigvalsh(factor.information) <= 1.0 + 1e-9)

    far = GpsFix(40.0, np.array([30.0, 0.0, 0.0]), np.eye(3), 8)
    assert estimator._gps_factor(kf, far) is None
    assert estimator._gps_factor(kf, far) is None
    # после gps_max_skipped отброшенных подряд фикс принимается
    assert estimator._gps_factor(kf, far) is not None
    assert estimator._gps_factor(kf, far) is None
