import time

import numpy as np
import pytest

from src.errors import TooFewCorrespondencesError, ZeroInformationError
from src.geometry import Pose, exp_so3, log_so3, random_rotation
from src.models import RegistrationConfig
from src.registration import (
    CloudTarget,
    apply_step,
    associate,
    calibrate_beta,
    compute_hessian,
    compute_weight,
    isotropic_weight,
    iterate_icp,
    linear_system,
    plane_residuals,
    register_cloud,
)
from tests.conftest import CORNER_PLANES, sample_planes

ICP_CONFIG = RegistrationConfig(gate_schedule=[6.0, 3.0, 1.5, 1.0, 0.5, 0.25])


def corner_points(rng, n=300):
    planes = [(np.asarray(o) + 2.0 * (np.asarray(u) + np.asarray(v)), u, v, 16.0) for o, u, v, _ in CORNER_PLANES]
    return sample_planes(rng, n, planes)


def perturbation(rng, center, max_t=2.0, max_angle_deg=10.0):
    """Rotation about the cloud center plus a translation, applied in W."""
    R = random_rotation(rng, np.radians(max_angle_deg))
    direction = rng.normal(size=3)
    t = direction / np.linalg.norm(direction) * rng.uniform(0.0, max_t)
    return Pose(R, center - R @ center + t)


def pose_error(a: Pose, b: Pose):
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = float(np.degrees(np.linalg.norm(log_so3(a.rotation.T @ b.rotation))))
    return dt, dr


def test_icp_recovers_injected_transforms(corner_scene, rng):
    trials, recovered, slowest = 50, 0, 0.0
    for _ in range(trials):
        world = corner_points(rng)
        T_WB = Pose(random_rotation(rng, np.radians(30.0)), rng.uniform(5.0, 15.0, size=3))
        body = T_WB.inverse().transform(world) + rng.normal(scale=0.05, size=world.shape)
        init = perturbation(rng, world.mean(axis=0)) @ T_WB
        started = time.perf_counter()
        result = iterate_icp(body, corner_scene.index, init, ICP_CONFIG)
        slowest = max(slowest, time.perf_counter() - started)
        dt, dr = pose_error(result.delta_T @ init, T_WB)
        recovered += result.converged and dt < 0.05 and dr < 0.5
    assert recovered >= 0.95 * trials
    assert slowest < 2.0


def test_icp_on_sampled_cloud_target(corner_scene, rng):
    target = CloudTarget.from_mesh(corner_scene, density=20.0, seed=1)
    world = corner_points(rng)
    T_WB = Pose.from_yaw(0.3, (8.0, 8.0, 5.0))
    body = T_WB.inverse().transform(world)
    init = perturbation(rng, world.mean(axis=0), max_t=0.5, max_angle_deg=2.0) @ T_WB
    result = iterate_icp(body, target, init, ICP_CONFIG)
    dt, dr = pose_error(result.delta_T @ init, T_WB)
    assert result.converged
    assert dt < 0.1
    assert dr < 1.0


def test_linearization_matches_finite_differences(corner_scene, rng):
    for _ in range(100):
        points = corner_points(rng, 20) + rng.normal(scale=0.3, size=(60, 3))
        corrs = associate(points, corner_scene.index, max_dist=5.0)
        a_rows, y = linear_system(corrs)
        assert np.allclose(plane_residuals(corrs), y)
        eps = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            num = (plane_residuals(corrs, apply_step(d)) - plane_residuals(corrs, apply_step(-d))) / (2 * eps)
            # r(x) ≈ y − A x
            analytic = -a_rows[:, k]
            assert np.allclose(num, analytic, rtol=1e-5, atol=1e-5 * np.abs(analytic).max())


def test_single_plane_weight_shares_null_space(single_wall, rng):
    points = rng.uniform([-40, 0, 1], [40, 0, 29], size=(400, 3))
    points[:, 1] = rng.normal(scale=0.05, size=400)
    corrs = associate(points, single_wall.index, max_dist=1.0)
    H = compute_hessian(corrs)
    rmse = float(np.sqrt(np.mean(plane_residuals(corrs) ** 2)))
    W = compute_weight(H, rmse, beta=3.0e5)

    eig_t = np.linalg.eigvalsh(W[3:, 3:])
    assert eig_t[0] / eig_t[-1] < 1e-3

    s, u = np.linalg.eigh(H)
    null = u[:, s < 1e-9 * s.max()]
    # сдвиг вдоль стены (x, z) и поворот вокруг нормали
    assert null.shape[1] == 3
    assert np.allclose(W @ null, 0.0, atol=1e-9 * np.abs(W).max())


def test_weight_scale_and_isotropic_ablation(corner_scene, rng):
    corrs = associate(corner_points(rng), corner_scene.index, max_dist=1.0)
    H = compute_hessian(corrs)
    W = compute_weight(H, inlier_rmse=0.2, beta=100.0)
    assert np.trace(W) == pytest.approx(100.0 * np.exp(-0.5 * 0.04))
    assert np.allclose(W, W.T)
    iso = isotropic_weight(W)
    assert np.trace(iso) == pytest.approx(np.trace(W))
    assert np.allclose(iso, iso[0, 0] * np.eye(6))

    beta = calibrate_beta(H, visual_information_trace=5.0e4, inlier_rmse=0.2)
    assert np.trace(compute_weight(H, 0.2, beta)) == pytest.approx(5.0e4)
    with pytest.raises(ZeroInformationError):
        compute_weight(np.zeros((6, 6)), 0.0, 1.0)


def test_gamma_scale_softens_the_decay(corner_scene, rng):
    corrs = associate(corner_points(rng), corner_scene.index, max_dist=1.0)
    H = compute_hessian(corrs)
    sharp = compute_weight(H, 1.0, beta=1.0, gamma_scale=1.0)
    soft = compute_weight(H, 1.0, beta=1.0, gamma_scale=2.0)
    assert np.trace(soft) > np.trace(sharp)


def test_too_few_correspondences(corner_scene):
    far = np.full((20, 3), 100.0)
    with pytest.raises(TooFewCorrespondencesError) as exc:
        associate(far, corner_scene.index, max_dist=1.0)
    assert exc.value.context["count"] == 0


def test_register_cloud_failures_are_not_converged(corner_scene, rng):
    config = RegistrationConfig()
    few = register_cloud(rng.normal(size=(5, 3)), corner_scene, Pose.identity(), config)
    assert not few.converged
    assert "landmarks" in few.reason

    away = register_cloud(corner_points(rng), corner_scene, Pose.from_yaw(0.0, (900.0, 900.0, 0.0)), config)
    assert not away.converged
    assert np.allclose(away.weight, 0.0)


def test_register_cloud_converges_near_the_truth(corner_scene, rng):
    world = corner_points(rng)
    T_WB = Pose(exp_so3([0.0, 0.0, 0.4]), (6.0, 7.0, 3.0))
    body = T_WB.inverse().transform(world)
    init = Pose.from_yaw(0.02, (0.3, -0.2, 0.1)) @ T_WB
    result = register_cloud(body, corner_scene, init, RegistrationConfig())
    assert result.converged
    assert pose_error(result.delta_T @ init, T_WB)[0] < 1e-3
    row = result.with_stamp(1.5, 7).log_row()
    assert row["t"] == 1.5
    assert row["converged"] is True
    assert row["w_eig_0"] <= row["w_eig_5"]
