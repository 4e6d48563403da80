"""Residuals and Jacobians of the sliding-window problem.

Keyframe tangent (15): [δθ, δp, δv, δb_g, δb_a] with R ← R·Exp(δθ) and
additive updates elsewhere. Residuals return (r, J...) with J = ∂r/∂tangent.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from src.estimator.preintegration import PreintegratedImu
from src.geometry import Pose, exp_so3, hat, hat_batch, log_so3, right_jacobian, right_jacobian_inv
from src.models import CameraConfig
from src.registration import RegistrationResult
from src.simkit import GRAVITY

STATE_DIM = 15
ROT, POS, VEL, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
MIN_DEPTH = 1e-3


@dataclass(frozen=True, eq=False)
class KeyframeState:
    id: int
    t: float
    pose: Pose
    velocity: np.ndarray
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def retract(self, delta: np.ndarray) -> "KeyframeState":
        pose = Pose(self.pose.rotation @ exp_so3(delta[ROT]), self.pose.translation + delta[POS])
        return replace(
            self,
            pose=pose,
            velocity=self.velocity + delta[VEL],
            gyro_bias=self.gyro_bias + delta[BG],
            accel_bias=self.accel_bias + delta[BA],
        )

    def local(self, other: "KeyframeState") -> np.ndarray:
        """Tangent d with other.retract(d) == self."""
        d = np.empty(STATE_DIM)
        d[ROT] = log_so3(other.pose.rotation.T @ self.pose.rotation)
        d[POS] = self.pose.translation - other.pose.translation
        d[VEL] = self.velocity - other.velocity
        d[BG] = self.gyro_bias - other.gyro_bias
        d[BA] = self.accel_bias - other.accel_bias
        return d


@dataclass(eq=False)
class Landmark:
    id: int
    position: np.ndarray | None = None
    observations: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def initialized(self) -> bool:
        return self.position is not None


# --- visual --------------------------------------------------------------------


def project_jacobian(p_c: np.ndarray, camera: CameraConfig) -> np.ndarray:
    x, y, z = p_c[..., 0], p_c[..., 1], p_c[..., 2]
    j = np.zeros(p_c.shape[:-1] + (2, 3))
    j[..., 0, 0] = camera.fx / z
    j[..., 0, 2] = -camera.fx * x / (z * z)
    j[..., 1, 1] = camera.fy / z
    j[..., 1, 2] = -camera.fy * y / (z * z)
    return j


def visual_residuals(rotations, translations, points, pixels, camera: CameraConfig, t_bc: Pose):
    """Batched e = z − h(T_CB·T_BL·p_L).

    rotations (N,3,3), translations (N,3) are the observing T_LB; returns
    (e (N,2), J_pose (N,2,6), J_point (N,2,3), valid (N,)).
    """
    rt = np.transpose(rotations, (0, 2, 1))
    p_b = np.einsum("nij,nj->ni", rt, points - translations)
    p_c = (p_b - t_bc.translation) @ t_bc.rotation
    valid = p_c[:, 2] > MIN_DEPTH
    z = np.where(valid, p_c[:, 2], 1.0)
    proj = np.column_stack([camera.fx * p_c[:, 0] / z + camera.cx, camera.fy * p_c[:, 1] / z + camera.cy])
    e = pixels - proj
    dh = project_jacobian(np.column_stack([p_c[:, :2], z]), camera)
    dh_b = -np.einsum("nij,jk->nik", dh, t_bc.rotation.T)
    j_pose = np.concatenate([dh_b @ hat_batch(p_b), -dh_b @ rt], axis=2)
    j_point = dh_b @ rt
    return e, j_pose, j_point, valid


def visual_residual(kf: KeyframeState, landmark: Landmark | np.ndarray, pixel, camera: CameraConfig, t_bc: Pose):
    """Single observation; None when the point is behind the camera."""
    point = landmark.position if isinstance(landmark, Landmark) else np.asarray(landmark, dtype=float)
    e, j_pose, j_point, valid = visual_residuals(
        kf.pose.rotation[None], kf.pose.translation[None], point[None], np.asarray(pixel, dtype=float)[None], camera, t_bc
    )
    if not valid[0]:
        return None
    return e[0], j_pose[0], j_point[0]


def huber_weights(whitened_norm: np.ndarray, delta: float) -> np.ndarray:
    return np.where(whitened_norm <= delta, 1.0, delta / np.maximum(whitened_norm, 1e-300))


def huber_cost(whitened_norm: np.ndarray, delta: float) -> np.ndarray:
    s = whitened_norm
    return np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)


# --- inertial ------------------------------------------------------------------


def imu_residual(kf_i: KeyframeState, kf_j: KeyframeState, pre: PreintegratedImu):
    """r = [rotation, velocity, position] (9), J_i and J_j (9×15)."""
    Ri, Rj = kf_i.pose.rotation, kf_j.pose.rotation
    pi, pj = kf_i.pose.translation, kf_j.pose.translation
    vi, vj = kf_i.velocity, kf_j.velocity
    dt = pre.dt
    dbg = kf_i.gyro_bias - pre.gyro_bias
    dR, dv, dp = pre.corrected(kf_i.gyro_bias, kf_i.accel_bias)

    err_R = dR.T @ Ri.T @ Rj
    r_R = log_so3(err_R)
    vel_term = Ri.T @ (vj - vi - GRAVITY * dt)
    pos_term = Ri.T @ (pj - pi - vi * dt - 0.5 * GRAVITY * dt * dt)
    r = np.concatenate([r_R, vel_term - dv, pos_term - dp])

    jr_inv = right_jacobian_inv(r_R)
    J_i = np.zeros((9, STATE_DIM))
    J_j = np.zeros((9, STATE_DIM))
    J_i[0:3, ROT] = -jr_inv @ Rj.T @ Ri
    J_i[0:3, BG] = -jr_inv @ err_R.T @ right_jacobian(pre.d_R_d_bg @ dbg) @ pre.d_R_d_bg
    J_j[0:3, ROT] = jr_inv

    J_i[3:6, ROT] = hat(vel_term)
    J_i[3:6, VEL] = -Ri.T
    J_i[3:6, BG] = -pre.d_v_d_bg
    J_i[3:6, BA] = -pre.d_v_d_ba
    J_j[3:6, VEL] = Ri.T

    J_i[6:9, ROT] = hat(pos_term)
    J_i[6:9, POS] = -Ri.T
    J_i[6:9, VEL] = -Ri.T * dt
    J_i[6:9, BG] = -pre.d_p_d_bg
    J_i[6:9, BA] = -pre.d_p_d_ba
    J_j[6:9, POS] = Ri.T
    return r, J_i, J_j


def predict_state(kf_i: KeyframeState, pre: PreintegratedImu, new_id: int, t_j: float) -> KeyframeState:
    dR, dv, dp = pre.corrected(kf_i.gyro_bias, kf_i.accel_bias)
    Ri, pi, vi, dt = kf_i.pose.rotation, kf_i.pose.translation, kf_i.velocity, pre.dt
    pose = Pose(Ri @ dR, pi + vi * dt + 0.5 * GRAVITY * dt * dt + Ri @ dp)
    return KeyframeState(new_id, t_j, pose, vi + GRAVITY * dt + Ri @ dv, kf_i.gyro_bias.copy(), kf_i.accel_bias.copy())


def bias_residual(kf_i: KeyframeState, kf_j: KeyframeState):
    r = np.concatenate([kf_j.gyro_bias - kf_i.gyro_bias, kf_j.accel_bias - kf_i.accel_bias])
    J_i = np.zeros((6, STATE_DIM))
    J_j = np.zeros((6, STATE_DIM))
    J_i[:, 9:15] = -np.eye(6)
    J_j[:, 9:15] = np.eye(6)
    return r, J_i, J_j


def bias_information(dt: float, gyro_walk: float, accel_walk: float) -> np.ndarray:
    var = np.concatenate([np.full(3, gyro_walk**2 * dt), np.full(3, accel_walk**2 * dt)])
    return np.diag(1.0 / var)


# --- global factors ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GpsFactor:
    keyframe_id: int
    position: np.ndarray
    information: np.ndarray
    T_WL: Pose


def gps_residual(kf: KeyframeState, factor: GpsFactor):
    r = factor.T_WL.transform(kf.pose.translation) - factor.position
    J = np.zeros((3, STATE_DIM))
    J[:, POS] = factor.T_WL.rotation
    return r, J


@dataclass(frozen=True, eq=False)
class MapFactor:
    keyframe_id: int
    t: float
    measured: Pose
    weight: np.ndarray
    registration_weight: np.ndarray | None = None


def map_weight_transform(T_WL: Pose, measured: Pose) -> np.ndarray:
    """J = ∂(map residual)/∂(registration tangent) at the measurement."""
    R_LW = T_WL.rotation.T
    p_WB = T_WL.transform(measured.translation)
    J = np.zeros((6, 6))
    J[0:3, 0:3] = -measured.rotation.T @ R_LW
    J[3:6, 0:3] = R_LW @ hat(p_WB)
    J[3:6, 3:6] = -R_LW
    return J


def derive_map_measurement(
    reg: RegistrationResult, T_WL: Pose, T_LB: Pose, keyframe_id: int = -1, t: float = 0.0
) -> MapFactor:
    """T_LB_meas = T_LW·δT·T_WL·T̂_LB, weight moved into the residual tangent."""
    measured = T_WL.inverse() @ reg.delta_T @ T_WL @ T_LB
    J_inv = np.linalg.inv(map_weight_transform(T_WL, measured))
    weight = J_inv.T @ reg.weight @ J_inv
    return MapFactor(keyframe_id, t, measured, 0.5 * (weight + weight.T), reg.weight)


def map_residual(kf: KeyframeState, factor: MapFactor):
    """r = [Log(R_measᵀ·R̂_LB); p̂_LB − p_meas], J (6×15)."""
    r_R = log_so3(factor.measured.rotation.T @ kf.pose.rotation)
    r = np.concatenate([r_R, kf.pose.translation - factor.measured.translation])
    J = np.zeros((6, STATE_DIM))
    J[0:3, ROT] = right_jacobian_inv(r_R)
    J[3:6, POS] = np.eye(3)
    return r, J
