"""SO(3)/SE(3) primitives.

Rotations are 3x3 matrices. Six-dimensional tangents are ordered
(rotation, translation) everywhere in the package.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-8
_NEAR_PI = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def hat_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    w = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * w + b * (w @ w)


def log_so3(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    axis_sin = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(axis_sin)
    cos_theta = 0.5 * (np.trace(r) - 1.0)
    theta = float(np.arctan2(sin_theta, cos_theta))

    if theta < _SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * axis_sin

    if np.pi - theta < _NEAR_PI:
        # ветка с наибольшим диагональным элементом: sin(theta) ~ 0
        m = 0.5 * (r + r.T) - cos_theta * np.eye(3)
        i = int(np.argmax(np.diag(m)))
        axis = m[i] / np.sqrt(max(m[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ axis_sin < 0.0:
            axis = -axis
        return theta * axis

    return theta / (2.0 * sin_theta) * axis_sin


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    w = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + (w @ w) / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / theta**2 * w
        + (theta - np.sin(theta)) / theta**3 * (w @ w)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    w = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * w + coef * (w @ w)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(r: np.ndarray) -> float:
    return float(np.arctan2(r[1, 0], r[0, 0]))


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(
        np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol
    )


def quaternion_wxyz(r: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(r).as_quat()
    q = np.array([w, x, y, z])
    # одна полусфера, чтобы CSV не зависел от знака
    return -q if q[0] < 0 else q


def from_quaternion_wxyz(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rot_z(yaw), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(a: Pose) -> Pose:
    return a.inverse()


def transform_point(a: Pose, p: np.ndarray) -> np.ndarray:
    return a.transform(p)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))
