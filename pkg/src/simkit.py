"""Ground-truth trajectories, synthetic cities, IMU streams and landmark observations."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from src.geometry import Pose, rot_z
from src.models import CameraConfig, CityConfig, NoiseConfig, TrajectoryConfig
from src.seeding import as_generator
from src.twin import SpatialIndex, SurfaceSample, TwinMesh, merge_meshes

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

# --- city ----------------------------------------------------------------------

_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # низ
        [4, 5, 6], [4, 6, 7],  # крыша
        [0, 1, 5], [0, 5, 4],
        [1, 2, 6], [1, 6, 5],
        [2, 3, 7], [2, 7, 6],
        [3, 0, 4], [3, 4, 7],
    ]
)


def box(x0: float, y0: float, x1: float, y1: float, height: float):
    vertices = np.array(
        [
            [x0, y0, 0.0], [x1, y0, 0.0], [x1, y1, 0.0], [x0, y1, 0.0],
            [x0, y0, height], [x1, y0, height], [x1, y1, height], [x0, y1, height],
        ]
    )
    return vertices, _BOX_FACES.copy()


def ground(x0: float, y0: float, x1: float, y1: float):
    vertices = np.array([[x0, y0, 0.0], [x1, y0, 0.0], [x1, y1, 0.0], [x0, y1, 0.0]])
    return vertices, np.array([[0, 1, 2], [0, 2, 3]])


def block_centers(city: CityConfig) -> np.ndarray:
    pitch = city.block_size + city.street_width
    xs = (np.arange(city.blocks_x) - (city.blocks_x - 1) / 2.0) * pitch
    ys = (np.arange(city.blocks_y) - (city.blocks_y - 1) / 2.0) * pitch
    return np.array([(x, y) for y in ys for x in xs])


def generate_city(city: CityConfig, seed) -> TwinMesh:
    rng = as_generator(seed)
    centers = block_centers(city)
    half = city.block_size / 2.0 - city.setback
    extent = np.abs(centers).max(axis=0) + city.block_size / 2.0 + city.ground_margin
    parts = [ground(-extent[0], -extent[1], extent[0], extent[1])]
    for cx, cy in centers:
        height = float(rng.uniform(city.height_min, city.height_max))
        parts.append(box(cx - half, cy - half, cx + half, cy + half, height))
    mesh = merge_meshes(parts)
    logger.info("generated city: %d blocks, %d triangles", len(centers), len(mesh))
    return mesh


# --- trajectory ----------------------------------------------------------------


class Trajectory:
    """Cubic-spline position and yaw; roll and pitch are zero."""

    def __init__(self, times, positions, yaws):
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        self._times = times
        self._pos = CubicSpline(times, np.asarray(positions, dtype=float), axis=0)
        self._yaw = CubicSpline(times, np.unwrap(np.asarray(yaws, dtype=float)))
        self.start = float(times[0])
        self.duration = float(times[-1] - times[0])

    @classmethod
    def from_waypoints(cls, waypoints) -> "Trajectory":
        w = np.asarray(waypoints, dtype=float)
        return cls(w[:, 0] - w[0, 0], w[:, 1:4], w[:, 4])

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-9) or np.any(t > self.duration + 1e-9):
            raise ValueError(f"t outside [0, {self.duration}]")
        return np.clip(t, 0.0, self.duration)

    def position(self, t):
        return self._pos(self._check(t))

    def velocity(self, t):
        return self._pos(self._check(t), 1)

    def acceleration(self, t):
        return self._pos(self._check(t), 2)

    def yaw(self, t):
        return self._yaw(self._check(t))

    def yaw_rate(self, t):
        return self._yaw(self._check(t), 1)

    def rotation(self, t: float) -> np.ndarray:
        return rot_z(float(self.yaw(t)))

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation(t), self.position(t))

    def path_length(self, step: float = 0.01) -> float:
        t = np.arange(0.0, self.duration + step / 2, step)
        t[-1] = min(t[-1], self.duration)
        return float(np.linalg.norm(np.diff(self.position(t), axis=0), axis=1).sum())

    def local_frame(self) -> Pose:
        """T_WL: gravity-aligned frame at the first body pose."""
        return Pose.from_yaw(float(self.yaw(0.0)), self.position(0.0))


def loop_trajectory(cfg: TrajectoryConfig) -> Trajectory:
    step = np.deg2rad(10.0)
    n = int(round(cfg.loops * 2 * np.pi / step))
    theta = -np.pi / 2 + step * np.arange(n + 1)
    z = cfg.altitude + cfg.climb_per_loop * (theta - theta[0]) / (2 * np.pi)
    xy = np.asarray(cfg.center) + cfg.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    positions = np.column_stack([xy, z])
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    times = np.concatenate([[0.0], np.cumsum(seg)]) / cfg.speed
    # против часовой: курс = theta + 90°, смещение к зданию
    yaws = theta + np.pi / 2 + np.deg2rad(cfg.yaw_offset_deg)
    return Trajectory(times, positions, yaws)


def single_facade_trajectory(cfg: TrajectoryConfig, wall_y: float) -> Trajectory:
    """Straight pass along a facade lying in the plane y = wall_y, camera facing it."""
    n = 21
    s = np.linspace(-cfg.facade_length / 2, cfg.facade_length / 2, n)
    y = wall_y - cfg.facade_distance + 0.5 * np.sin(s / 7.0)
    z = cfg.altitude + 0.8 * np.sin(s / 11.0)
    positions = np.column_stack([s, y, z])
    times = (s - s[0]) / cfg.speed
    # камера смотрит вдоль +y, на фасад
    yaws = np.full(n, np.pi / 2)
    return Trajectory(times, positions, yaws)


def build_trajectory(cfg: TrajectoryConfig, city: CityConfig | None = None) -> Trajectory:
    if cfg.kind == "waypoints":
        return Trajectory.from_waypoints(cfg.waypoints)
    if cfg.kind == "single_facade":
        half = (city.block_size / 2.0 - city.setback) if city else 0.0
        return single_facade_trajectory(cfg, wall_y=cfg.center[1] - half)
    return loop_trajectory(cfg)


# --- IMU -----------------------------------------------------------------------


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True, eq=False)
class ImuStream:
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    gyro_bias: np.ndarray | None = None
    accel_bias: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for k in range(len(self.t)):
            yield ImuSample(float(self.t[k]), self.gyro[k], self.accel[k])

    @property
    def period(self) -> float:
        return float(np.median(np.diff(self.t))) if len(self.t) > 1 else 0.0

    def slice(self, t0: float, t1: float, eps: float = 1e-9) -> "ImuStream":
        mask = (self.t >= t0 - eps) & (self.t <= t1 + eps)
        return ImuStream(self.t[mask], self.gyro[mask], self.accel[mask])


def synthesize_imu(traj: Trajectory, rate: float, noise: NoiseConfig, rng=None) -> ImuStream:
    if rate < 50.0:
        raise ValueError("IMU rate must be at least 50 Hz")
    rng = as_generator(noise.seed if rng is None else rng)
    dt = 1.0 / rate
    n = int(np.floor(traj.duration * rate + 1e-9)) + 1
    t = np.arange(n) * dt

    yaw = traj.yaw(t)
    c, s = np.cos(yaw), np.sin(yaw)
    specific = traj.acceleration(t) - GRAVITY
    # R_WBᵀ для поворота только по курсу
    accel = np.column_stack(
        [c * specific[:, 0] + s * specific[:, 1], -s * specific[:, 0] + c * specific[:, 1], specific[:, 2]]
    )
    gyro = np.zeros((n, 3))
    gyro[:, 2] = traj.yaw_rate(t)

    bg = np.tile(np.asarray(noise.initial_gyro_bias, dtype=float), (n, 1))
    ba = np.tile(np.asarray(noise.initial_accel_bias, dtype=float), (n, 1))
    walk_g = rng.normal(size=(n, 3)) * noise.gyro_bias_walk * np.sqrt(dt)
    walk_a = rng.normal(size=(n, 3)) * noise.accel_bias_walk * np.sqrt(dt)
    walk_g[0] = walk_a[0] = 0.0
    bg += np.cumsum(walk_g, axis=0)
    ba += np.cumsum(walk_a, axis=0)

    gyro = gyro + bg + rng.normal(size=(n, 3)) * noise.gyro_noise_density / np.sqrt(dt)
    accel = accel + ba + rng.normal(size=(n, 3)) * noise.accel_noise_density / np.sqrt(dt)
    return ImuStream(t, gyro, accel, bg, ba)


# --- camera --------------------------------------------------------------------


def camera_extrinsics(pitch_deg: float) -> Pose:
    """T_BC: optical axis along body x, tilted down by pitch_deg."""
    p = np.deg2rad(pitch_deg)
    z_c = np.array([np.cos(p), 0.0, -np.sin(p)])
    x_c = np.array([0.0, -1.0, 0.0])
    y_c = np.cross(z_c, x_c)
    return Pose(np.column_stack([x_c, y_c, z_c]), np.zeros(3))


def project(points_c: np.ndarray, camera: CameraConfig) -> np.ndarray:
    z = points_c[..., 2]
    u = camera.fx * points_c[..., 0] / z + camera.cx
    v = camera.fy * points_c[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True, eq=False)
class FrameObservations:
    t: float
    landmark_ids: np.ndarray
    pixels: np.ndarray
    camera: CameraConfig

    def __len__(self) -> int:
        return len(self.landmark_ids)


def visible_landmarks(
    pose_wc: Pose, landmarks: SurfaceSample, camera: CameraConfig, index: SpatialIndex | None
):
    """Ids and noiseless pixels of landmarks in front of the camera, in frame and unoccluded."""
    pts_c = (landmarks.points - pose_wc.translation) @ pose_wc.rotation
    z = pts_c[:, 2]
    ok = (z > camera.min_depth) & (z < camera.max_depth)
    ids = np.flatnonzero(ok)
    px = project(pts_c[ids], camera)
    inside = (px[:, 0] >= 0) & (px[:, 0] < camera.width) & (px[:, 1] >= 0) & (px[:, 1] < camera.height)
    ids, px = ids[inside], px[inside]
    facing = np.einsum("ij,ij->i", landmarks.normals[ids], pose_wc.translation - landmarks.points[ids]) > 0
    ids, px = ids[facing], px[facing]
    if index is not None and len(ids):
        targets = landmarks.points[ids]
        vec = targets - pose_wc.translation
        dist = np.linalg.norm(vec, axis=1)
        t_hit, _ = index.ray_cast(np.tile(pose_wc.translation, (len(ids), 1)), vec / dist[:, None])
        clear = t_hit >= dist - 1e-3
        ids, px = ids[clear], px[clear]
    return ids, px


def synthesize_observations(
    traj: Trajectory,
    landmarks: SurfaceSample,
    camera: CameraConfig,
    rate: float,
    noise: NoiseConfig,
    index: SpatialIndex | None = None,
    rng=None,
    t_bc: Pose | None = None,
) -> list[FrameObservations]:
    if rate > 30.0:
        raise ValueError("camera rate above 30 Hz is not supported")
    rng = as_generator(noise.seed if rng is None else rng)
    t_bc = t_bc or camera_extrinsics(camera.pitch_deg)
    n = int(np.floor(traj.duration * rate + 1e-9)) + 1
    frames = []
    for k in range(n):
        t = k / rate
        ids, px = visible_landmarks(traj.pose(t) @ t_bc, landmarks, camera, index)
        px = px + rng.normal(size=px.shape) * noise.pixel_sigma
        inside = (px[:, 0] >= 0) & (px[:, 0] < camera.width) & (px[:, 1] >= 0) & (px[:, 1] < camera.height)
        frames.append(FrameObservations(t, ids[inside], px[inside], camera))
    logger.info(
        "synthesized %d frames, %.1f observations per frame",
        len(frames),
        np.mean([len(f) for f in frames]) if frames else 0.0,
    )
    return frames
