import enum
import hashlib
import math
from datetime import datetime
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Mode(str, enum.Enum):
    vio_only = "vio-only"
    vio_gps = "vio-gps"
    vio_twin = "vio-twin"


class AlignmentMode(str, enum.Enum):
    none = "none"
    yaw4dof = "yaw4dof"
    se3 = "se3"


class CameraConfig(BaseModel):
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    rate_hz: float = Field(default=30.0, gt=0, le=30.0)
    pitch_deg: float = 10.0
    min_depth: float = 0.5
    max_depth: float = 80.0


class NoiseConfig(BaseModel):
    gyro_noise_density: float = Field(default=1.7e-4, ge=0)
    accel_noise_density: float = Field(default=2.0e-3, ge=0)
    gyro_bias_walk: float = Field(default=1.9e-5, ge=0)
    accel_bias_walk: float = Field(default=3.0e-3, ge=0)
    pixel_sigma: float = Field(default=1.0, ge=0)
    initial_gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    initial_accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls(
            gyro_noise_density=0.0,
            accel_noise_density=0.0,
            gyro_bias_walk=0.0,
            accel_bias_walk=0.0,
            pixel_sigma=0.0,
        )


class CityConfig(BaseModel):
    blocks_x: int = Field(default=3, gt=0)
    blocks_y: int = Field(default=3, gt=0)
    block_size: float = Field(default=30.0, gt=0)
    street_width: float = Field(default=20.0, gt=0)
    setback: float = Field(default=3.0, ge=0)
    height_min: float = Field(default=20.0, gt=0)
    height_max: float = Field(default=60.0, gt=0)
    ground_margin: float = Field(default=40.0, ge=0)

    @model_validator(mode="after")
    def heights_ordered(self):
        if self.height_max < self.height_min:
            raise ValueError("height_max must be >= height_min")
        if 2 * self.setback >= self.block_size:
            raise ValueError("setback leaves no room for a building")
        return self


class SceneConfig(BaseModel):
    city: CityConfig | None = Field(default_factory=CityConfig)
    mesh_path: str | None = None
    landmark_density: float = Field(default=0.1, gt=0)

    @model_validator(mode="after")
    def one_source(self):
        if self.mesh_path is not None:
            if not Path(self.mesh_path).exists():
                raise ValueError(f"mesh file {self.mesh_path} does not exist")
        elif self.city is None:
            raise ValueError("scene needs either city parameters or mesh_path")
        return self


class TrajectoryConfig(BaseModel):
    kind: Literal["loops", "single_facade", "waypoints"] = "loops"
    # waypoints: [t, x, y, z, yaw]
    waypoints: list[tuple[float, float, float, float, float]] | None = None
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = Field(default=26.5, gt=0)
    loops: int = Field(default=3, gt=0)
    altitude: float = 8.0
    climb_per_loop: float = 4.0
    speed: float = Field(default=5.0, gt=0)
    yaw_offset_deg: float = 45.0
    facade_length: float = Field(default=100.0, gt=0)
    facade_distance: float = Field(default=12.0, gt=0)

    @model_validator(mode="after")
    def waypoints_present(self):
        if self.kind == "waypoints" and (not self.waypoints or len(self.waypoints) < 2):
            raise ValueError("waypoints trajectory needs at least two waypoints")
        return self


class GnssConfig(BaseModel):
    n_satellites: int = Field(default=10, ge=4)
    elevation_mask_deg: float = 10.0
    rate_hz: float = Field(default=5.0, gt=0)
    pseudorange_sigma: float = Field(default=1.5, ge=0)
    clock_bias_sigma_m: float = Field(default=30.0, ge=0)
    visibility_model: Literal["raycast", "gp"] = "raycast"
    n_training_samples: int = Field(default=1500, ge=100)
    training_height_max: float = 100.0
    gmm_components: int = Field(default=3, ge=1)
    gmm_max_iterations: int = Field(default=200, ge=1)
    reg_variance: float = Field(default=1e-4, ge=0)
    height_bin_edges: list[float] = Field(
        default_factory=lambda: [float(h) for h in range(0, 130, 10)]
    )
    gp_length_scale: float = Field(default=15.0, gt=0)
    gp_signal_variance: float = Field(default=4.0, gt=0)
    gp_noise_variance: float = Field(default=0.5, ge=0)
    gp_prior_mean: float | None = None
    model_path: str | None = None


class RegistrationConfig(BaseModel):
    max_iter: int = Field(default=30, gt=0)
    gate_schedule: list[float] = Field(default_factory=lambda: [3.0, 1.5, 1.0, 0.5, 0.25])
    tol: float = Field(default=1e-6, gt=0)
    rmse_threshold: float = Field(default=0.3, gt=0)
    min_inlier_fraction: float = Field(default=0.5, ge=0, le=1)
    min_correspondences: int = Field(default=12, ge=6)
    beta: float = Field(default=3.0e5, gt=0)
    gamma_scale: float = Field(default=1.0, gt=0)
    adaptive_weighting: bool = True
    target: Literal["mesh", "cloud"] = "mesh"
    cloud_density: float = Field(default=4.0, gt=0)
    crop_half_extent: float = Field(default=75.0, gt=0)
    min_landmarks: int = Field(default=30, ge=12)


class AlignmentConfig(BaseModel):
    threshold: float = Field(default=(math.pi / 180.0) ** 2, gt=0)
    min_pairs: int = Field(default=20, ge=2)
    max_dt: float = Field(default=0.1, gt=0)
    min_spread: float = Field(default=0.5, gt=0)
    require_registration: bool = False
    min_duration_s: float | None = None


class EstimatorConfig(BaseModel):
    window_size: int = Field(default=5, ge=2)
    keyframe_stride: int = Field(default=6, ge=1)
    max_landmarks_per_keyframe: int = Field(default=120, ge=10)
    min_parallax_deg: float = Field(default=1.0, ge=0)
    huber_px: float = Field(default=2.0, gt=0)
    lm_max_iterations: int = Field(default=10, ge=1)
    lm_rel_tol: float = Field(default=1e-6, gt=0)
    lm_initial_lambda: float = Field(default=1e-4, gt=0)
    lm_max_rejections: int = Field(default=5, ge=1)
    prior_rotation_sigma: float = 1e-4
    prior_position_sigma: float = 1e-4
    prior_velocity_sigma: float = 0.1
    prior_gyro_bias_sigma: float = 1e-2
    prior_accel_bias_sigma: float = 0.1
    gps_min_sats: int = Field(default=4, ge=4)
    # χ²(3) на 99.9 %
    gps_gate_chi2: float = Field(default=16.27, gt=0)
    gps_max_skipped: int = Field(default=25, ge=0)
    gps_min_sigma: float = Field(default=0.1, gt=0)
    deterministic: bool = True
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    alignment: AlignmentConfig = Field(default_factory=AlignmentConfig)


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    seed: int
    mode: Mode = Mode.vio_twin
    scene: SceneConfig = Field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    camera: CameraConfig = Field(default_factory=CameraConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    imu_rate_hz: float = Field(default=200.0, ge=50.0)
    gnss: GnssConfig = Field(default_factory=GnssConfig)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)

    @field_validator("seed")
    @classmethod
    def seed_non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("seed must be non-negative")
        return value

    def config_hash(self) -> str:
        payload = self.model_dump_json()
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class BenchCell(BaseModel):
    scenario: str
    # путь к YAML сценария, относительно файла bench
    config: str
    modes: list[Mode] = Field(default_factory=lambda: [Mode.vio_gps, Mode.vio_twin])
    isotropic_ablation: bool = False


class BenchConfig(BaseModel):
    name: str = "bench"
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    cells: list[BenchCell] = Field(min_length=1)
    workers: int = Field(default=1, ge=1)
    max_dt: float = Field(default=0.02, gt=0)


# --- API schemas --------------------------------------------------------------


class PoseRow(BaseModel):
    t: float
    x: float
    y: float
    z: float
    qw: float = 1.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0


class EvaluateRequest(BaseModel):
    ground_truth: list[PoseRow]
    estimate: list[PoseRow]
    alignment_mode: AlignmentMode = AlignmentMode.none
    max_dt: float = 0.02


class Metrics(BaseModel):
    config_hash: str | None = None
    seed: int | None = None
    ate_p_m: float
    ate_r_deg: float
    n_pairs: int
    alignment_mode: AlignmentMode


class RunCreate(BaseModel):
    scenario: str
    mode: str
    seed: int
    config_hash: str
    alignment_mode: AlignmentMode
    ate_p_m: float
    ate_r_deg: float
    n_pairs: int
    registrations_attempted: int = 0
    registrations_converged: int = 0
    runtime_s: float = 0.0


class RunOut(RunCreate):
    model_config = ConfigDict(from_attributes=True)

    id: int
    created_at: datetime


class ModeSummary(BaseModel):
    scenario: str
    mode: str
    runs: int
    mean_ate_p_m: float
    mean_ate_r_deg: float
