"""Point-to-plane ICP against the twin and the adaptive registration weight.

The step x = (δθ, δp) acts on world points as a ↦ Exp(δθ)·a + δp, so the
Hessian and the weight live in that tangent, rotation block first.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from src.errors import (
    EmptyCropError,
    SingularSystemError,
    TooFewCorrespondencesError,
    ZeroInformationError,
)
from src.geometry import Pose, exp_so3, log_so3
from src.models import RegistrationConfig
from src.twin import SpatialIndex, TwinMesh, crop_local, sample_surface

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 12
MAX_CONDITION = 1e12


class CloudTarget:
    """Sampled twin surface with a k-d tree; same query surface as SpatialIndex."""

    def __init__(self, points: np.ndarray, normals: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self.normals = np.asarray(normals, dtype=float)
        self._tree = cKDTree(self.points)

    @classmethod
    def from_mesh(cls, mesh: TwinMesh, density: float, seed=0) -> "CloudTarget":
        sample = sample_surface(mesh, density, seed)
        return cls(sample.points, sample.normals)

    def __len__(self) -> int:
        return len(self.points)

    def closest(self, queries: np.ndarray):
        dist, idx = self._tree.query(np.atleast_2d(queries))
        return self.points[idx], idx, dist


Target = SpatialIndex | CloudTarget


def _normals(target: Target, ids: np.ndarray) -> np.ndarray:
    if isinstance(target, CloudTarget):
        return target.normals[ids]
    return target.mesh.face_normals[ids]


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Batched source-to-twin matches: a (source, W), b (closest twin point), n, distance."""

    a: np.ndarray
    b: np.ndarray
    n: np.ndarray
    distance: np.ndarray
    source_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.a)


def associate(
    source: np.ndarray,
    target: Target,
    max_dist: float,
    min_count: int = MIN_CORRESPONDENCES,
) -> Correspondences:
    source = np.atleast_2d(np.asarray(source, dtype=float))
    if len(source) == 0:
        raise ValueError("source cloud is empty")
    pts, ids, dist = target.closest(source)
    keep = np.flatnonzero(dist <= max_dist)
    if len(keep) < min_count:
        raise TooFewCorrespondencesError(
            f"{len(keep)} correspondences within {max_dist} m, need {min_count}",
            count=int(len(keep)),
        )
    return Correspondences(source[keep], pts[keep], _normals(target, ids[keep]), dist[keep], keep)


def linear_system(corrs: Correspondences) -> tuple[np.ndarray, np.ndarray]:
    """Rows A_j = [−(a_j×n_j)ᵀ, −n_jᵀ] and y_j = n_jᵀ(a_j − b_j); the step minimizes Σ(y_j − A_j x)²."""
    a_rows = -np.hstack([np.cross(corrs.a, corrs.n), corrs.n])
    y = np.einsum("ij,ij->i", corrs.n, corrs.a - corrs.b)
    return a_rows, y


def compute_hessian(corrs: Correspondences) -> np.ndarray:
    a_rows, _ = linear_system(corrs)
    h = a_rows.T @ a_rows
    return 0.5 * (h + h.T)


def apply_step(x: np.ndarray) -> Pose:
    return Pose(exp_so3(x[:3]), x[3:])


def plane_residuals(corrs: Correspondences, step: Pose | None = None) -> np.ndarray:
    a = corrs.a if step is None else step.transform(corrs.a)
    return np.einsum("ij,ij->i", corrs.n, a - corrs.b)


def solve_point_to_plane(corrs: Correspondences):
    """One Gauss-Newton step: (delta_T, hessian, inlier_rmse after the step)."""
    if len(corrs) < MIN_CORRESPONDENCES:
        raise TooFewCorrespondencesError(f"{len(corrs)} correspondences, need {MIN_CORRESPONDENCES}")
    a_rows, y = linear_system(corrs)
    h = 0.5 * (a_rows.T @ a_rows + (a_rows.T @ a_rows).T)
    if np.linalg.cond(h) > MAX_CONDITION:
        raise SingularSystemError("point-to-plane normal equations are singular")
    x = np.linalg.solve(h, a_rows.T @ y)
    step = apply_step(x)
    rmse = float(np.sqrt(np.mean(plane_residuals(corrs, step) ** 2)))
    return step, h, rmse


def _degenerate_step(corrs: Correspondences) -> Pose:
    a_rows, y = linear_system(corrs)
    h = a_rows.T @ a_rows
    x = np.linalg.pinv(h, rcond=1e-10, hermitian=True) @ (a_rows.T @ y)
    return apply_step(x)


def compute_weight(hessian: np.ndarray, inlier_rmse: float, beta: float, gamma_scale: float = 1.0) -> np.ndarray:
    """W = (β / trace H)·exp(−(γ/scale)²/2)·H."""
    trace = float(np.trace(hessian))
    if trace <= 0.0:
        raise ZeroInformationError("registration Hessian carries no information")
    g = inlier_rmse / gamma_scale
    return (beta / trace) * np.exp(-0.5 * g * g) * np.asarray(hessian)


def isotropic_weight(weight: np.ndarray) -> np.ndarray:
    return np.trace(weight) / 6.0 * np.eye(6)


def calibrate_beta(hessian: np.ndarray, visual_information_trace: float, inlier_rmse: float = 0.0) -> float:
    """β giving trace(W) equal to the visual information trace of one keyframe."""
    if np.trace(hessian) <= 0.0:
        raise ZeroInformationError("registration Hessian carries no information")
    return float(visual_information_trace * np.exp(0.5 * inlier_rmse**2))


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    delta_T: Pose
    hessian: np.ndarray
    weight: np.ndarray
    inlier_rmse: float
    inlier_count: int
    converged: bool
    iterations: int = 0
    n_source: int = 0
    reason: str = ""
    t: float | None = None
    keyframe_id: int | None = None
    snapshot: dict = field(default_factory=dict, repr=False)

    @classmethod
    def failed(cls, reason: str, n_source: int = 0) -> "RegistrationResult":
        return cls(Pose.identity(), np.zeros((6, 6)), np.zeros((6, 6)), float("inf"), 0, False, 0, n_source, reason)

    def with_stamp(self, t: float, keyframe_id: int, **snapshot) -> "RegistrationResult":
        return RegistrationResult(
            self.delta_T, self.hessian, self.weight, self.inlier_rmse, self.inlier_count, self.converged,
            self.iterations, self.n_source, self.reason, t, keyframe_id, snapshot,
        )

    def log_row(self) -> dict:
        eig = np.linalg.eigvalsh(0.5 * (self.weight + self.weight.T))
        row = {
            "t": self.t,
            "converged": self.converged,
            "inlier_count": self.inlier_count,
            "gamma": self.inlier_rmse,
            "trace_h": float(np.trace(self.hessian)),
        }
        row.update({f"w_eig_{k}": float(v) for k, v in enumerate(eig)})
        return row


def iterate_icp(
    source: np.ndarray,
    target: Target | None,
    init: Pose,
    config: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Register body-frame source points; delta_T maps init·source onto the twin."""
    config = config or RegistrationConfig()
    source = np.atleast_2d(np.asarray(source, dtype=float))
    if target is None or len(source) == 0:
        return RegistrationResult.failed("no target geometry", len(source))
    gates = list(config.gate_schedule)
    current = init
    corrs = None
    iterations = 0
    for it in range(config.max_iter):
        gate = gates[min(it, len(gates) - 1)]
        try:
            corrs = associate(current.transform(source), target, gate, config.min_correspondences)
        except TooFewCorrespondencesError as exc:
            logger.debug("icp iter %d: %s", it, exc.detail)
            return RegistrationResult.failed(exc.detail, len(source))
        try:
            step, _, _ = solve_point_to_plane(corrs)
        except SingularSystemError:
            step = _degenerate_step(corrs)
        current = step @ current
        iterations = it + 1
        x_norm = float(np.linalg.norm(np.concatenate([log_so3(step.rotation), step.translation])))
        logger.debug("icp iter %d: gate %.2f, %d matches, |x| %.3g", it, gate, len(corrs), x_norm)
        if x_norm < config.tol:
            break

    final_gate = gates[min(iterations, len(gates)) - 1]
    try:
        corrs = associate(current.transform(source), target, final_gate, config.min_correspondences)
    except TooFewCorrespondencesError as exc:
        return RegistrationResult.failed(exc.detail, len(source))
    hessian = compute_hessian(corrs)
    rmse = float(np.sqrt(np.mean(plane_residuals(corrs) ** 2)))
    fraction = len(corrs) / len(source)
    converged = fraction >= config.min_inlier_fraction and rmse <= config.rmse_threshold
    try:
        weight = compute_weight(hessian, rmse, config.beta, config.gamma_scale)
    except ZeroInformationError:
        return RegistrationResult.failed("zero information", len(source))
    if not config.adaptive_weighting:
        weight = isotropic_weight(weight)
    reason = "" if converged else f"inlier fraction {fraction:.2f}, rmse {rmse:.3f} m"
    return RegistrationResult(
        current @ init.inverse(), hessian, weight, rmse, len(corrs), converged, iterations, len(source), reason
    )


def build_target(mesh: TwinMesh, center: np.ndarray, config: RegistrationConfig, seed=0) -> Target:
    """Crop the twin around center; raises EmptyCropError."""
    crop = crop_local(mesh, center, config.crop_half_extent)
    if config.target == "cloud":
        return CloudTarget.from_mesh(crop.mesh, config.cloud_density, seed)
    return crop.index


def register_cloud(
    points_body: np.ndarray,
    mesh: TwinMesh,
    init: Pose,
    config: RegistrationConfig,
) -> RegistrationResult:
    """Crop around the predicted body position, then run ICP."""
    if len(points_body) < config.min_landmarks:
        return RegistrationResult.failed(f"{len(points_body)} landmarks, need {config.min_landmarks}", len(points_body))
    try:
        target = build_target(mesh, init.translation, config)
    except EmptyCropError as exc:
        return RegistrationResult.failed(exc.detail, len(points_body))
    result = iterate_icp(points_body, target, init, config)
    logger.info(
        "registration %s: %d/%d inliers, rmse %.3f m, %d iterations",
        "converged" if result.converged else "rejected",
        result.inlier_count,
        result.n_source,
        result.inlier_rmse,
        result.iterations,
    )
    return result
