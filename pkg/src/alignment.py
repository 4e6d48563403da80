"""4-DoF alignment of the estimator frame L to the world frame W.

Phase 1 pairs GPS fixes with estimated positions, phase 2 replaces them with
positions from converged twin registrations. Once the heading variance drops
below the threshold the estimate is frozen.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.errors import DegenerateGeometryError, SingularSystemError
from src.geometry import Pose, rot_z
from src.models import AlignmentConfig

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
PHASE_GPS = "gps"
PHASE_REGISTRATION = "registration"


@dataclass(frozen=True, eq=False)
class AlignmentEstimate:
    yaw: float
    p_WL: np.ndarray
    heading_variance: float = float("inf")
    converged: bool = False
    source: str = PHASE_GPS
    n_pairs: int = 0
    t: float | None = None
    centroid_l: np.ndarray | None = None
    residual_variance: float = 0.0

    @property
    def R_z_WL(self) -> np.ndarray:
        return rot_z(self.yaw)

    @property
    def T_WL(self) -> Pose:
        return Pose(self.R_z_WL, np.asarray(self.p_WL, dtype=float))

    def position_covariance(self, position_l) -> np.ndarray:
        """Covariance in W of T_WL·p_l from the heading and centroid uncertainty."""
        cov = np.eye(3) * (self.residual_variance / max(self.n_pairs, 1))
        if not np.isfinite(self.heading_variance):
            return np.full((3, 3), np.inf)
        if self.centroid_l is not None:
            lever = self.R_z_WL @ (np.asarray(position_l, dtype=float) - self.centroid_l)
            # ẑ × lever
            v = np.array([-lever[1], lever[0], 0.0])
            cov += self.heading_variance * np.outer(v, v)
        return cov

    def log_row(self) -> dict:
        return {
            "t": self.t,
            "phase": self.source,
            "yaw": self.yaw,
            "t_x": float(self.p_WL[0]),
            "t_y": float(self.p_WL[1]),
            "t_z": float(self.p_WL[2]),
            "heading_variance": self.heading_variance,
            "converged": self.converged,
        }


def _as_pairs(global_positions, local_positions):
    g = np.asarray(global_positions, dtype=float).reshape(-1, 3)
    loc = np.asarray(local_positions, dtype=float).reshape(-1, 3)
    if len(g) != len(loc):
        raise ValueError("global and local position lists differ in length")
    return g, loc


def umeyama_yaw(global_positions, local_positions, min_spread: float = 0.5) -> AlignmentEstimate:
    """Yaw-only Procrustes on centered xy, translation over full 3-D."""
    g, loc = _as_pairs(global_positions, local_positions)
    if len(g) < 2:
        raise DegenerateGeometryError(f"alignment needs at least 2 pairs, got {len(g)}")
    cg, cl = g.mean(axis=0), loc.mean(axis=0)
    gc, lc = g - cg, loc - cl
    spread = float(np.linalg.norm(lc[:, :2], axis=1).max())
    if spread <= min_spread:
        raise DegenerateGeometryError(f"horizontal spread {spread:.3f} m is below {min_spread} m")
    s = np.sum(gc[:, 1] * lc[:, 0] - gc[:, 0] * lc[:, 1])
    c = np.sum(gc[:, 0] * lc[:, 0] + gc[:, 1] * lc[:, 1])
    yaw = float(np.arctan2(s, c))
    p = cg - rot_z(yaw) @ cl
    return AlignmentEstimate(yaw, p, n_pairs=len(g), centroid_l=cl)


def alignment_cost(global_positions, local_positions, yaw: float, translation) -> float:
    g, loc = _as_pairs(global_positions, local_positions)
    r = g - loc @ rot_z(yaw).T - np.asarray(translation, dtype=float)
    return float(np.sum(r * r))


def heading_covariance(global_positions, local_positions, estimate: AlignmentEstimate) -> float:
    """Yaw entry of the inverse Gauss-Newton information over (yaw, t), scaled by the residual variance."""
    g, loc = _as_pairs(global_positions, local_positions)
    n = len(g)
    if 3 * n <= 4:
        raise SingularSystemError(f"{n} pairs cannot constrain yaw and translation")
    rotated = loc @ estimate.R_z_WL.T
    r = g - rotated - estimate.p_WL
    s2 = float(np.sum(r * r)) / (3 * n - 4)
    J = np.zeros((n, 3, 4))
    # ∂(R_z l)/∂yaw = ẑ × R_z l
    J[:, 0, 0] = rotated[:, 1]
    J[:, 1, 0] = -rotated[:, 0]
    J[:, :, 1:] = -np.eye(3)
    J = J.reshape(3 * n, 4)
    info = J.T @ J
    if np.linalg.cond(info) > MAX_CONDITION:
        raise SingularSystemError("alignment information is singular")
    return s2 * float(np.linalg.inv(info)[0, 0])


@dataclass(frozen=True)
class AlignmentPair:
    t: float
    position_w: np.ndarray = field(compare=False)
    position_l: np.ndarray = field(compare=False)


class FrameAligner:
    """Incremental two-phase aligner driven by the estimator thread."""

    def __init__(self, config: AlignmentConfig | None = None):
        self.config = config or AlignmentConfig()
        self.gps_pairs: list[AlignmentPair] = []
        self.registration_pairs: list[AlignmentPair] = []
        self.estimate: AlignmentEstimate | None = None
        self.history: list[AlignmentEstimate] = []

    @property
    def converged(self) -> bool:
        return self.estimate is not None and self.estimate.converged

    @property
    def phase(self) -> str:
        # фаза 2, когда регистраций хватает на решение
        return PHASE_REGISTRATION if len(self.registration_pairs) >= self.config.min_pairs else PHASE_GPS

    def add_gps(self, t: float, position_w, position_l) -> AlignmentEstimate | None:
        if self.converged:
            return self.estimate
        self.gps_pairs.append(AlignmentPair(t, np.asarray(position_w, dtype=float), np.asarray(position_l, dtype=float)))
        if self.phase == PHASE_GPS:
            self._solve(t)
        return self.estimate

    def add_registration(self, t: float, position_w, position_l) -> AlignmentEstimate | None:
        if self.converged:
            return self.estimate
        self.registration_pairs.append(
            AlignmentPair(t, np.asarray(position_w, dtype=float), np.asarray(position_l, dtype=float))
        )
        if self.phase == PHASE_REGISTRATION:
            self._solve(t)
        return self.estimate

    def _solve(self, t: float) -> None:
        phase = self.phase
        pairs = self.registration_pairs if phase == PHASE_REGISTRATION else self.gps_pairs
        g = np.array([p.position_w for p in pairs])
        loc = np.array([p.position_l for p in pairs])
        try:
            est = umeyama_yaw(g, loc, self.config.min_spread)
            variance = heading_covariance(g, loc, est)
        except (DegenerateGeometryError, SingularSystemError) as exc:
            logger.debug("alignment at t=%.2f not solvable yet: %s", t, exc.detail)
            return
        cfg = self.config
        converged = len(pairs) >= cfg.min_pairs and variance < cfg.threshold
        if cfg.require_registration and phase != PHASE_REGISTRATION:
            converged = False
        if cfg.min_duration_s is not None and pairs[-1].t - pairs[0].t < cfg.min_duration_s:
            converged = False
        s2 = alignment_cost(g, loc, est.yaw, est.p_WL) / max(3 * len(pairs) - 4, 1)
        self.estimate = AlignmentEstimate(
            est.yaw, est.p_WL, variance, converged, phase, len(pairs), t, est.centroid_l, s2
        )
        self.history.append(self.estimate)
        if converged:
            logger.info(
                "alignment converged at t=%.2f (%s, %d pairs): yaw %.2f deg, heading std %.3f deg",
                t,
                phase,
                len(pairs),
                np.degrees(est.yaw),
                np.degrees(np.sqrt(variance)),
            )


def nearest_stamp(stamps: np.ndarray, t: float, max_dt: float) -> int | None:
    if len(stamps) == 0:
        return None
    k = int(np.argmin(np.abs(stamps - t)))
    return k if abs(stamps[k] - t) <= max_dt else None


def run_alignment(
    gps_fixes,
    registration_positions,
    vslam_positions,
    config: AlignmentConfig | None = None,
) -> list[AlignmentEstimate]:
    """Offline replay: fixes (t, p_W), registrations (t, p_W) and VSLAM positions (t, p_L) in time order."""
    config = config or AlignmentConfig()
    aligner = FrameAligner(config)
    stamps = np.array([t for t, _ in vslam_positions], dtype=float)
    events = [(float(t), 0, np.asarray(p, dtype=float)) for t, p in gps_fixes]
    events += [(float(t), 1, np.asarray(p, dtype=float)) for t, p in registration_positions]
    for t, kind, p_w in sorted(events, key=lambda e: (e[0], e[1])):
        k = nearest_stamp(stamps, t, config.max_dt)
        if k is None:
            continue
        p_l = vslam_positions[k][1]
        if kind == 0:
            aligner.add_gps(t, p_w, p_l)
        else:
            aligner.add_registration(t, p_w, p_l)
        if aligner.converged:
            break
    return aligner.history
