"""Absolute trajectory error and offline alignment of estimates for comparison."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.alignment import umeyama_yaw
from src.errors import DegenerateGeometryError, EmptyPairingError
from src.geometry import Pose, from_quaternion_wxyz, log_so3, quaternion_wxyz
from src.models import AlignmentMode, Metrics

logger = logging.getLogger(__name__)

POSE_COLUMNS = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"]


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    times: np.ndarray
    poses: list[Pose]
    frame: str = "W"
    source: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if len(times) != len(self.poses):
            raise ValueError("times and poses differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    @property
    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for p in self.poses]).reshape(-1, 3, 3)

    def transformed(self, T: Pose, frame: str = "W") -> "TrajectoryRecord":
        return TrajectoryRecord(self.times, [T @ p for p in self.poses], frame, self.source)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for t, pose in zip(self.times, self.poses):
            rows.append([t, *pose.translation, *quaternion_wxyz(pose.rotation)])
        df = pd.DataFrame(rows, columns=POSE_COLUMNS)
        df["frame"] = self.frame
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, source: str = "") -> "TrajectoryRecord":
        missing = [c for c in POSE_COLUMNS if c not in df.columns]
        if missing:
            raise ValueError(f"trajectory table lacks columns {missing}")
        poses = [
            Pose(from_quaternion_wxyz(row[["qw", "qx", "qy", "qz"]].to_numpy(float)), row[["x", "y", "z"]].to_numpy(float))
            for _, row in df.iterrows()
        ]
        frame = str(df["frame"].iloc[0]) if "frame" in df.columns and len(df) else "W"
        return cls(df["t"].to_numpy(float), poses, frame, source)

    @classmethod
    def from_rows(cls, rows, frame: str = "W", source: str = "") -> "TrajectoryRecord":
        """Rows with attributes t, x, y, z, qw, qx, qy, qz (API bodies)."""
        df = pd.DataFrame([{c: getattr(r, c) for c in POSE_COLUMNS} for r in rows], columns=POSE_COLUMNS)
        return cls.from_frame(df.assign(frame=frame), source)


@dataclass(frozen=True, eq=False)
class PairedPoses:
    times: np.ndarray
    gt: list[Pose]
    est: list[Pose]

    def __len__(self) -> int:
        return len(self.times)


def associate_stamps(a: TrajectoryRecord, b: TrajectoryRecord, max_dt: float = 0.02) -> PairedPoses:
    """Pair every pose of a with the nearest stamp of b within max_dt."""
    if len(a) == 0 or len(b) == 0:
        raise EmptyPairingError("cannot pair an empty trajectory")
    idx = np.clip(np.searchsorted(b.times, a.times), 1, len(b) - 1) if len(b) > 1 else np.zeros(len(a), dtype=int)
    if len(b) > 1:
        left = idx - 1
        idx = np.where(np.abs(b.times[left] - a.times) <= np.abs(b.times[idx] - a.times), left, idx)
    keep = np.flatnonzero(np.abs(b.times[idx] - a.times) <= max_dt + 1e-12)
    if len(keep) == 0:
        raise EmptyPairingError(f"no stamps within {max_dt} s", max_dt=max_dt)
    return PairedPoses(a.times[keep], [a.poses[i] for i in keep], [b.poses[j] for j in idx[keep]])


def _check_pairs(pairs: PairedPoses) -> None:
    if len(pairs) < 2:
        raise ValueError(f"ATE needs at least 2 pairs, got {len(pairs)}")


def ate_position(pairs: PairedPoses) -> float:
    _check_pairs(pairs)
    gt = np.array([p.translation for p in pairs.gt])
    est = np.array([p.translation for p in pairs.est])
    return float(np.sqrt(np.mean(np.sum((gt - est) ** 2, axis=1))))


def ate_rotation(pairs: PairedPoses) -> float:
    """RMS rotation error in degrees."""
    _check_pairs(pairs)
    angles = [np.linalg.norm(log_so3(g.rotation.T @ e.rotation)) for g, e in zip(pairs.gt, pairs.est)]
    return float(np.degrees(np.sqrt(np.mean(np.square(angles)))))


def umeyama_se3(target: np.ndarray, source: np.ndarray) -> Pose:
    """Rigid T minimizing Σ‖target − T·source‖², no scale."""
    if len(target) < 3:
        raise DegenerateGeometryError(f"SE(3) alignment needs 3 pairs, got {len(target)}")
    ct, cs = target.mean(axis=0), source.mean(axis=0)
    cov = (target - ct).T @ (source - cs) / len(target)
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometryError("collinear positions leave the rotation unobservable")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return Pose(r, ct - r @ cs)


def align_for_eval(
    est: TrajectoryRecord,
    gt: TrajectoryRecord,
    mode: AlignmentMode = AlignmentMode.none,
    max_dt: float = 0.02,
) -> TrajectoryRecord:
    mode = AlignmentMode(mode)
    if mode is AlignmentMode.none:
        return est
    pairs = associate_stamps(gt, est, max_dt)
    g = np.array([p.translation for p in pairs.gt])
    e = np.array([p.translation for p in pairs.est])
    if mode is AlignmentMode.yaw4dof:
        T = umeyama_yaw(g, e).T_WL
    else:
        T = umeyama_se3(g, e)
    return est.transformed(T, "W")


def evaluate(
    gt: TrajectoryRecord,
    est: TrajectoryRecord,
    alignment_mode: AlignmentMode = AlignmentMode.none,
    max_dt: float = 0.02,
    config_hash: str | None = None,
    seed: int | None = None,
) -> Metrics:
    aligned = align_for_eval(est, gt, alignment_mode, max_dt)
    pairs = associate_stamps(gt, aligned, max_dt)
    metrics = Metrics(
        config_hash=config_hash,
        seed=seed,
        ate_p_m=ate_position(pairs),
        ate_r_deg=ate_rotation(pairs),
        n_pairs=len(pairs),
        alignment_mode=AlignmentMode(alignment_mode),
    )
    logger.info("ATE_P %.3f m, ATE_R %.3f deg over %d pairs", metrics.ate_p_m, metrics.ate_r_deg, metrics.n_pairs)
    return metrics


def comparison_table(rows: list[dict]) -> pd.DataFrame:
    """Mean metrics per (scenario, mode) across seeds."""
    df = pd.DataFrame(rows)
    if df.empty:
        return pd.DataFrame(columns=["scenario", "mode", "runs", "mean_ate_p_m", "mean_ate_r_deg"])
    return (
        df.groupby(["scenario", "mode"], sort=True)
        .agg(runs=("seed", "count"), mean_ate_p_m=("ate_p_m", "mean"), mean_ate_r_deg=("ate_r_deg", "mean"))
        .reset_index()
    )
