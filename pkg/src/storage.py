"""Scenario bundle and run artifacts on disk (CSV through pandas, JSON, OBJ)."""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from src.alignment import AlignmentEstimate
from src.evaluation import TrajectoryRecord
from src.geometry import Pose
from src.gnss import GpsFix
from src.models import CameraConfig
from src.registration import RegistrationResult
from src.simkit import FrameObservations, ImuStream

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

MESH_FILE = "mesh.obj"
GROUND_TRUTH_FILE = "ground_truth.csv"
IMU_FILE = "imu.csv"
OBSERVATIONS_FILE = "observations.csv"
FIXES_FILE = "gps_fixes.csv"
LANDMARKS_FILE = "landmarks.csv"
MANIFEST_FILE = "manifest.json"
BUNDLE_FILES = (MESH_FILE, GROUND_TRUTH_FILE, IMU_FILE, OBSERVATIONS_FILE, FIXES_FILE)

ESTIMATE_FILE = "estimate.csv"
DIAGNOSTICS_FILE = "diagnostics.json"
REGISTRATION_LOG_FILE = "registrations.csv"
ALIGNMENT_LOG_FILE = "alignment.csv"
METRICS_FILE = "metrics.json"
GNSS_MODEL_FILE = "gnss_model.json"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(df: pd.DataFrame, path: str | Path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_json(data, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


# --- ground truth --------------------------------------------------------------


def write_ground_truth(path, times, poses: list[Pose], velocities: np.ndarray) -> None:
    df = TrajectoryRecord(times, poses, "W", "ground_truth").to_frame()
    velocities = np.asarray(velocities, dtype=float).reshape(-1, 3)
    df["vx"], df["vy"], df["vz"] = velocities[:, 0], velocities[:, 1], velocities[:, 2]
    write_csv(df, path)


def read_ground_truth(path) -> tuple[TrajectoryRecord, np.ndarray]:
    df = pd.read_csv(path)
    return TrajectoryRecord.from_frame(df, "ground_truth"), df[["vx", "vy", "vz"]].to_numpy(float)


def write_trajectory(record: TrajectoryRecord, path) -> None:
    write_csv(record.to_frame(), path)


def read_trajectory(path, source: str = "") -> TrajectoryRecord:
    return TrajectoryRecord.from_frame(pd.read_csv(path), source)


# --- IMU -----------------------------------------------------------------------

_IMU_COLUMNS = ["t", "gx", "gy", "gz", "ax", "ay", "az"]
_BIAS_COLUMNS = ["bgx", "bgy", "bgz", "bax", "bay", "baz"]


def write_imu(stream: ImuStream, path) -> None:
    df = pd.DataFrame(np.column_stack([stream.t, stream.gyro, stream.accel]), columns=_IMU_COLUMNS)
    if stream.gyro_bias is not None and stream.accel_bias is not None:
        df[_BIAS_COLUMNS] = np.column_stack([stream.gyro_bias, stream.accel_bias])
    write_csv(df, path)


def read_imu(path) -> ImuStream:
    df = pd.read_csv(path)
    bias = all(c in df.columns for c in _BIAS_COLUMNS)
    return ImuStream(
        df["t"].to_numpy(float),
        df[["gx", "gy", "gz"]].to_numpy(float),
        df[["ax", "ay", "az"]].to_numpy(float),
        df[_BIAS_COLUMNS[:3]].to_numpy(float) if bias else None,
        df[_BIAS_COLUMNS[3:]].to_numpy(float) if bias else None,
    )


# --- camera observations -------------------------------------------------------


def write_observations(frames: list[FrameObservations], path) -> None:
    rows = [
        (k, f.t, int(i), float(px[0]), float(px[1]))
        for k, f in enumerate(frames)
        for i, px in zip(f.landmark_ids, f.pixels)
    ]
    write_csv(pd.DataFrame(rows, columns=["frame", "t", "landmark_id", "u", "v"]), path)


def read_observations(path, frame_times, camera: CameraConfig) -> list[FrameObservations]:
    """Frames are rebuilt from the camera stamps so that empty frames survive."""
    df = pd.read_csv(path)
    groups = {k: g for k, g in df.groupby("frame", sort=True)}
    frames = []
    for k, t in enumerate(frame_times):
        g = groups.get(k)
        if g is None:
            frames.append(FrameObservations(float(t), np.zeros(0, dtype=np.int64), np.zeros((0, 2)), camera))
        else:
            frames.append(
                FrameObservations(float(t), g["landmark_id"].to_numpy(np.int64), g[["u", "v"]].to_numpy(float), camera)
            )
    return frames


def write_landmarks(points: np.ndarray, normals: np.ndarray, path) -> None:
    df = pd.DataFrame(np.column_stack([points, normals]), columns=["x", "y", "z", "nx", "ny", "nz"])
    df.insert(0, "id", np.arange(len(df)))
    write_csv(df, path)


# --- GPS fixes -----------------------------------------------------------------

_COV_COLUMNS = [f"c{i}{j}" for i in range(3) for j in range(3)]


def write_fixes(fixes: list[GpsFix], path) -> None:
    rows = [[f.t, *f.position, *np.asarray(f.covariance).ravel(), f.n_sats] for f in fixes]
    write_csv(pd.DataFrame(rows, columns=["t", "x", "y", "z", *_COV_COLUMNS, "n_sats"]), path)


def read_fixes(path) -> list[GpsFix]:
    df = pd.read_csv(path)
    return [
        GpsFix(
            float(row["t"]),
            row[["x", "y", "z"]].to_numpy(float),
            row[_COV_COLUMNS].to_numpy(float).reshape(3, 3),
            int(row["n_sats"]),
        )
        for _, row in df.iterrows()
    ]


# --- run logs ------------------------------------------------------------------


def write_registration_log(results: list[RegistrationResult], path) -> None:
    rows = [{"keyframe_id": r.keyframe_id, **r.log_row()} for r in results]
    columns = ["keyframe_id", "t", "converged", "inlier_count", "gamma", "trace_h"] + [f"w_eig_{k}" for k in range(6)]
    write_csv(pd.DataFrame(rows, columns=columns), path)


def write_alignment_log(history: list[AlignmentEstimate], path) -> None:
    columns = ["t", "phase", "yaw", "t_x", "t_y", "t_z", "heading_variance", "converged"]
    write_csv(pd.DataFrame([e.log_row() for e in history], columns=columns), path)


# --- manifest ------------------------------------------------------------------


def write_manifest(out_dir, config_dump: dict, config_hash: str, seed: int, files=BUNDLE_FILES, **extra) -> dict:
    out_dir = Path(out_dir)
    manifest = {
        "config": config_dump,
        "config_hash": config_hash,
        "seed": seed,
        "files": {name: file_sha256(out_dir / name) for name in files if (out_dir / name).exists()},
        **extra,
    }
    write_json(manifest, out_dir / MANIFEST_FILE)
    logger.info("wrote manifest for %d files in %s", len(manifest["files"]), out_dir)
    return manifest


def read_manifest(bundle_dir) -> dict:
    return read_json(Path(bundle_dir) / MANIFEST_FILE)

