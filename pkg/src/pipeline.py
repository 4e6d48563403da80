"""Experiment stages: simulate a scenario, fit GNSS models, run the estimator, evaluate, benchmark.

Every stage reads and writes through `src.storage`; randomness comes from
named sub-streams of the experiment seed.
"""

import asyncio
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from src import storage
from src.database.requests import add_run
from src.database.session import create_tables, make_sessionmaker
from src.errors import ConfigError
from src.estimator.engine import Estimator, EstimatorOutput, SensorData
from src.estimator.factors import KeyframeState
from src.evaluation import TrajectoryRecord, comparison_table, evaluate
from src.geometry import Pose
from src.gnss import GnssModels, GpsFix, fit_models, generate_fix_stream, load_models, save_models
from src.models import AlignmentMode, BenchConfig, ExperimentConfig, Metrics, Mode, RunCreate
from src.seeding import substream
from src.simkit import (
    FrameObservations,
    ImuStream,
    build_trajectory,
    camera_extrinsics,
    generate_city,
    synthesize_imu,
    synthesize_observations,
)
from src.twin import TwinMesh, load_mesh, sample_surface, save_mesh

logger = logging.getLogger(__name__)

ISOTROPIC_SUFFIX = "-isotropic"


# --- configuration -------------------------------------------------------------


def _validation_error(exc: ValidationError, source: str) -> ConfigError:
    errors = [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]} for e in exc.errors()]
    first = errors[0]
    return ConfigError(f"{source}: {first['loc'] or '<root>'}: {first['msg']}", errors=errors)


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path, **overrides) -> ExperimentConfig:
    data = _read_yaml(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise _validation_error(exc, str(path)) from exc


def load_bench_config(path) -> BenchConfig:
    try:
        return BenchConfig.model_validate(_read_yaml(path))
    except ValidationError as exc:
        raise _validation_error(exc, str(path)) from exc


def with_updates(config: ExperimentConfig, **updates) -> ExperimentConfig:
    """Re-validated copy with dotted-path updates, e.g. estimator.deterministic=True."""
    data = config.model_dump(mode="json")
    for dotted, value in updates.items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise _validation_error(exc, "override") from exc


# --- scenario ------------------------------------------------------------------


@dataclass(eq=False)
class Scenario:
    config: ExperimentConfig
    mesh: TwinMesh
    ground_truth: TrajectoryRecord
    velocities: np.ndarray
    imu: ImuStream
    frames: list[FrameObservations]
    fixes: list[GpsFix]
    t_bc: Pose

    def sensor_data(self) -> SensorData:
        """Estimator input; L is the gravity-aligned frame of the first body pose."""
        T_WL = self.ground_truth.poses[0]
        v_L = T_WL.rotation.T @ self.velocities[0]
        initial = KeyframeState(0, float(self.ground_truth.times[0]), Pose.identity(), v_L)
        return SensorData(self.imu, self.frames, self.fixes, initial, self.t_bc, self.mesh)


def build_gnss_models(config: ExperimentConfig, mesh: TwinMesh) -> GnssModels:
    if config.gnss.model_path:
        return load_models(config.gnss.model_path)
    models, _ = fit_models(mesh, config.gnss, substream(config.seed, "gmm-init"))
    return models


def simulate(config: ExperimentConfig, models: GnssModels | None = None) -> tuple[Scenario, np.ndarray, np.ndarray]:
    """In-memory scenario plus the landmark points and normals it was observed from."""
    seed = config.seed
    scene = config.scene
    if scene.mesh_path:
        mesh = load_mesh(scene.mesh_path)
    else:
        mesh = generate_city(scene.city, substream(seed, "city"))
    traj = build_trajectory(config.trajectory, scene.city)
    landmarks = sample_surface(mesh, scene.landmark_density, substream(seed, "landmarks"))
    imu = synthesize_imu(traj, config.imu_rate_hz, config.noise, substream(seed, "imu"))
    t_bc = camera_extrinsics(config.camera.pitch_deg)
    frames = synthesize_observations(
        traj, landmarks, config.camera, config.camera.rate_hz, config.noise, mesh.index, substream(seed, "pixels"), t_bc
    )
    models = models or build_gnss_models(config, mesh)
    fixes = generate_fix_stream(traj, models, config.gnss, substream(seed, "gnss"), mesh.index)
    times = np.array([f.t for f in frames])
    gt = TrajectoryRecord(times, [traj.pose(t) for t in times], "W", "ground_truth")
    velocities = traj.velocity(times)
    logger.info(
        "simulated %.1f s (%.1f m path): %d frames, %d IMU samples, %d fixes, %d landmarks",
        traj.duration,
        traj.path_length(),
        len(frames),
        len(imu),
        len(fixes),
        len(landmarks),
    )
    return Scenario(config, mesh, gt, velocities, imu, frames, fixes, t_bc), landmarks.points, landmarks.normals


def cmd_simulate(config: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario, points, normals = simulate(config)
    save_mesh(scenario.mesh, out / storage.MESH_FILE)
    storage.write_ground_truth(
        out / storage.GROUND_TRUTH_FILE, scenario.ground_truth.times, scenario.ground_truth.poses, scenario.velocities
    )
    storage.write_imu(scenario.imu, out / storage.IMU_FILE)
    storage.write_observations(scenario.frames, out / storage.OBSERVATIONS_FILE)
    storage.write_fixes(scenario.fixes, out / storage.FIXES_FILE)
    storage.write_landmarks(points, normals, out / storage.LANDMARKS_FILE)
    return storage.write_manifest(
        out,
        config.model_dump(mode="json"),
        config.config_hash(),
        config.seed,
        files=storage.BUNDLE_FILES + (storage.LANDMARKS_FILE,),
    )


def load_bundle(bundle_dir) -> Scenario:
    bundle = Path(bundle_dir)
    missing = [name for name in storage.BUNDLE_FILES + (storage.MANIFEST_FILE,) if not (bundle / name).exists()]
    if missing:
        raise ConfigError(f"bundle {bundle} is incomplete", missing=missing)
    manifest = storage.read_manifest(bundle)
    try:
        config = ExperimentConfig.model_validate(manifest["config"])
    except ValidationError as exc:
        raise _validation_error(exc, str(bundle / storage.MANIFEST_FILE)) from exc
    gt, velocities = storage.read_ground_truth(bundle / storage.GROUND_TRUTH_FILE)
    return Scenario(
        config=config,
        mesh=load_mesh(bundle / storage.MESH_FILE),
        ground_truth=gt,
        velocities=velocities,
        imu=storage.read_imu(bundle / storage.IMU_FILE),
        frames=storage.read_observations(bundle / storage.OBSERVATIONS_FILE, gt.times, config.camera),
        fixes=storage.read_fixes(bundle / storage.FIXES_FILE),
        t_bc=camera_extrinsics(config.camera.pitch_deg),
    )


# --- GNSS models ---------------------------------------------------------------


def cmd_gps_model(bundle_dir, out_path=None, samples: int | None = None, k: int | None = None, seed: int | None = None) -> dict:
    scenario = load_bundle(bundle_dir)
    config = scenario.config
    gnss = config.gnss.model_copy(
        update={
            key: value
            for key, value in {"n_training_samples": samples, "gmm_components": k}.items()
            if value is not None
        }
    )
    root = config.seed if seed is None else seed
    models, sets = fit_models(scenario.mesh, gnss, substream(root, "gmm-init"))
    out_path = Path(out_path) if out_path else Path(bundle_dir) / storage.GNSS_MODEL_FILE
    save_models(models, out_path)
    summary = {
        "model_path": str(out_path),
        "n_count_samples": int(len(sets.counts)),
        "n_multipath_samples": int(len(sets.multipath_errors)),
        "gp": {
            "length_scale": models.gp.length_scale,
            "signal_variance": models.gp.signal_variance,
            "noise_variance": models.gp.noise_variance,
            "prior_mean": models.gp.prior_mean,
        },
        "gmm_log_likelihood": {str(b): g.log_likelihood[-1] for b, g in sorted(models.gmm.bins.items())},
    }
    logger.info("fitted GNSS models on %d samples into %s", len(sets.counts), out_path)
    return summary


# --- estimation and evaluation -------------------------------------------------


def eval_alignment_mode(output: EstimatorOutput) -> AlignmentMode:
    return AlignmentMode.yaw4dof if output.trajectory.frame == "L" else AlignmentMode.none


def write_run(output: EstimatorOutput, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    storage.write_trajectory(output.trajectory, out / storage.ESTIMATE_FILE)
    storage.write_json(output.diagnostics, out / storage.DIAGNOSTICS_FILE)
    storage.write_registration_log(output.registrations, out / storage.REGISTRATION_LOG_FILE)
    storage.write_alignment_log(output.alignment, out / storage.ALIGNMENT_LOG_FILE)


def run_scenario(scenario: Scenario, mode: Mode | str, deterministic: bool | None = None) -> EstimatorOutput:
    config = scenario.config
    if deterministic is not None:
        config = with_updates(config, **{"estimator.deterministic": deterministic})
    return Estimator(config, Mode(mode)).run(scenario.sensor_data())


def cmd_run(bundle_dir, mode: Mode | str | None = None, out_dir=None, deterministic: bool | None = None) -> dict:
    scenario = load_bundle(bundle_dir)
    mode = Mode(mode or scenario.config.mode)
    started = time.perf_counter()
    output = run_scenario(scenario, mode, deterministic)
    runtime = time.perf_counter() - started
    out = Path(out_dir) if out_dir else Path(bundle_dir) / f"run-{mode.value}"
    write_run(output, out)
    metrics = evaluate(
        scenario.ground_truth,
        output.trajectory,
        eval_alignment_mode(output),
        config_hash=scenario.config.config_hash(),
        seed=scenario.config.seed,
    )
    storage.write_json(metrics.model_dump(mode="json"), out / storage.METRICS_FILE)
    logger.info("run %s finished in %.1f s", mode.value, runtime)
    return {
        "mode": mode.value,
        "out": str(out),
        "frame": output.trajectory.frame,
        "keyframes": len(output.states),
        "registrations_attempted": len(output.registrations),
        "registrations_converged": output.registrations_converged,
        "metrics": metrics.model_dump(mode="json"),
    }


def cmd_evaluate(gt_path, est_path, alignment_mode: AlignmentMode | str = AlignmentMode.none, out_path=None, max_dt: float = 0.02) -> Metrics:
    gt = storage.read_trajectory(gt_path, "ground_truth")
    est = storage.read_trajectory(est_path, "estimate")
    metrics = evaluate(gt, est, AlignmentMode(alignment_mode), max_dt)
    if out_path:
        storage.write_json(metrics.model_dump(mode="json"), out_path)
    return metrics


# --- benchmark -----------------------------------------------------------------


@dataclass(frozen=True)
class BenchJob:
    scenario: str
    config_path: str
    seed: int
    modes: tuple[str, ...]
    max_dt: float


def _mode_variants(mode: str) -> tuple[Mode, bool]:
    if mode.endswith(ISOTROPIC_SUFFIX):
        return Mode(mode[: -len(ISOTROPIC_SUFFIX)]), False
    return Mode(mode), True


def run_bench_job(job: BenchJob) -> list[dict]:
    """One (scenario, seed) cell: simulate once, run every mode on the same data."""
    config = load_config(job.config_path, seed=job.seed)
    config = with_updates(config, **{"estimator.deterministic": True})
    scenario, _, _ = simulate(config)
    rows = []
    for label in job.modes:
        mode, adaptive = _mode_variants(label)
        cfg = with_updates(config, **{"estimator.registration.adaptive_weighting": adaptive})
        started = time.perf_counter()
        output = Estimator(cfg, mode).run(scenario.sensor_data())
        runtime = time.perf_counter() - started
        align = eval_alignment_mode(output)
        metrics = evaluate(scenario.ground_truth, output.trajectory, align, job.max_dt, cfg.config_hash(), job.seed)
        rows.append(
            {
                "scenario": job.scenario,
                "mode": label,
                "seed": job.seed,
                "config_hash": cfg.config_hash(),
                "alignment_mode": align.value,
                "ate_p_m": metrics.ate_p_m,
                "ate_r_deg": metrics.ate_r_deg,
                "n_pairs": metrics.n_pairs,
                "registrations_attempted": len(output.registrations),
                "registrations_converged": output.registrations_converged,
                "runtime_s": runtime,
                "attempts": [{"keyframe_id": r.keyframe_id, **r.log_row()} for r in output.registrations],
            }
        )
        logger.info("%s seed %d %s: ATE_P %.3f m, ATE_R %.3f deg", job.scenario, job.seed, label, metrics.ate_p_m, metrics.ate_r_deg)
    return rows


def bench_jobs(bench: BenchConfig, bench_path) -> list[BenchJob]:
    base = Path(bench_path).parent
    jobs = []
    for cell in bench.cells:
        modes = [m.value for m in cell.modes]
        if cell.isotropic_ablation:
            modes += [m.value + ISOTROPIC_SUFFIX for m in cell.modes if m is Mode.vio_twin]
        for seed in bench.seeds:
            jobs.append(BenchJob(cell.scenario, str(base / cell.config), seed, tuple(modes), bench.max_dt))
    return jobs


async def store_rows(db_url: str, rows: list[dict]) -> list[int]:
    engine, sessionmaker = make_sessionmaker(db_url)
    await create_tables(engine)
    ids = []
    async with sessionmaker() as db:
        for row in rows:
            run = RunCreate.model_validate({k: v for k, v in row.items() if k != "attempts"})
            stored = await add_run(run, row["attempts"], db)
            ids.append(stored.id)
    await engine.dispose()
    return ids


def cmd_bench(bench_path, out_dir, db_url: str | None = None, workers: int | None = None) -> dict:
    bench = load_bench_config(bench_path)
    jobs = bench_jobs(bench, bench_path)
    # проверяем конфиги до долгого прогона
    for path in sorted({j.config_path for j in jobs}):
        load_config(path, seed=0)
    workers = workers or bench.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_bench_job, jobs))
    else:
        results = [run_bench_job(job) for job in jobs]
    rows = sorted((row for cell in results for row in cell), key=lambda r: (r["scenario"], r["mode"], r["seed"]))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # runtime_s исключён: файл метрик побайтно совпадает между прогонами
    metrics = [{k: v for k, v in row.items() if k not in ("attempts", "runtime_s")} for row in rows]
    storage.write_json({"bench": bench.name, "runs": metrics}, out / "bench_metrics.json")
    table = comparison_table(metrics)
    storage.write_csv(table, out / "comparison.csv")
    if db_url:
        asyncio.run(store_rows(db_url, rows))
    logger.info("bench %s: %d runs", bench.name, len(rows))
    return {"bench": bench.name, "runs": len(rows), "comparison": table.to_dict(orient="records")}
