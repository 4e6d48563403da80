"""Keyframe loop of the estimator in the three fusion modes.

vio-only runs the window on camera and IMU alone and reports in L.
vio-gps adds a GPS position factor whenever an alignment estimate exists.
vio-twin bootstraps with GPS, refines the alignment with registration
positions and, once T_WL is frozen, replaces GPS by map factors.
"""

import logging
import queue
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from src.alignment import FrameAligner
from src.errors import TwinLocError
from src.estimator.factors import GpsFactor, KeyframeState, derive_map_measurement, predict_state
from src.estimator.preintegration import preintegrate
from src.estimator.window import NoiseModel, SlidingWindow, StepReport, step_window
from src.evaluation import TrajectoryRecord
from src.geometry import Pose
from src.gnss import GpsFix
from src.models import CameraConfig, ExperimentConfig, Mode, RegistrationConfig
from src.registration import RegistrationResult, register_cloud
from src.simkit import FrameObservations, ImuStream
from src.twin import TwinMesh

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SensorData:
    imu: ImuStream
    frames: list[FrameObservations]
    fixes: list[GpsFix]
    initial: KeyframeState
    t_bc: Pose
    mesh: TwinMesh | None = None


@dataclass(frozen=True, eq=False)
class RegistrationJob:
    keyframe_id: int
    t: float
    points_body: np.ndarray
    T_LB: Pose
    T_WL: Pose

    @property
    def init(self) -> Pose:
        return self.T_WL @ self.T_LB


class RegistrationWorker:
    """Runs registrations on one background thread, or inline when deterministic."""

    def __init__(self, mesh: TwinMesh, config: RegistrationConfig, deterministic: bool = True):
        self.mesh = mesh
        self.config = config
        self._results: queue.Queue[RegistrationResult] = queue.Queue()
        self._futures: list[Future] = []
        self._executor = None if deterministic else ThreadPoolExecutor(max_workers=1, thread_name_prefix="registration")

    def _run(self, job: RegistrationJob) -> None:
        try:
            result = register_cloud(job.points_body, self.mesh, job.init, self.config)
        except TwinLocError as exc:
            result = RegistrationResult.failed(exc.detail, len(job.points_body))
        self._results.put(result.with_stamp(job.t, job.keyframe_id, T_LB=job.T_LB, T_WL=job.T_WL))

    def submit(self, job: RegistrationJob) -> None:
        if self._executor is None:
            self._run(job)
        else:
            self._futures.append(self._executor.submit(self._run, job))

    @property
    def pending(self) -> int:
        return sum(not f.done() for f in self._futures)

    def drain(self, wait: bool = False) -> list[RegistrationResult]:
        if wait:
            for f in self._futures:
                f.result()
        for f in [f for f in self._futures if f.done()]:
            # пробрасываем исключения потока
            f.result()
            self._futures.remove(f)
        results = []
        while True:
            try:
                results.append(self._results.get_nowait())
            except queue.Empty:
                return sorted(results, key=lambda r: r.keyframe_id)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)


@dataclass(eq=False)
class EstimatorOutput:
    trajectory: TrajectoryRecord
    states: list[KeyframeState]
    registrations: list[RegistrationResult]
    alignment: list
    diagnostics: list[dict]
    T_WL: Pose | None

    @property
    def registrations_converged(self) -> int:
        return sum(r.converged for r in self.registrations)


@dataclass(eq=False)
class _Recorded:
    state: KeyframeState
    T_WL: Pose | None


class Estimator:
    def __init__(self, config: ExperimentConfig, mode: Mode | str | None = None, camera: CameraConfig | None = None):
        self.config = config
        self.mode = Mode(mode or config.mode)
        self.camera = camera or config.camera
        est = config.estimator
        alignment = est.alignment
        if self.mode is Mode.vio_twin:
            alignment = alignment.model_copy(update={"require_registration": True})
        self.aligner = FrameAligner(alignment)
        self.noise = NoiseModel.from_config(config.noise)
        self.window: SlidingWindow | None = None
        self.worker: RegistrationWorker | None = None
        self.registrations: list[RegistrationResult] = []
        self.diagnostics: list[dict] = []
        self._recorded: list[_Recorded] = []
        self._frozen: Pose | None = None
        self._ready = False
        self._gps_skipped = 0

    # --- frame alignment --------------------------------------------------------

    @property
    def T_WL(self) -> Pose | None:
        if self._frozen is not None:
            return self._frozen
        return self.aligner.estimate.T_WL if self.aligner.estimate is not None else None

    def _update_frozen(self) -> None:
        if self._frozen is None and self.aligner.converged:
            self._frozen = self.aligner.estimate.T_WL
            logger.info("T_WL frozen: yaw %.2f deg", np.degrees(self.aligner.estimate.yaw))

    # --- helpers ----------------------------------------------------------------

    def _fix_near(self, fixes: list[GpsFix], stamps: np.ndarray, t: float) -> GpsFix | None:
        if len(stamps) == 0:
            return None
        k = int(np.argmin(np.abs(stamps - t)))
        fix = fixes[k]
        if abs(fix.t - t) > self.aligner.config.max_dt or fix.n_sats < self.config.estimator.gps_min_sats:
            return None
        return fix

    @property
    def _alignment_ready(self) -> bool:
        """Latched once an estimate rests on min_pairs pairs."""
        est = self.aligner.estimate
        if not self._ready and est is not None and est.n_pairs >= self.aligner.config.min_pairs:
            self._ready = True
        return self._ready or self._frozen is not None

    def _uses_gps_factor(self) -> bool:
        if self.mode is Mode.vio_gps:
            return self._alignment_ready
        if self.mode is Mode.vio_twin:
            return self._alignment_ready and self._frozen is None
        return False

    def _gps_factor(self, kf: KeyframeState, fix: GpsFix) -> GpsFactor | None:
        """Fix covariance plus the alignment uncertainty at kf, gated on the innovation."""
        cfg = self.config.estimator
        est = self.aligner.estimate
        T_WL = self.T_WL
        cov = fix.covariance + est.position_covariance(kf.pose.translation) + cfg.gps_min_sigma**2 * np.eye(3)
        if not np.all(np.isfinite(cov)):
            return None
        information = np.linalg.inv(cov)
        r = T_WL.transform(kf.pose.translation) - fix.position
        d2 = float(r @ information @ r)
        if d2 > cfg.gps_gate_chi2 and self._gps_skipped < cfg.gps_max_skipped:
            self._gps_skipped += 1
            logger.debug("keyframe %d: GPS fix gated out (d² = %.1f)", kf.id, d2)
            return None
        if d2 > cfg.gps_gate_chi2:
            logger.info("keyframe %d: accepting GPS fix after %d gated in a row", kf.id, self._gps_skipped)
        self._gps_skipped = 0
        return GpsFactor(kf.id, fix.position, information, T_WL)

    def _registration_job(self, kf: KeyframeState) -> RegistrationJob | None:
        if self.mode is not Mode.vio_twin or self.worker is None or not self._alignment_ready:
            return None
        cloud = self.window.landmark_cloud()
        points_body = kf.pose.inverse().transform(cloud)
        return RegistrationJob(kf.id, kf.t, points_body, kf.pose, self.T_WL)

    def _consume_registrations(self, wait: bool = False, incoming: int | None = None):
        """Feed finished registrations to the aligner or turn them into map factors.

        Returns the results and the map factor for the keyframe about to be inserted.
        """
        if self.worker is None:
            return [], None
        incoming_factor = None
        results = self.worker.drain(wait)
        for reg in results:
            self.registrations.append(reg)
            if not reg.converged:
                continue
            T_LB = reg.snapshot["T_LB"]
            if self._frozen is None:
                p_w = (reg.delta_T @ reg.snapshot["T_WL"] @ T_LB).translation
                self.aligner.add_registration(reg.t, p_w, T_LB.translation)
                self._update_frozen()
                continue
            if reg.snapshot["T_WL"] is not self._frozen:
                # запущена до фиксации T_WL
                continue
            factor = derive_map_measurement(reg, self._frozen, T_LB, reg.keyframe_id, reg.t)
            if reg.keyframe_id == incoming:
                incoming_factor = factor
            elif self.window.keyframe(reg.keyframe_id) is not None:
                self.window.map_factors[reg.keyframe_id] = factor
            else:
                logger.debug("registration for keyframe %d arrived after it left the window", reg.keyframe_id)
        return results, incoming_factor

    def _record_departed(self) -> None:
        while self.window.departed:
            self._recorded.append(_Recorded(self.window.departed.pop(0), self.T_WL))

    def _diagnostics(self, kf: KeyframeState, report: StepReport, gps: bool, regs: list[RegistrationResult]) -> dict:
        own = [r for r in regs if r.keyframe_id == kf.id]
        if own:
            status = "converged" if own[0].converged else "rejected"
        elif self.worker is not None and self.worker.pending:
            status = "pending"
        else:
            status = "none"
        est = self.aligner.estimate
        return {
            "keyframe_id": kf.id,
            "t": kf.t,
            "window_size": len(self.window),
            "iterations": report.iterations,
            "cost_before": report.cost_before,
            "cost_after": report.cost_after,
            "costs": report.costs,
            "n_landmarks": report.n_landmarks,
            "n_observations": report.n_observations,
            "gps_factor": gps,
            "map_factors": len(self.window.map_factors),
            "registration": status,
            "alignment_phase": est.source if est is not None else None,
            "alignment_converged": self.aligner.converged,
        }

    def _check_registrations(self) -> None:
        if not self.registrations:
            logger.warning(
                "vio-twin finished without registrations: alignment never got %d pairs, the result rests on GPS alone",
                self.aligner.config.min_pairs,
            )
        elif not any(r.converged for r in self.registrations):
            logger.warning("vio-twin finished with %d registrations, none converged", len(self.registrations))

    # --- main loop --------------------------------------------------------------

    def run(self, data: SensorData) -> EstimatorOutput:
        cfg = self.config.estimator
        self.window = SlidingWindow(cfg, self.camera, data.t_bc, self.noise)
        if self.mode is Mode.vio_twin:
            if data.mesh is None:
                raise ValueError("vio-twin needs the twin mesh")
            self.worker = RegistrationWorker(data.mesh, cfg.registration, cfg.deterministic)
        fixes = sorted(data.fixes, key=lambda f: f.t)
        stamps = np.array([f.t for f in fixes], dtype=float)
        keyframes = data.frames[:: cfg.keyframe_stride]
        if not keyframes:
            raise ValueError("no camera frames to estimate from")
        logger.info("estimating %d keyframes in mode %s", len(keyframes), self.mode.value)

        try:
            for kf_id, frame in enumerate(keyframes):
                if kf_id == 0:
                    kf = KeyframeState(0, frame.t, data.initial.pose, data.initial.velocity,
                                       data.initial.gyro_bias, data.initial.accel_bias)
                    pre = None
                else:
                    prev = self.window.newest
                    pre = preintegrate(
                        data.imu, prev.t, frame.t, prev.gyro_bias, prev.accel_bias,
                        self.noise.gyro_noise_density, self.noise.accel_noise_density,
                        nominal_period=data.imu.period,
                    )
                    kf = predict_state(prev, pre, kf_id, frame.t)

                fix = self._fix_near(fixes, stamps, frame.t) if self.mode is not Mode.vio_only else None
                gps_factor = None
                if fix is not None and self._uses_gps_factor():
                    gps_factor = self._gps_factor(kf, fix)

                job = self._registration_job(kf) if kf_id > 0 else None
                if job is not None:
                    self.worker.submit(job)
                regs, map_factor = self._consume_registrations(incoming=kf.id)

                report = step_window(
                    self.window, kf, frame.landmark_ids, frame.pixels, preintegrated=pre,
                    map_factor=map_factor, gps_factor=gps_factor,
                )
                if fix is not None and self.mode is not Mode.vio_only:
                    self.aligner.add_gps(fix.t, fix.position, self.window.newest.pose.translation)
                    self._update_frozen()
                self._record_departed()
                self.diagnostics.append(self._diagnostics(self.window.newest, report, gps_factor is not None, regs))
            self._consume_registrations(wait=True)
        finally:
            if self.worker is not None:
                self.worker.close()

        if self.mode is Mode.vio_twin:
            self._check_registrations()
        for kf in self.window.keyframes:
            self._recorded.append(_Recorded(kf, self.T_WL))
        return self._output()

    def _output(self) -> EstimatorOutput:
        states = [r.state for r in self._recorded]
        if self.mode is Mode.vio_only:
            traj = TrajectoryRecord([s.t for s in states], [s.pose for s in states], "L", self.mode.value)
            return EstimatorOutput(traj, states, self.registrations, self.aligner.history, self.diagnostics, None)
        first = next((r.T_WL for r in self._recorded if r.T_WL is not None), None)
        if first is None:
            logger.warning("no alignment estimate was ever available, reporting in L")
            traj = TrajectoryRecord([s.t for s in states], [s.pose for s in states], "L", self.mode.value)
            return EstimatorOutput(traj, states, self.registrations, self.aligner.history, self.diagnostics, None)
        poses = [(r.T_WL or first) @ r.state.pose for r in self._recorded]
        traj = TrajectoryRecord([s.t for s in states], poses, "W", self.mode.value)
        return EstimatorOutput(traj, states, self.registrations, self.aligner.history, self.diagnostics, self.T_WL)
