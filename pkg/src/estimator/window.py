"""Sliding-window nonlinear least squares.

Landmarks are eliminated by a Schur complement over their 3×3 blocks, the
reduced keyframe system is solved densely. Levenberg-Marquardt with
Marquardt scaling and gain-ratio damping updates.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from src.errors import SolverDivergedError
from src.estimator.factors import (
    STATE_DIM,
    GpsFactor,
    KeyframeState,
    Landmark,
    MapFactor,
    huber_cost,
    huber_weights,
    visual_residuals,
)
from src.estimator.marginalization import WindowPrior, assemble, keyframe_terms, marginalize_or_drop
from src.estimator.preintegration import PreintegratedImu
from src.geometry import Pose
from src.models import CameraConfig, EstimatorConfig, NoiseConfig

logger = logging.getLogger(__name__)

FAMILIES = ("visual", "imu", "bias", "map", "gps", "prior")
# шаг ниже этого уже на уровне округления
MIN_STEP = 1e-10


@dataclass(frozen=True)
class NoiseModel:
    """Noise levels used for weighting, floored so that every information is finite."""

    pixel_sigma: float
    gyro_noise_density: float
    accel_noise_density: float
    gyro_bias_walk: float
    accel_bias_walk: float

    @classmethod
    def from_config(cls, noise: NoiseConfig) -> "NoiseModel":
        return cls(
            max(noise.pixel_sigma, 0.05),
            max(noise.gyro_noise_density, 1e-5),
            max(noise.accel_noise_density, 1e-4),
            max(noise.gyro_bias_walk, 1e-6),
            max(noise.accel_bias_walk, 1e-5),
        )


@dataclass(eq=False)
class SlidingWindow:
    config: EstimatorConfig
    camera: CameraConfig
    t_bc: Pose
    noise: NoiseModel
    keyframes: list[KeyframeState] = field(default_factory=list)
    landmarks: dict[int, Landmark] = field(default_factory=dict)
    imu: dict[int, PreintegratedImu] = field(default_factory=dict)
    map_factors: dict[int, MapFactor] = field(default_factory=dict)
    gps_factors: dict[int, GpsFactor] = field(default_factory=dict)
    prior: WindowPrior | None = None
    dropped: set[int] = field(default_factory=set)
    departed: list[KeyframeState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def newest(self) -> KeyframeState:
        return self.keyframes[-1]

    def keyframe(self, kf_id: int) -> KeyframeState | None:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        return None

    def active_landmarks(self) -> list[Landmark]:
        ids = {kf.id for kf in self.keyframes}
        return [
            lm
            for _, lm in sorted(self.landmarks.items())
            if lm.initialized and sum(k in ids for k in lm.observations) >= 2
        ]

    def landmark_cloud(self) -> np.ndarray:
        active = self.active_landmarks()
        if not active:
            return np.zeros((0, 3))
        return np.array([lm.position for lm in active])


# --- the optimization problem --------------------------------------------------


class WindowProblem:
    """Snapshot of the window's variables and visual observations for one LM solve."""

    def __init__(self, window: SlidingWindow):
        self.window = window
        self.ids = [kf.id for kf in window.keyframes]
        self.col = {kf_id: k for k, kf_id in enumerate(self.ids)}
        self.landmark_ids = [lm.id for lm in window.active_landmarks()]
        lm_col = {lm_id: k for k, lm_id in enumerate(self.landmark_ids)}
        kf_idx, lm_idx, pixels = [], [], []
        for lm_id in self.landmark_ids:
            for kf_id, px in sorted(window.landmarks[lm_id].observations.items()):
                if kf_id in self.col:
                    kf_idx.append(self.col[kf_id])
                    lm_idx.append(lm_col[lm_id])
                    pixels.append(px)
        self.kf_idx = np.asarray(kf_idx, dtype=np.int64)
        self.lm_idx = np.asarray(lm_idx, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.sigma = window.noise.pixel_sigma
        self.delta = window.config.huber_px / self.sigma

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_ids)

    def initial(self):
        states = list(self.window.keyframes)
        points = np.array([self.window.landmarks[i].position for i in self.landmark_ids]).reshape(-1, 3)
        return states, points

    def _visual(self, states, points):
        rot = np.array([s.pose.rotation for s in states])
        trans = np.array([s.pose.translation for s in states])
        return visual_residuals(
            rot[self.kf_idx], trans[self.kf_idx], points[self.lm_idx], self.pixels, self.window.camera, self.window.t_bc
        )

    def cost(self, states, points) -> dict[str, float]:
        costs = dict.fromkeys(FAMILIES, 0.0)
        if len(self.kf_idx):
            e, _, _, valid = self._visual(states, points)
            s = np.linalg.norm(e[valid], axis=1) / self.sigma
            costs["visual"] = 0.5 * float(huber_cost(s, self.delta).sum())
        for term in keyframe_terms(self.window, dict(zip(self.ids, states))):
            costs[term.family] += term.cost()
        return costs

    def linearize(self, states, points):
        P = STATE_DIM * len(states)
        L = self.n_landmarks
        terms = keyframe_terms(self.window, dict(zip(self.ids, states)))
        Hpp, gp = assemble(terms, self.ids)
        Hpl = np.zeros((len(states), L, 6, 3))
        Hll = np.zeros((L, 3, 3))
        gl = np.zeros((L, 3))
        if len(self.kf_idx):
            e, Jp, Jl, valid = self._visual(states, points)
            s = np.linalg.norm(e, axis=1) / self.sigma
            w = np.where(valid, huber_weights(s, self.delta), 0.0) / self.sigma**2
            wJp = Jp * w[:, None, None]
            wJl = Jl * w[:, None, None]
            pp = np.einsum("nai,naj->nij", wJp, Jp)
            for k in range(len(states)):
                sel = self.kf_idx == k
                base = STATE_DIM * k
                Hpp[base : base + 6, base : base + 6] += pp[sel].sum(axis=0)
                gp[base : base + 6] += np.einsum("nai,na->i", wJp[sel], e[sel])
            np.add.at(Hpl, (self.kf_idx, self.lm_idx), np.einsum("nai,naj->nij", wJp, Jl))
            np.add.at(Hll, self.lm_idx, np.einsum("nai,naj->nij", wJl, Jl))
            np.add.at(gl, self.lm_idx, np.einsum("nai,na->ni", wJl, e))
        full_pl = np.zeros((len(states), STATE_DIM, L, 3))
        full_pl[:, :6] = Hpl.transpose(0, 2, 1, 3)
        return Hpp, gp, full_pl.reshape(P, L, 3), Hll, gl

    def solve(self, Hpp, gp, Hpl, Hll, gl, lam: float):
        """Damped step (dx_pose, dx_points) and the predicted cost decrease."""
        Dp = np.maximum(np.diag(Hpp), 1e-9)
        Dl = np.maximum(np.einsum("lii->li", Hll), 1e-9)
        A = Hpp + lam * np.diag(Dp)
        Hll_d = Hll + lam * np.einsum("li,ij->lij", Dl, np.eye(3))
        if self.n_landmarks:
            Hll_inv = np.linalg.inv(Hll_d)
            tmp = np.einsum("pli,lij->plj", Hpl, Hll_inv)
            S = A - np.einsum("plj,qlj->pq", tmp, Hpl)
            b = -(gp - np.einsum("plj,lj->p", tmp, gl))
        else:
            S, b = A, -gp
        S = 0.5 * (S + S.T)
        try:
            dx = linalg.cho_solve(linalg.cho_factor(S), b)
        except linalg.LinAlgError:
            dx = linalg.lstsq(S, b)[0]
        if self.n_landmarks:
            dl = -np.einsum("lij,lj->li", Hll_inv, gl + np.einsum("pli,p->li", Hpl, dx))
        else:
            dl = np.zeros((0, 3))
        g_dot = gp @ dx + np.sum(gl * dl)
        damp = lam * (np.sum(Dp * dx * dx) + np.sum(Dl * dl * dl))
        predicted = 0.5 * (damp - g_dot)
        return dx, dl, predicted

    def apply(self, states, points, dx, dl):
        new_states = [s.retract(dx[STATE_DIM * k : STATE_DIM * (k + 1)]) for k, s in enumerate(states)]
        return new_states, points + dl


@dataclass
class StepReport:
    keyframe_id: int
    iterations: int
    cost_before: float
    cost_after: float
    costs: dict[str, float]
    accepted: int
    rejected: int
    n_landmarks: int
    n_observations: int
    history: list[float] = field(default_factory=list)


def optimize(window: SlidingWindow) -> StepReport:
    cfg = window.config
    problem = WindowProblem(window)
    states, points = problem.initial()
    costs = problem.cost(states, points)
    cost = sum(costs.values())
    report = StepReport(window.newest.id, 0, cost, cost, costs, 0, 0, problem.n_landmarks, len(problem.kf_idx), [cost])
    lam = cfg.lm_initial_lambda
    nu = 2.0
    rejections = 0
    for it in range(cfg.lm_max_iterations):
        report.iterations = it + 1
        system = problem.linearize(states, points)
        dx, dl, predicted = problem.solve(*system, lam)
        if predicted <= cfg.lm_rel_tol * cost or not np.all(np.isfinite(dx)):
            break
        if max(np.abs(dx).max(initial=0.0), np.abs(dl).max(initial=0.0)) < MIN_STEP:
            break
        cand_states, cand_points = problem.apply(states, points, dx, dl)
        cand_costs = problem.cost(cand_states, cand_points)
        cand = sum(cand_costs.values())
        rho = (cost - cand) / predicted
        if np.isfinite(cand) and cand < cost:
            decrease = cost - cand
            states, points, costs, cost = cand_states, cand_points, cand_costs, cand
            report.accepted += 1
            report.history.append(cost)
            rejections = 0
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            logger.debug("lm iter %d: cost %.6g, lambda %.3g", it, cost, lam)
            if decrease < cfg.lm_rel_tol * cost:
                break
        else:
            report.rejected += 1
            if predicted > 1e-12 * cost:
                rejections += 1
            if rejections >= cfg.lm_max_rejections:
                last_good = window.keyframes[-2].id if len(window) > 1 else None
                raise SolverDivergedError(
                    f"{rejections} consecutive LM rejections at keyframe {window.newest.id}",
                    last_good_keyframe=last_good,
                )
            lam *= nu
            nu *= 2.0

    window.keyframes = states
    for lm_id, p in zip(problem.landmark_ids, points):
        window.landmarks[lm_id].position = p
    report.cost_after = cost
    report.costs = costs
    return report


# --- landmarks -----------------------------------------------------------------


def triangulate(poses: list[Pose], pixels: list[np.ndarray], camera: CameraConfig, t_bc: Pose, min_parallax_deg: float = 0.0):
    """Linear triangulation in L; None for insufficient parallax or negative depth."""
    rows = []
    centers = []
    for T_LB, px in zip(poses, pixels):
        T_LC = T_LB @ t_bc
        T_CL = T_LC.inverse()
        P = np.hstack([T_CL.rotation, T_CL.translation[:, None]])
        x = (px[0] - camera.cx) / camera.fx
        y = (px[1] - camera.cy) / camera.fy
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
        centers.append(T_LC.translation)
    _, _, vt = np.linalg.svd(np.asarray(rows))
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        return None
    point = X[:3] / X[3]
    for T_LB in poses:
        T_CL = (T_LB @ t_bc).inverse()
        if T_CL.transform(point)[2] <= 1e-3:
            return None
    rays = point - np.asarray(centers)
    rays /= np.linalg.norm(rays, axis=1)[:, None]
    parallax = np.degrees(np.arccos(np.clip(rays @ rays.T, -1.0, 1.0))).max()
    if parallax < min_parallax_deg:
        return None
    return point


def add_observations(window: SlidingWindow, kf_id: int, landmark_ids, pixels) -> int:
    """Attach one keyframe's observations under the per-keyframe budget; returns the count kept."""
    budget = window.config.max_landmarks_per_keyframe
    ids = np.asarray(landmark_ids, dtype=np.int64)
    allowed = np.array([i not in window.dropped for i in ids], dtype=bool)
    ids, pixels = ids[allowed], np.asarray(pixels)[allowed]
    tracked = np.array([i in window.landmarks for i in ids], dtype=bool)
    order = np.lexsort((ids, ~tracked))[:budget]
    for k in order:
        lm = window.landmarks.setdefault(int(ids[k]), Landmark(int(ids[k])))
        lm.observations[kf_id] = np.asarray(pixels[k], dtype=float)
    return len(order)


def initialize_landmarks(window: SlidingWindow) -> int:
    poses = {kf.id: kf.pose for kf in window.keyframes}
    count = 0
    for lm in window.landmarks.values():
        if lm.initialized:
            continue
        obs = [(k, px) for k, px in sorted(lm.observations.items()) if k in poses]
        if len(obs) < 2:
            continue
        point = triangulate(
            [poses[k] for k, _ in obs], [px for _, px in obs], window.camera, window.t_bc, window.config.min_parallax_deg
        )
        if point is not None:
            lm.position = point
            count += 1
    return count


def step_window(
    window: SlidingWindow,
    keyframe: KeyframeState,
    landmark_ids=(),
    pixels=(),
    preintegrated: PreintegratedImu | None = None,
    map_factor: MapFactor | None = None,
    gps_factor: GpsFactor | None = None,
) -> StepReport:
    """Insert a keyframe with its factors, keep the window size, then solve."""
    if window.keyframes and keyframe.t <= window.newest.t:
        raise ValueError("keyframe timestamps must be strictly increasing")
    window.keyframes.append(keyframe)
    if window.prior is None:
        window.prior = WindowPrior.gauge(keyframe, window.config)
    if preintegrated is not None:
        window.imu[keyframe.id] = preintegrated
    if map_factor is not None:
        window.map_factors[keyframe.id] = map_factor
    if gps_factor is not None:
        window.gps_factors[keyframe.id] = gps_factor
    if len(landmark_ids):
        add_observations(window, keyframe.id, landmark_ids, pixels)
    while len(window) > window.config.window_size:
        marginalize_or_drop(window)
    initialize_landmarks(window)
    return optimize(window)
