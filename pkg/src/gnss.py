"""Urban-canyon GPS simulator.

Satellites are static directions at GPS orbit range. Visibility comes from
ray casts against the twin (or from the satellite-count GP), multipath from
a height-binned GMM fitted on one-bounce reflections, and fixes from
Gauss-Newton trilateration with a per-epoch clock bias.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel
from sklearn.mixture import GaussianMixture

from src.errors import (
    DegenerateComponentError,
    DegenerateGeometryError,
    InsufficientSamplesError,
    NonConvergenceError,
    SingularSystemError,
)
from src.models import GnssConfig
from src.seeding import as_generator
from src.twin import SpatialIndex, TwinMesh

logger = logging.getLogger(__name__)

EARTH_ORBIT_RADIUS = 26_560_000.0
GP_JITTER = 1e-8
MIN_VARIANCE = 1e-6
TRILATERATION_MAX_ITER = 50
MAX_CONDITION = 1e12
# дальности ~2.6e7 м: шаг ниже 1e-6 м уже на уровне округления
TRILATERATION_STEP_TOL_M = 1e-6
TRILATERATION_STALL_M = 1e-3

# азимут, угол места (градусы); не меньше 4 спутников выше маски 10°
_SKY_PLOT = [
    (0.0, 82.0), (40.0, 64.0), (115.0, 57.0), (200.0, 49.0), (290.0, 42.0),
    (160.0, 33.0), (250.0, 27.0), (330.0, 21.0), (75.0, 16.0), (20.0, 12.0),
    (135.0, 9.0), (310.0, 6.0),
]


@dataclass(frozen=True, eq=False)
class Constellation:
    positions: np.ndarray

    @classmethod
    def from_directions(cls, azimuth_deg, elevation_deg, radius: float = EARTH_ORBIT_RADIUS):
        az = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
        el = np.deg2rad(np.asarray(elevation_deg, dtype=float))
        dirs = np.column_stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
        return cls(dirs * radius)

    @classmethod
    def default(cls, n_satellites: int = 10) -> "Constellation":
        if not 4 <= n_satellites <= len(_SKY_PLOT):
            raise ValueError(f"n_satellites must be in [4, {len(_SKY_PLOT)}]")
        az, el = zip(*_SKY_PLOT[:n_satellites])
        return cls.from_directions(az, el)

    def __len__(self) -> int:
        return len(self.positions)

    def directions(self, pos: np.ndarray) -> np.ndarray:
        vec = self.positions - pos
        return vec / np.linalg.norm(vec, axis=1)[:, None]

    def elevations(self, pos: np.ndarray) -> np.ndarray:
        return np.arcsin(np.clip(self.directions(pos)[:, 2], -1.0, 1.0))


# --- visibility and reflections ------------------------------------------------


def visible_satellites(
    pos: np.ndarray,
    constellation: Constellation,
    index: SpatialIndex | None,
    elevation_mask_deg: float = 10.0,
) -> np.ndarray:
    """Indices of satellites above the mask whose line of sight is unblocked."""
    pos = np.asarray(pos, dtype=float)
    above = np.flatnonzero(constellation.elevations(pos) > np.deg2rad(elevation_mask_deg))
    if index is None or len(above) == 0:
        return above
    dirs = constellation.directions(pos)[above]
    t, _ = index.ray_cast(np.tile(pos, (len(above), 1)), dirs)
    return above[~np.isfinite(t)]


def facade_normals(mesh: TwinMesh, tol: float = 1e-6) -> np.ndarray:
    """Distinct normals of the vertical faces of the mesh."""
    normals = mesh.face_normals[np.abs(mesh.face_normals[:, 2]) < tol]
    if len(normals) == 0:
        return np.zeros((0, 3))
    return np.unique(np.round(normals, 9), axis=0)


def specular_excess(
    index: SpatialIndex,
    positions: np.ndarray,
    directions: np.ndarray,
    normals: np.ndarray,
    align_tol: float = 1e-6,
) -> np.ndarray:
    """Excess path of the shortest one-bounce facade reflection per (position, direction).

    NaN where no facade reflects the far source into the receiver.
    """
    positions = np.atleast_2d(positions)
    directions = np.atleast_2d(directions)
    best = np.full(len(positions), np.nan)
    for n in normals:
        dn = directions @ n
        front = np.flatnonzero(dn > 1e-9)
        if len(front) == 0:
            continue
        d = directions[front]
        u = d - 2.0 * dn[front, None] * n
        t, tri = index.ray_cast(positions[front], u)
        hit = np.isfinite(t)
        hit[hit] = index.mesh.face_normals[tri[hit]] @ n > 1.0 - align_tol
        rows = front[hit]
        if len(rows) == 0:
            continue
        bounce = positions[rows] + t[hit, None] * u[hit] + 1e-6 * n
        t_out, _ = index.ray_cast(bounce, directions[rows])
        clear = ~np.isfinite(t_out)
        rows = rows[clear]
        excess = 2.0 * t[hit][clear] * dn[rows] ** 2
        better = np.isnan(best[rows]) | (excess < best[rows])
        best[rows[better]] = excess[better]
    return best


def height_above_ground(index: SpatialIndex | None, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    if index is None:
        return points[:, 2].copy()
    down = np.tile([0.0, 0.0, -1.0], (len(points), 1))
    t, _ = index.ray_cast(points, down)
    return np.where(np.isfinite(t), t, points[:, 2])


def inside_solid(index: SpatialIndex, points: np.ndarray) -> np.ndarray:
    """True for points enclosed by a building: the first hit straight up is a back face."""
    up = np.tile([0.0, 0.0, 1.0], (len(points), 1))
    t, tri = index.ray_cast(points, up)
    hit = np.isfinite(t)
    out = np.zeros(len(points), dtype=bool)
    out[hit] = index.mesh.face_normals[tri[hit], 2] > 0.0
    return out


@dataclass(frozen=True, eq=False)
class TrainingSets:
    count_heights: np.ndarray
    counts: np.ndarray
    multipath_heights: np.ndarray
    multipath_errors: np.ndarray


def build_training_sets(
    mesh: TwinMesh,
    constellation: Constellation,
    n_samples: int,
    seed,
    elevation_mask_deg: float = 10.0,
    height_range: tuple[float, float] = (0.5, 100.0),
) -> TrainingSets:
    if n_samples < 100:
        raise InsufficientSamplesError(f"need at least 100 samples, got {n_samples}")
    rng = as_generator(seed)
    index = mesh.index
    lo_xy = mesh.vertices[:, :2].min(axis=0)
    hi_xy = mesh.vertices[:, :2].max(axis=0)
    lo_h, hi_h = height_range

    chunks = []
    total = 0
    while total < n_samples:
        batch = np.column_stack(
            [rng.uniform(lo_xy, hi_xy, size=(n_samples, 2)), rng.uniform(lo_h, hi_h, n_samples)]
        )
        free = batch[~inside_solid(index, batch)]
        chunks.append(free)
        total += len(free)
    positions = np.concatenate(chunks)[:n_samples]

    normals = facade_normals(mesh)
    mask = np.deg2rad(elevation_mask_deg)
    counts = np.zeros(n_samples)
    mp_heights, mp_errors = [], []
    for k, pos in enumerate(positions):
        above = np.flatnonzero(constellation.elevations(pos) > mask)
        dirs = constellation.directions(pos)[above]
        t, _ = index.ray_cast(np.tile(pos, (len(above), 1)), dirs)
        los = ~np.isfinite(t)
        counts[k] = los.sum()
        errors = [np.zeros(int(los.sum()))]
        if (~los).any() and len(normals):
            excess = specular_excess(index, np.tile(pos, ((~los).sum(), 1)), dirs[~los], normals)
            errors.append(excess[~np.isnan(excess)])
        errors = np.concatenate(errors)
        mp_heights.append(np.full(len(errors), pos[2]))
        mp_errors.append(errors)

    sets = TrainingSets(
        positions[:, 2].copy(), counts, np.concatenate(mp_heights), np.concatenate(mp_errors)
    )
    logger.info(
        "training sets: %d count pairs, %d multipath pairs (%.1f%% reflected)",
        len(sets.counts),
        len(sets.multipath_errors),
        100.0 * np.mean(sets.multipath_errors > 0) if len(sets.multipath_errors) else 0.0,
    )
    return sets


# --- satellite count GP --------------------------------------------------------


@dataclass(eq=False)
class SatCountGP:
    heights: np.ndarray
    counts: np.ndarray
    length_scale: float
    signal_variance: float
    noise_variance: float
    prior_mean: float
    regressor: GaussianProcessRegressor = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "heights": self.heights.tolist(),
            "counts": self.counts.tolist(),
            "length_scale": self.length_scale,
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
            "prior_mean": self.prior_mean,
        }


def fit_gp(
    heights,
    counts,
    length_scale: float = 15.0,
    signal_variance: float = 4.0,
    noise_variance: float = 0.5,
    prior_mean: float | None = None,
) -> SatCountGP:
    heights = np.asarray(heights, dtype=float).ravel()
    counts = np.asarray(counts, dtype=float).ravel()
    if len(heights) == 0:
        raise InsufficientSamplesError("GP needs training pairs")
    if noise_variance == 0.0 and len(np.unique(heights)) < len(heights):
        raise SingularSystemError("duplicate heights with zero noise variance make the kernel singular")
    mean = float(np.mean(counts)) if prior_mean is None else float(prior_mean)
    kernel = ConstantKernel(signal_variance, "fixed") * RBF(length_scale, "fixed")
    regressor = GaussianProcessRegressor(
        kernel=kernel, alpha=noise_variance + GP_JITTER, optimizer=None, normalize_y=False
    )
    try:
        regressor.fit(heights[:, None], counts - mean)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"GP kernel matrix is singular: {exc}") from exc
    return SatCountGP(heights, counts, length_scale, signal_variance, noise_variance, mean, regressor)


def predict_count(gp: SatCountGP, height) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the latent count at the query height(s)."""
    h = np.atleast_1d(np.asarray(height, dtype=float))
    mean, std = gp.regressor.predict(h[:, None], return_std=True)
    var = np.maximum(std**2, 0.0)
    if np.ndim(height) == 0:
        return float(mean[0] + gp.prior_mean), float(var[0])
    return mean + gp.prior_mean, var


# --- multipath GMM -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GmmBin:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list[float]
    n_samples: int

    @property
    def mean_square(self) -> float:
        """E[e²] of the mixture: the multipath share of the range error budget."""
        w = self.weights / self.weights.sum()
        return float(np.sum(w * (self.means**2 + self.variances)))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "log_likelihood": self.log_likelihood,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmBin":
        return cls(
            np.asarray(data["weights"]),
            np.asarray(data["means"]),
            np.asarray(data["variances"]),
            list(data["log_likelihood"]),
            int(data["n_samples"]),
        )


def fit_gmm(
    errors,
    k: int,
    seed,
    max_iterations: int = 200,
    reg_variance: float = 0.0,
    tol: float = 1e-10,
) -> GmmBin:
    """EM from a k-means++ start; the per-sample log-likelihood history is kept."""
    x = np.asarray(errors, dtype=float).reshape(-1, 1)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) < 10 * k:
        raise InsufficientSamplesError(f"need {10 * k} samples for {k} components, got {len(x)}")
    seed_int = int(as_generator(seed).integers(2**31 - 1))
    model = GaussianMixture(
        n_components=k,
        covariance_type="full",
        init_params="k-means++",
        reg_covar=reg_variance,
        max_iter=1,
        warm_start=True,
        random_state=seed_int,
    )
    history: list[float] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(max_iterations):
            try:
                model.fit(x)
            except ValueError as exc:
                raise DegenerateComponentError(f"EM failed: {exc}") from exc
            history.append(float(model.lower_bound_))
            if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
                break

    variances = model.covariances_.reshape(-1)
    weights = model.weights_
    if np.any(weights * len(x) < 1e-9):
        raise DegenerateComponentError("a mixture component lost all responsibility")
    if reg_variance == 0.0 and np.any(variances < MIN_VARIANCE):
        raise DegenerateComponentError(f"component variance collapsed to {variances.min():.3g} m²")
    order = np.argsort(model.means_.reshape(-1), kind="stable")
    logger.debug("GMM k=%d: %d EM iterations, ll=%.6f", k, len(history), history[-1])
    return GmmBin(weights[order], model.means_.reshape(-1)[order], variances[order], history, len(x))


@dataclass(frozen=True, eq=False)
class MultipathGMM:
    bin_edges: np.ndarray
    bins: dict[int, GmmBin]

    def bin_for(self, height: float) -> GmmBin:
        k = int(np.clip(np.searchsorted(self.bin_edges, height, side="right") - 1, 0, len(self.bin_edges) - 2))
        if k in self.bins:
            return self.bins[k]
        fitted = np.array(sorted(self.bins))
        return self.bins[int(fitted[np.argmin(np.abs(fitted - k))])]

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "bins": {str(k): b.to_dict() for k, b in sorted(self.bins.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MultipathGMM":
        return cls(
            np.asarray(data["bin_edges"], dtype=float),
            {int(k): GmmBin.from_dict(v) for k, v in data["bins"].items()},
        )


def fit_multipath_model(heights, errors, config: GnssConfig, seed) -> MultipathGMM:
    heights = np.asarray(heights, dtype=float)
    errors = np.asarray(errors, dtype=float)
    edges = np.asarray(config.height_bin_edges, dtype=float)
    rng = as_generator(seed)
    bins = {}
    for k in range(len(edges) - 1):
        sel = (heights >= edges[k]) & (heights < edges[k + 1])
        if sel.sum() < 10 * config.gmm_components:
            continue
        bins[k] = fit_gmm(
            errors[sel],
            config.gmm_components,
            rng,
            max_iterations=config.gmm_max_iterations,
            reg_variance=config.reg_variance,
        )
    if not bins:
        raise InsufficientSamplesError("no height bin has enough multipath samples")
    return MultipathGMM(edges, bins)


def sample_multipath(gmm: MultipathGMM | GmmBin, height: float, seed, size: int | None = None):
    rng = as_generator(seed)
    b = gmm.bin_for(height) if isinstance(gmm, MultipathGMM) else gmm
    n = 1 if size is None else size
    comp = rng.choice(len(b.weights), size=n, p=b.weights / b.weights.sum())
    draws = b.means[comp] + np.sqrt(b.variances[comp]) * rng.normal(size=n)
    return float(draws[0]) if size is None else draws


# --- trilateration -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GpsFix:
    t: float
    position: np.ndarray
    covariance: np.ndarray
    n_sats: int


def trilaterate(sat_positions, pseudoranges, sigma: float = 1.5, init=None):
    """Gauss-Newton on ‖s_i − p‖ + b = ρ_i; returns (position, covariance, clock bias)."""
    sats = np.asarray(sat_positions, dtype=float)
    rho = np.asarray(pseudoranges, dtype=float)
    if len(sats) < 4:
        raise DegenerateGeometryError(f"trilateration needs 4 satellites, got {len(sats)}")
    x = np.zeros(4)
    if init is not None:
        x[:3] = init
    last_step = np.inf
    for _ in range(TRILATERATION_MAX_ITER):
        vec = sats - x[:3]
        ranges = np.linalg.norm(vec, axis=1)
        r = ranges + x[3] - rho
        jac = np.column_stack([-vec / ranges[:, None], np.ones(len(sats))])
        h = jac.T @ jac
        if np.linalg.cond(h) > MAX_CONDITION:
            raise DegenerateGeometryError("satellite geometry is singular")
        dx = -np.linalg.solve(h, jac.T @ r)
        x += dx
        step = float(np.linalg.norm(dx))
        if step < TRILATERATION_STEP_TOL_M or (step < TRILATERATION_STALL_M and step >= last_step):
            break
        last_step = step
    else:
        raise NonConvergenceError(f"trilateration did not converge in {TRILATERATION_MAX_ITER} iterations")
    cov = sigma**2 * np.linalg.inv(h)[:3, :3]
    return x[:3], 0.5 * (cov + cov.T), float(x[3])


# --- fix stream ----------------------------------------------------------------


@dataclass(eq=False)
class GnssModels:
    gp: SatCountGP
    gmm: MultipathGMM
    constellation: Constellation

    def to_dict(self) -> dict:
        return {
            "constellation": self.constellation.positions.tolist(),
            "gp": self.gp.to_dict(),
            "gmm": self.gmm.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GnssModels":
        g = data["gp"]
        gp = fit_gp(
            g["heights"], g["counts"], g["length_scale"], g["signal_variance"], g["noise_variance"], g["prior_mean"]
        )
        return cls(gp, MultipathGMM.from_dict(data["gmm"]), Constellation(np.asarray(data["constellation"])))


def save_models(models: GnssModels, path: str | Path) -> None:
    Path(path).write_text(json.dumps(models.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def load_models(path: str | Path) -> GnssModels:
    return GnssModels.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_models(mesh: TwinMesh, config: GnssConfig, seed) -> tuple[GnssModels, TrainingSets]:
    rng = as_generator(seed)
    constellation = Constellation.default(config.n_satellites)
    sets = build_training_sets(
        mesh,
        constellation,
        config.n_training_samples,
        rng,
        elevation_mask_deg=config.elevation_mask_deg,
        height_range=(0.5, config.training_height_max),
    )
    gp = fit_gp(
        sets.count_heights,
        sets.counts,
        config.gp_length_scale,
        config.gp_signal_variance,
        config.gp_noise_variance,
        config.gp_prior_mean,
    )
    gmm = fit_multipath_model(sets.multipath_heights, sets.multipath_errors, config, rng)
    return GnssModels(gp, gmm, constellation), sets


def _gp_visible(models: GnssModels, pos, height, mask_deg, rng) -> np.ndarray:
    above = np.flatnonzero(models.constellation.elevations(pos) > np.deg2rad(mask_deg))
    mean, var = predict_count(models.gp, height)
    n = int(np.clip(np.rint(mean + np.sqrt(var) * rng.normal()), 0, len(above)))
    order = np.argsort(-models.constellation.elevations(pos)[above], kind="stable")
    return np.sort(above[order[:n]])


def generate_fix_stream(
    traj,
    models: GnssModels,
    config: GnssConfig,
    seed,
    index: SpatialIndex | None = None,
    multipath: bool = True,
) -> list[GpsFix]:
    """Fixes at config.rate_hz along the ground-truth trajectory, in W."""
    rng = as_generator(seed)
    n_epochs = int(np.floor(traj.duration * config.rate_hz + 1e-9)) + 1
    fixes = []
    failed = 0
    for k in range(n_epochs):
        t = k / config.rate_hz
        pos = traj.position(t)
        height = float(height_above_ground(index, pos)[0])
        if config.visibility_model == "gp":
            vis = _gp_visible(models, pos, height, config.elevation_mask_deg, rng)
        else:
            vis = visible_satellites(pos, models.constellation, index, config.elevation_mask_deg)
        if len(vis) < 4:
            continue
        sats = models.constellation.positions[vis]
        ranges = np.linalg.norm(sats - pos, axis=1)
        errors = sample_multipath(models.gmm, height, rng, size=len(vis)) if multipath else np.zeros(len(vis))
        uere = config.pseudorange_sigma
        if multipath:
            uere = float(np.sqrt(uere**2 + models.gmm.bin_for(height).mean_square))
        clock = rng.normal() * config.clock_bias_sigma_m
        rho = ranges + errors + clock + rng.normal(size=len(vis)) * config.pseudorange_sigma
        try:
            p, cov, _ = trilaterate(sats, rho, sigma=uere)
        except (DegenerateGeometryError, NonConvergenceError) as exc:
            logger.debug("epoch %.2f: no fix (%s)", t, exc.detail)
            failed += 1
            continue
        fixes.append(GpsFix(t, p, cov, len(vis)))
    if failed:
        logger.warning("%d epochs with >= 4 satellites gave no fix", failed)
    logger.info("generated %d fixes over %d epochs", len(fixes), n_epochs)
    return fixes
