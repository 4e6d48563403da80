"""Window prior and Schur-complement marginalization of the departing keyframe."""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg

from src.estimator.factors import (
    STATE_DIM,
    KeyframeState,
    bias_information,
    bias_residual,
    gps_residual,
    imu_residual,
    map_residual,
)
from src.geometry import right_jacobian_inv
from src.models import EstimatorConfig

if TYPE_CHECKING:
    from src.estimator.window import SlidingWindow

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class WindowPrior:
    """Gaussian prior e = r0 + J·(x ⊟ x0) on one keyframe; JᵀJ = information, Jᵀr0 = vector."""

    keyframe_id: int
    linearization: KeyframeState
    information: np.ndarray
    vector: np.ndarray
    jacobian: np.ndarray
    residual: np.ndarray

    @classmethod
    def from_information(cls, kf: KeyframeState, information: np.ndarray, vector: np.ndarray) -> "WindowPrior":
        information = 0.5 * (information + information.T)
        s, u = linalg.eigh(information)
        keep = s > max(s.max(initial=0.0), 0.0) * 1e-12
        s, u = s[keep], u[:, keep]
        jacobian = np.sqrt(s)[:, None] * u.T
        residual = (u.T @ vector) / np.sqrt(s)
        return cls(kf.id, kf, information, vector, jacobian, residual)

    @classmethod
    def gauge(cls, kf: KeyframeState, config: EstimatorConfig) -> "WindowPrior":
        sigmas = np.concatenate(
            [
                np.full(3, config.prior_rotation_sigma),
                np.full(3, config.prior_position_sigma),
                np.full(3, config.prior_velocity_sigma),
                np.full(3, config.prior_gyro_bias_sigma),
                np.full(3, config.prior_accel_bias_sigma),
            ]
        )
        return cls.from_information(kf, np.diag(1.0 / sigmas**2), np.zeros(STATE_DIM))

    def evaluate(self, kf: KeyframeState):
        d = kf.local(self.linearization)
        r = self.residual + self.jacobian @ d
        J = self.jacobian.copy()
        J[:, 0:3] = self.jacobian[:, 0:3] @ right_jacobian_inv(d[0:3])
        return r, J


@dataclass(frozen=True, eq=False)
class Term:
    family: str
    ids: tuple[int, ...]
    residual: np.ndarray
    jacobians: tuple[np.ndarray, ...]
    information: np.ndarray | None

    def cost(self) -> float:
        r = self.residual
        return 0.5 * float(r @ r if self.information is None else r @ self.information @ r)


def keyframe_terms(window: "SlidingWindow", states: dict[int, KeyframeState] | None = None) -> list[Term]:
    """Every non-visual factor evaluated at states (default: the window's own)."""
    states = states or {kf.id: kf for kf in window.keyframes}
    order = [kf.id for kf in window.keyframes]
    terms = []
    if window.prior is not None and window.prior.keyframe_id in states:
        r, J = window.prior.evaluate(states[window.prior.keyframe_id])
        terms.append(Term("prior", (window.prior.keyframe_id,), r, (J,), None))
    for a, b in zip(order, order[1:]):
        pre = window.imu.get(b)
        if pre is None:
            continue
        r, Ji, Jj = imu_residual(states[a], states[b], pre)
        terms.append(Term("imu", (a, b), r, (Ji, Jj), np.linalg.inv(pre.covariance + 1e-12 * np.eye(9))))
        r, Ji, Jj = bias_residual(states[a], states[b])
        info = bias_information(pre.dt, window.noise.gyro_bias_walk, window.noise.accel_bias_walk)
        terms.append(Term("bias", (a, b), r, (Ji, Jj), info))
    for kf_id, factor in sorted(window.map_factors.items()):
        if kf_id in states:
            r, J = map_residual(states[kf_id], factor)
            terms.append(Term("map", (kf_id,), r, (J,), factor.weight))
    for kf_id, factor in sorted(window.gps_factors.items()):
        if kf_id in states:
            r, J = gps_residual(states[kf_id], factor)
            terms.append(Term("gps", (kf_id,), r, (J,), factor.information))
    return terms


def assemble(terms: list[Term], ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Dense H = Σ JᵀWJ, g = Σ JᵀWr over the listed keyframes; terms touching others are skipped."""
    col = {kf_id: k for k, kf_id in enumerate(ids)}
    n = STATE_DIM * len(ids)
    H = np.zeros((n, n))
    g = np.zeros(n)
    for term in terms:
        if any(i not in col for i in term.ids):
            continue
        W = np.eye(len(term.residual)) if term.information is None else term.information
        for i, Ji in zip(term.ids, term.jacobians):
            si = slice(STATE_DIM * col[i], STATE_DIM * (col[i] + 1))
            g[si] += Ji.T @ W @ term.residual
            for j, Jj in zip(term.ids, term.jacobians):
                sj = slice(STATE_DIM * col[j], STATE_DIM * (col[j] + 1))
                H[si, sj] += Ji.T @ W @ Jj
    return H, g


def schur_complement(H: np.ndarray, g: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate the first m variables: (H11 − H10·H00⁻¹·H01, g1 − H10·H00⁻¹·g0)."""
    H00, H01, H11 = H[:m, :m], H[:m, m:], H[m:, m:]
    g0, g1 = g[:m], g[m:]
    try:
        factor = linalg.cho_factor(0.5 * (H00 + H00.T))
        X = linalg.cho_solve(factor, np.column_stack([H01, g0]))
    except linalg.LinAlgError:
        X = linalg.pinvh(H00) @ np.column_stack([H01, g0])
    H_star = H11 - H01.T @ X[:, :-1]
    g_star = g1 - H01.T @ X[:, -1]
    return 0.5 * (H_star + H_star.T), g_star


def drop_observations(window: "SlidingWindow", kf_id: int) -> list[int]:
    """Remove a keyframe's visual observations; landmarks left unobserved are dropped for good."""
    dropped = []
    for lm_id in sorted(window.landmarks):
        lm = window.landmarks[lm_id]
        lm.observations.pop(kf_id, None)
        if not lm.observations:
            del window.landmarks[lm_id]
            window.dropped.add(lm_id)
            dropped.append(lm_id)
    return dropped


def marginalize_or_drop(window: "SlidingWindow") -> "WindowPrior | None":
    """Remove the oldest keyframe; its states go into a prior on the next one."""
    if len(window) <= window.config.window_size:
        return window.prior
    k0, k1 = window.keyframes[0], window.keyframes[1]
    dropped = drop_observations(window, k0.id)

    terms = [t for t in keyframe_terms(window) if k0.id in t.ids]
    H, g = assemble(terms, [k0.id, k1.id])
    if np.any(H[:STATE_DIM, STATE_DIM:]):
        H_star, g_star = schur_complement(H, g, STATE_DIM)
        window.prior = WindowPrior.from_information(k1, H_star, g_star)
    elif window.prior is not None and window.prior.keyframe_id == k0.id:
        # нет связи с k1: та же информация закрепляет калибровку на k1
        window.prior = WindowPrior.from_information(k1, window.prior.information, np.zeros(STATE_DIM))
        logger.info("keyframe %d has no connecting factors, prior re-anchored on keyframe %d", k0.id, k1.id)
    else:
        logger.debug("keyframe %d has no connecting factors, prior kept", k0.id)

    window.keyframes.pop(0)
    window.imu.pop(k1.id, None)
    window.map_factors.pop(k0.id, None)
    window.gps_factors.pop(k0.id, None)
    window.departed.append(k0)
    logger.debug("marginalized keyframe %d, dropped %d landmarks", k0.id, len(dropped))
    return window.prior
