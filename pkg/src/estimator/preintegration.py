"""On-manifold IMU preintegration between two keyframes.

Deltas exclude gravity; the residual adds it back. Covariance and bias
Jacobians follow the (rotation, velocity, position) ordering.
"""

from dataclasses import dataclass

import numpy as np

from src.errors import ImuGapError
from src.geometry import exp_so3, hat, right_jacobian
from src.simkit import ImuStream

GAP_FACTOR = 3.0


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    dt: float
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    covariance: np.ndarray
    d_R_d_bg: np.ndarray
    d_v_d_bg: np.ndarray
    d_v_d_ba: np.ndarray
    d_p_d_bg: np.ndarray
    d_p_d_ba: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    n_samples: int

    def corrected(self, gyro_bias: np.ndarray, accel_bias: np.ndarray):
        """First-order bias update of (ΔR, Δv, Δp)."""
        dbg = gyro_bias - self.gyro_bias
        dba = accel_bias - self.accel_bias
        delta_R = self.delta_R @ exp_so3(self.d_R_d_bg @ dbg)
        delta_v = self.delta_v + self.d_v_d_bg @ dbg + self.d_v_d_ba @ dba
        delta_p = self.delta_p + self.d_p_d_bg @ dbg + self.d_p_d_ba @ dba
        return delta_R, delta_v, delta_p


def _interpolate(stream: ImuStream, t: float):
    k = int(np.clip(np.searchsorted(stream.t, t) - 1, 0, len(stream.t) - 2))
    t0, t1 = stream.t[k], stream.t[k + 1]
    w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
    return (1 - w) * stream.gyro[k] + w * stream.gyro[k + 1], (1 - w) * stream.accel[k] + w * stream.accel[k + 1]


def _samples(stream: ImuStream, t_i: float, t_j: float, eps: float = 1e-9):
    """Sample times, gyro and accel over [t_i, t_j], endpoints interpolated when off-grid."""
    if t_j <= t_i:
        raise ValueError("preintegration interval must be positive")
    if t_i < stream.t[0] - eps or t_j > stream.t[-1] + eps:
        raise ImuGapError(f"IMU stream does not cover [{t_i:.3f}, {t_j:.3f}]")
    inner = (stream.t > t_i + eps) & (stream.t < t_j - eps)
    g0, a0 = _interpolate(stream, t_i)
    g1, a1 = _interpolate(stream, t_j)
    t = np.concatenate([[t_i], stream.t[inner], [t_j]])
    gyro = np.vstack([g0, stream.gyro[inner], g1])
    accel = np.vstack([a0, stream.accel[inner], a1])
    return t, gyro, accel


def preintegrate(
    stream: ImuStream,
    t_i: float,
    t_j: float,
    gyro_bias,
    accel_bias,
    gyro_noise_density: float,
    accel_noise_density: float,
    nominal_period: float | None = None,
) -> PreintegratedImu:
    t, gyro, accel = _samples(stream, t_i, t_j)
    steps = np.diff(t)
    period = nominal_period or stream.period
    if period > 0 and np.any(steps > GAP_FACTOR * period + 1e-9):
        k = int(np.argmax(steps))
        raise ImuGapError(f"IMU gap of {steps[k]:.4f} s at t={t[k]:.3f}", t=float(t[k]))

    bg = np.asarray(gyro_bias, dtype=float)
    ba = np.asarray(accel_bias, dtype=float)
    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    d_R_bg = np.zeros((3, 3))
    d_v_bg = np.zeros((3, 3))
    d_v_ba = np.zeros((3, 3))
    d_p_bg = np.zeros((3, 3))
    d_p_ba = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    eye = np.eye(3)

    for k, dt in enumerate(steps):
        w = 0.5 * (gyro[k] + gyro[k + 1]) - bg
        a_k = accel[k] - ba
        a_k1 = accel[k + 1] - ba
        a_bar = 0.5 * (a_k + a_k1)
        dR = exp_so3(w * dt)
        jr = right_jacobian(w * dt)
        R_next = R @ dR
        a_mid = 0.5 * (R @ a_k + R_next @ a_k1)
        a_hat = hat(a_bar)

        # ковариация (θ, v, p)
        A = np.eye(9)
        A[0:3, 0:3] = dR.T
        A[3:6, 0:3] = -R @ a_hat * dt
        A[6:9, 0:3] = -0.5 * R @ a_hat * dt * dt
        A[6:9, 3:6] = eye * dt
        Bg = np.zeros((9, 3))
        Bg[0:3] = jr * dt
        Ba = np.zeros((9, 3))
        Ba[3:6] = R * dt
        Ba[6:9] = 0.5 * R * dt * dt
        cov = (
            A @ cov @ A.T
            + (gyro_noise_density**2 / dt) * Bg @ Bg.T
            + (accel_noise_density**2 / dt) * Ba @ Ba.T
        )

        d_p_ba = d_p_ba + d_v_ba * dt - 0.5 * R * dt * dt
        d_p_bg = d_p_bg + d_v_bg * dt - 0.5 * R @ a_hat @ d_R_bg * dt * dt
        d_v_ba = d_v_ba - R * dt
        d_v_bg = d_v_bg - R @ a_hat @ d_R_bg * dt
        d_R_bg = dR.T @ d_R_bg - jr * dt

        p = p + v * dt + 0.5 * a_mid * dt * dt
        v = v + a_mid * dt
        R = R_next

    return PreintegratedImu(
        dt=float(steps.sum()),
        delta_R=R,
        delta_v=v,
        delta_p=p,
        covariance=0.5 * (cov + cov.T),
        d_R_d_bg=d_R_bg,
        d_v_d_bg=d_v_bg,
        d_v_d_ba=d_v_ba,
        d_p_d_bg=d_p_bg,
        d_p_d_ba=d_p_ba,
        gyro_bias=bg.copy(),
        accel_bias=ba.copy(),
        n_samples=len(t),
    )
