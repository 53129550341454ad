"""IMU preintegration between two image frames.

Midpoint integration in the body frame of the first sample.  The error state
is ordered ``(d_alpha, d_beta, d_theta)`` with ``d_theta`` a right
perturbation of ``gamma``.  The same linearized step map drives covariance
propagation, the first-order bias Jacobians and the per-measurement
Jacobians, so all three are exact derivatives of the discrete recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lie import Rotation, skew, so3_exp, so3_right_jacobian

MAX_STEP = 0.1  # seconds; a larger gap means the IMU stream dropped samples
BIAS_SANITY = 10.0


@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: int  # ns
    gyro: np.ndarray  # rad/s
    accel: np.ndarray  # m/s^2

    def __post_init__(self):
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class BiasState:
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        ba = np.asarray(self.accel_bias, dtype=float).reshape(3)
        bg = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        if not (np.all(np.isfinite(ba)) and np.all(np.isfinite(bg))):
            raise ValueError("non-finite bias")
        if np.linalg.norm(ba) >= BIAS_SANITY or np.linalg.norm(bg) >= BIAS_SANITY:
            raise ValueError(f"bias outside sanity bound: ba={ba}, bg={bg}")
        object.__setattr__(self, "accel_bias", ba)
        object.__setattr__(self, "gyro_bias", bg)

    def vector(self) -> np.ndarray:
        """``[b_a, b_g]`` as a 6-vector."""
        return np.concatenate([self.accel_bias, self.gyro_bias])

    @classmethod
    def from_vector(cls, v) -> "BiasState":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def __sub__(self, other: "BiasState") -> np.ndarray:
        return self.vector() - other.vector()


@dataclass(frozen=True)
class ImuNoise:
    """White-noise densities used to build per-step process noise."""

    gyro_density: float = 1.7e-4  # rad/s/sqrt(Hz)
    accel_density: float = 2.0e-3  # m/s^2/sqrt(Hz)


@dataclass(frozen=True, eq=False)
class Preintegration:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: Rotation
    dt_total: float
    covariance: np.ndarray
    bias_jacobian: np.ndarray  # 9x6, rows (alpha, beta, theta), cols (b_a, b_g)
    reference_bias: BiasState

    @classmethod
    def identity(cls, bias: BiasState | None = None) -> "Preintegration":
        return cls(np.zeros(3), np.zeros(3), Rotation.identity(), 0.0, np.zeros((9, 9)), np.zeros((9, 6)),
                   bias if bias is not None else BiasState())

    @property
    def J_alpha_ba(self):
        return self.bias_jacobian[0:3, 0:3]

    @property
    def J_alpha_bg(self):
        return self.bias_jacobian[0:3, 3:6]

    @property
    def J_beta_ba(self):
        return self.bias_jacobian[3:6, 0:3]

    @property
    def J_beta_bg(self):
        return self.bias_jacobian[3:6, 3:6]

    @property
    def J_gamma_bg(self):
        return self.bias_jacobian[6:9, 3:6]


def _step_maps(R0, s0: ImuSample, s1: ImuSample, bias: BiasState, dt: float):
    """Linearized midpoint step.

    Returns the increment rotation vector, the end rotation, the midpoint
    acceleration in the ``b_k`` frame, and ``(A, B)``: the 9x9 error transition
    and the 9x12 map from ``(a0, w0, a1, w1)`` reading perturbations.
    """
    w = 0.5 * (s0.gyro + s1.gyro) - bias.gyro_bias
    dR = so3_exp(w * dt).matrix()
    R1 = R0 @ dR
    a0b = s0.accel - bias.accel_bias
    a1b = s1.accel - bias.accel_bias
    a_mid = 0.5 * (R0 @ a0b + R1 @ a1b)

    Jr = so3_right_jacobian(w * dt)
    R1_a1x = R1 @ skew(a1b)
    dabar_dphi = -0.5 * (R0 @ skew(a0b) + R1_a1x @ dR.T)
    dabar_dw = -0.25 * dt * R1_a1x @ Jr  # per endpoint gyro reading

    A = np.eye(9)
    A[0:3, 3:6] = dt * np.eye(3)
    A[0:3, 6:9] = 0.5 * dt * dt * dabar_dphi
    A[3:6, 6:9] = dt * dabar_dphi
    A[6:9, 6:9] = dR.T

    B = np.zeros((9, 12))
    for col, dabar in ((0, 0.5 * R0), (3, dabar_dw), (6, 0.5 * R1), (9, dabar_dw)):
        B[0:3, col:col + 3] = 0.5 * dt * dt * dabar
        B[3:6, col:col + 3] = dt * dabar
    B[6:9, 3:6] = 0.5 * dt * Jr
    B[6:9, 9:12] = 0.5 * dt * Jr
    return w * dt, R1, a_mid, A, B


def _check_dt(s0: ImuSample, s1: ImuSample) -> float:
    dt = (s1.timestamp - s0.timestamp) * 1e-9
    if dt <= 0.0:
        raise ValueError(f"non-increasing IMU timestamps {s0.timestamp} -> {s1.timestamp}")
    if dt > MAX_STEP:
        raise ValueError(f"IMU gap of {dt:.3f} s exceeds {MAX_STEP} s")
    return dt


def integrate_step(state: Preintegration, sample_prev: ImuSample, sample_next: ImuSample,
                   bias: BiasState, noise: ImuNoise = ImuNoise()) -> Preintegration:
    dt = _check_dt(sample_prev, sample_next)
    R0 = state.gamma.matrix()
    phi, _, a_mid, A, B = _step_maps(R0, sample_prev, sample_next, bias, dt)

    alpha = state.alpha + state.beta * dt + 0.5 * a_mid * dt * dt
    beta = state.beta + a_mid * dt
    gamma = state.gamma * so3_exp(phi)

    qa = noise.accel_density**2 / dt
    qg = noise.gyro_density**2 / dt
    Q = np.diag([qa] * 3 + [qg] * 3 + [qa] * 3 + [qg] * 3)
    cov = A @ state.covariance @ A.T + B @ Q @ B.T
    cov = 0.5 * (cov + cov.T)

    Bb = np.hstack([-(B[:, 0:3] + B[:, 6:9]), -(B[:, 3:6] + B[:, 9:12])])
    jac = A @ state.bias_jacobian + Bb
    return Preintegration(alpha, beta, gamma, state.dt_total + dt, cov, jac, bias)


def _check_batch(samples: Sequence[ImuSample]):
    if len(samples) < 2:
        raise ValueError("preintegration needs at least two samples")
    ts = np.array([s.timestamp for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU samples are not strictly increasing in time")


def integrate_batch(samples: Sequence[ImuSample], bias: BiasState,
                    noise: ImuNoise = ImuNoise()) -> Preintegration:
    _check_batch(samples)
    p = Preintegration.identity(bias)
    for s0, s1 in zip(samples[:-1], samples[1:]):
        p = integrate_step(p, s0, s1, bias, noise)
    return p


def bias_correct(p: Preintegration, new_bias: BiasState):
    """First-order update of ``(alpha, beta, gamma)`` to ``new_bias``.

    Meant for bias changes below roughly 0.1 (m/s^2, rad/s); larger changes
    call for reintegration.
    """
    db = new_bias - p.reference_bias
    corr = p.bias_jacobian @ db
    return p.alpha + corr[0:3], p.beta + corr[3:6], p.gamma * so3_exp(corr[6:9])


def compose(first: Preintegration, second: Preintegration) -> Preintegration:
    """Chain two consecutive preintegrations computed with the same bias."""
    R1 = first.gamma.matrix()
    R2 = second.gamma.matrix()
    alpha = first.alpha + first.beta * second.dt_total + R1 @ second.alpha
    beta = first.beta + R1 @ second.beta
    gamma = first.gamma * second.gamma

    A1 = np.eye(9)
    A1[0:3, 3:6] = second.dt_total * np.eye(3)
    A1[0:3, 6:9] = -R1 @ skew(second.alpha)
    A1[3:6, 6:9] = -R1 @ skew(second.beta)
    A1[6:9, 6:9] = R2.T
    A2 = np.zeros((9, 9))
    A2[0:3, 0:3] = R1
    A2[3:6, 3:6] = R1
    A2[6:9, 6:9] = np.eye(3)
    cov = A1 @ first.covariance @ A1.T + A2 @ second.covariance @ A2.T
    jac = A1 @ first.bias_jacobian + A2 @ second.bias_jacobian
    return Preintegration(alpha, beta, gamma, first.dt_total + second.dt_total, 0.5 * (cov + cov.T), jac,
                          first.reference_bias)


def preintegration_jacobians_wrt_measurements(samples: Sequence[ImuSample], bias: BiasState) -> np.ndarray:
    """``d(alpha, beta, theta) / d(accel_i, gyro_i)`` for every sample.

    Returns an array of shape (N, 9, 6); columns are ``(accel, gyro)``.
    Because the bias is subtracted from every reading,
    ``d/d(bias) == -sum_i d/d(measurement_i)``.
    """
    _check_batch(samples)
    n = len(samples)
    M = np.zeros((9, 6 * n))
    R0 = np.eye(3)
    for k, (s0, s1) in enumerate(zip(samples[:-1], samples[1:])):
        dt = _check_dt(s0, s1)
        _, R1, _, A, B = _step_maps(R0, s0, s1, bias, dt)
        M = A @ M
        M[:, 6 * k:6 * k + 6] += B[:, 0:6]
        M[:, 6 * (k + 1):6 * (k + 1) + 6] += B[:, 6:12]
        R0 = R1
    return M.reshape(9, n, 6).transpose(1, 0, 2)
