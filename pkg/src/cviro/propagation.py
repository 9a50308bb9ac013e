"""IMU mean propagation and right-invariant covariance propagation.

Mean propagation is zero-order-hold per IMU sample with the exact SO(3)
exponential; the transition matrix is Euler-integrated per sample
(Phi <- (I + F dt) Phi), which keeps the clone blocks untouched and the
constant unobservable subspace exactly invariant.
"""

from dataclasses import dataclass

import numpy as np

from . import liegroup as lg
from .state import symmetrize

GRAVITY = np.array([0.0, 0.0, -9.8])

# Rotation re-orthonormalization cadence, in IMU samples.
REORTHO_EVERY = 100


@dataclass
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class NoiseParams:
    """Continuous-time noise densities (defaults match the simulation setup)."""

    gyro_noise_density: float = 2.0e-3      # rad/(s sqrt(Hz))
    accel_noise_density: float = 3.0e-3     # m/(s^2 sqrt(Hz))
    gyro_bias_walk: float = 3.0e-4
    accel_bias_walk: float = 3.0e-4
    cam_pixel_sigma: float = 1.0            # px
    uwb_range_sigma: float = 0.10           # m

    def validate(self):
        vals = [self.gyro_noise_density, self.accel_noise_density,
                self.gyro_bias_walk, self.accel_bias_walk,
                self.cam_pixel_sigma, self.uwb_range_sigma]
        if any(v < 0 for v in vals):
            raise ValueError("noise densities must be non-negative")
        return self


def _check_batch(batch):
    times = [s.timestamp for s in batch]
    if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
        raise ValueError("IMU batch timestamps must be strictly increasing")


def mean_step(rot, vel, pos, omega, accel, dt):
    """One ZOH kinematics step; world acceleration uses the start rotation."""
    acc_w = rot @ accel + GRAVITY
    pos_new = pos + vel * dt + 0.5 * acc_w * dt * dt
    vel_new = vel + acc_w * dt
    rot_new = rot @ lg.so3_exp(omega * dt)
    return rot_new, vel_new, pos_new


def propagate_mean(state, batch, end_time=None):
    """Propagate the state mean through an IMU batch (bias-corrected ZOH).

    Anchor columns and biases are unchanged.  `end_time` fixes the duration
    of the last sample; it defaults to extrapolating the previous dt.
    """
    _check_batch(batch)
    out = state.copy()
    rot, vel, pos = out.core.rot, out.core.col(0).copy(), out.core.col(1).copy()
    for i, s in enumerate(batch):
        if i + 1 < len(batch):
            dt = batch[i + 1].timestamp - s.timestamp
        elif end_time is not None:
            dt = end_time - s.timestamp
        else:
            dt = batch[i].timestamp - batch[i - 1].timestamp if i > 0 else 0.0
        if dt <= 0.0:
            continue
        omega = s.gyro - out.bias.gyro
        accel = s.accel - out.bias.accel
        rot, vel, pos = mean_step(rot, vel, pos, omega, accel, dt)
    out.core.rot = rot
    out.core.cols = out.core.cols.copy()
    out.core.cols[:, 0] = vel
    out.core.cols[:, 1] = pos
    if batch:
        out.time = end_time if end_time is not None else batch[-1].timestamp
    return out


def error_jacobians(state, noise=None):
    """Continuous-time right-invariant error Jacobians (F, G) of the core.

    F rows follow [theta, v, p, anchors..., b_g, b_a]; the only state
    dependence sits in the bias-coupling block (adjoint columns), so the
    upper-left block is the same for every estimate.  G maps the noise
    vector [n_gyro, n_accel, 0_6, w_gyro, w_accel] (18 channels).
    """
    k = state.core.k
    nc = 3 + 3 * k          # theta + columns
    n = nc + 6
    f = np.zeros((n, n))
    f[3:6, 0:3] = lg.skew(GRAVITY)      # velocity row <- theta
    f[6:9, 3:6] = np.eye(3)             # position row <- velocity
    rot = state.core.rot
    f[0:3, nc:nc + 3] = -rot
    f[3:6, nc + 3:nc + 6] = -rot
    for i in range(k):
        f[3 + 3 * i:6 + 3 * i, nc:nc + 3] = -lg.skew(state.core.col(i)) @ rot
    g = np.zeros((n, 18))
    g[:nc, 0:6] = lg.adjoint(state.core)[:, 0:6]
    g[nc:n, 12:18] = np.eye(6)
    return f, g


def noise_density_matrix(noise):
    """Diagonal continuous-time power spectral density for the 18 channels."""
    qc = np.zeros(18)
    qc[0:3] = noise.gyro_noise_density**2
    qc[3:6] = noise.accel_noise_density**2
    qc[12:15] = noise.gyro_bias_walk**2
    qc[15:18] = noise.accel_bias_walk**2
    return np.diag(qc)


def propagate(state, batch, noise, end_time=None):
    """Joint mean + covariance propagation over an IMU batch.

    Per sample: linearize at the current estimate, Euler step the
    transition (Phi = I + F dt), step the mean, and accumulate
    Q = Phi G Qc G^T Phi^T dt.  Clone blocks see the identity transition.
    """
    _check_batch(batch)
    out = state.copy()
    nc = out.core_dim
    qc = noise_density_matrix(noise)
    rot, vel, pos = out.core.rot, out.core.col(0).copy(), out.core.col(1).copy()
    cov = out.cov.copy()
    steps = 0
    for i, s in enumerate(batch):
        if i + 1 < len(batch):
            dt = batch[i + 1].timestamp - s.timestamp
        elif end_time is not None:
            dt = end_time - s.timestamp
        else:
            dt = batch[i].timestamp - batch[i - 1].timestamp if i > 0 else 0.0
        if dt <= 0.0:
            continue
        out.core.rot = rot
        out.core.cols[:, 0] = vel
        out.core.cols[:, 1] = pos
        f, g = error_jacobians(out)
        phi = np.eye(nc) + f * dt
        q = phi @ g @ qc @ g.T @ phi.T * dt
        cov[:nc, :] = phi @ cov[:nc, :]
        cov[:, :nc] = cov[:, :nc] @ phi.T
        cov[:nc, :nc] += q
        omega = s.gyro - out.bias.gyro
        accel = s.accel - out.bias.accel
        rot, vel, pos = mean_step(rot, vel, pos, omega, accel, dt)
        steps += 1
        if steps % REORTHO_EVERY == 0:
            rot = lg.project_rotation(rot)
    out.core.rot = rot
    out.core.cols[:, 0] = vel
    out.core.cols[:, 1] = pos
    out.cov = symmetrize(cov)
    if batch:
        out.time = end_time if end_time is not None else batch[-1].timestamp
    return out
