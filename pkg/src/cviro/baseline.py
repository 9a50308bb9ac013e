"""Standard vector-error MSCKF VIO (no UWB), the inconsistency control.

Shares the clone window, triangulation, nullspace projection, compression
and gating with the invariant filter; only the error parameterization
differs.  Errors are component-wise: theta = log(Rhat R^T) (global frame),
additive velocity/position/bias errors, and Jacobians are relinearized at
the current estimate, which is what loses the yaw nullspace direction.
"""

import numpy as np

from . import liegroup as lg
from . import visual_update
from .filters import VioFilterBase
from .propagation import GRAVITY, noise_density_matrix
from .state import FilterState, ImuBias, symmetrize
from .propagation import mean_step, REORTHO_EVERY


def baseline_error_jacobians(state, accel_body):
    """Continuous-time vector-error Jacobians; the velocity/attitude coupling
    runs through the estimated specific force, not gravity."""
    rot = state.core.rot
    f = np.zeros((15, 15))
    f[3:6, 0:3] = -lg.skew(rot @ accel_body)
    f[6:9, 3:6] = np.eye(3)
    f[0:3, 9:12] = -rot
    f[3:6, 12:15] = -rot
    g = np.zeros((15, 18))
    g[0:3, 0:3] = rot
    g[3:6, 3:6] = rot
    g[9:15, 12:18] = np.eye(6)
    return f, g


def baseline_propagate(state, batch, noise, end_time=None):
    """Mean propagation identical to the invariant filter; covariance uses
    the vector-error transition (Euler per IMU sample)."""
    out = state.copy()
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
        omega = s.gyro - out.bias.gyro
        accel = s.accel - out.bias.accel
        out.core.rot = rot
        f, g = baseline_error_jacobians(out, accel)
        phi = np.eye(15) + f * dt
        q = phi @ g @ qc @ g.T @ phi.T * dt
        cov[:15, :] = phi @ cov[:15, :]
        cov[:, :15] = cov[:, :15] @ phi.T
        cov[:15, :15] += q
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


def apply_correction_vector(state, delta):
    """Vector-space correction: multiplicative only on the rotation factor,
    plain addition elsewhere."""
    out = state.copy()
    out.core.rot = lg.so3_exp(delta[0:3]) @ state.core.rot
    out.core.cols = state.core.cols + delta[3:9].reshape(2, 3).T
    out.bias = ImuBias(state.bias.gyro + delta[9:12],
                       state.bias.accel + delta[12:15])
    for i, clone in enumerate(out.clones):
        d = delta[state.idx_clone(i):state.idx_clone(i) + 6]
        clone.rot = lg.so3_exp(d[:3]) @ clone.rot
        clone.pos = clone.pos + d[3:]
    return out


def baseline_visual_jacobians(track, p_feat, state, extrinsics):
    """Vector-error MSCKF feature Jacobians: the clone orientation block is
    the estimate-dependent lever arm skew((p_f - p_clone))."""
    pairs = visual_update._match_clones(track, state.clones)
    h_x_rows, h_f_rows, res_rows = [], [], []
    for obs, clone_idx, clone in pairs:
        pc = visual_update.point_in_camera(clone.rot, clone.pos, extrinsics,
                                           p_feat)
        if pc[2] <= visual_update.MIN_DEPTH:
            continue
        block = visual_update.projection_jacobian(pc) \
            @ extrinsics.rot_cam_imu @ clone.rot.T
        h_x = np.zeros((2, state.dim))
        ic = state.idx_clone(clone_idx)
        h_x[:, ic:ic + 3] = block @ lg.skew(p_feat - clone.pos)
        h_x[:, ic + 3:ic + 6] = -block
        h_x_rows.append(h_x)
        h_f_rows.append(block)
        res_rows.append(obs.uv - visual_update.project(pc))
    if not h_x_rows:
        raise visual_update.TrackRejected("no observation with positive depth")
    return np.vstack(h_x_rows), np.vstack(h_f_rows), np.concatenate(res_rows)


class BaselineVioFilter(VioFilterBase):
    """Vector-error MSCKF; ignores range measurements entirely."""

    def _propagate(self, batch, t_end):
        return baseline_propagate(self.state, batch, self.cfg.noise, t_end)

    def _visual_jacobians(self, track, p_feat):
        return baseline_visual_jacobians(track, p_feat, self.state,
                                         self.cfg.cam_extrinsics)

    def _retraction(self):
        return apply_correction_vector

    def process_ranges(self, measurements):
        pass


def initial_state_vector(rot, vel, pos, bias, p0_vec, time=0.0):
    """Baseline initial state: covariance is the vector-coordinate prior."""
    state = FilterState.initial(rot, vel, pos, bias, time=time)
    state.cov = p0_vec.copy()
    return state
