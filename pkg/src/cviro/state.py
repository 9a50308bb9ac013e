"""Filter state container and the generic Kalman machinery.

The error vector is ordered

    [xi_theta, xi_v, xi_p, xi_u(anchor 0..L-1), b_gyro, b_accel,
     xi_clone(newest) ... xi_clone(oldest)]

with the core blocks in right-invariant coordinates (group error
eta = Xhat * X^-1) and additive bias errors.  Clone errors are 6-dof
right-invariant SE(3) errors (theta, p).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import liegroup as lg

# Core column layout inside the ExtendedPose: velocity, position, anchors.
COL_V = 0
COL_P = 1
COL_ANCHOR0 = 2


class SingularUpdateError(RuntimeError):
    """Innovation covariance could not be inverted."""


class NumericalFailureError(RuntimeError):
    """Covariance lost positive semi-definiteness beyond tolerance."""


@dataclass
class ImuBias:
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    def copy(self):
        return ImuBias(self.gyro.copy(), self.accel.copy())

    def as_vector(self):
        return np.concatenate([self.gyro, self.accel])


@dataclass
class CloneState:
    rot: np.ndarray
    pos: np.ndarray
    timestamp: float

    def copy(self):
        return CloneState(self.rot.copy(), self.pos.copy(), self.timestamp)


@dataclass
class UpdatePacket:
    """Linearized measurement: residual = H @ error + noise, noise ~ N(0, R)."""

    jac: np.ndarray
    residual: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.jac = np.atleast_2d(np.asarray(self.jac, dtype=float))
        self.residual = np.atleast_1d(np.asarray(self.residual, dtype=float))
        self.noise = np.atleast_2d(np.asarray(self.noise, dtype=float))
        rows = self.jac.shape[0]
        if self.residual.size != rows or self.noise.shape != (rows, rows):
            raise ValueError("UpdatePacket dimensions do not conform")

    @property
    def rows(self):
        return self.jac.shape[0]


@dataclass
class FilterState:
    """Core extended pose + biases + clone window + joint covariance."""

    core: lg.ExtendedPose            # columns [v, p, anchor_0 .. anchor_{L-1}]
    bias: ImuBias
    cov: np.ndarray
    clones: list = field(default_factory=list)   # newest first
    anchor_ids: list = field(default_factory=list)  # ids of initialized anchors
    time: float = 0.0

    @property
    def num_anchors(self):
        return self.core.k - 2

    @property
    def core_dim(self):
        return 9 + 3 * self.num_anchors + 6

    @property
    def dim(self):
        return self.core_dim + 6 * len(self.clones)

    # -- error-vector index helpers -------------------------------------
    @property
    def idx_bias(self):
        return 9 + 3 * self.num_anchors

    def idx_anchor(self, anchor_id):
        slot = self.anchor_ids.index(anchor_id)
        return 9 + 3 * slot

    def idx_clone(self, i):
        return self.core_dim + 6 * i

    @property
    def rotation(self):
        return self.core.rot

    @property
    def velocity(self):
        return self.core.col(COL_V)

    @property
    def position(self):
        return self.core.col(COL_P)

    def anchor_position(self, anchor_id):
        slot = self.anchor_ids.index(anchor_id)
        return self.core.col(COL_ANCHOR0 + slot)

    def has_anchor(self, anchor_id):
        return anchor_id in self.anchor_ids

    def copy(self):
        return FilterState(
            core=self.core.copy(),
            bias=self.bias.copy(),
            cov=self.cov.copy(),
            clones=[c.copy() for c in self.clones],
            anchor_ids=list(self.anchor_ids),
            time=self.time,
        )

    @classmethod
    def initial(cls, rot, vel, pos, bias=None, cov=None, time=0.0):
        core = lg.ExtendedPose(rot, np.column_stack([vel, pos]))
        bias = bias if bias is not None else ImuBias.zero()
        if cov is None:
            cov = np.zeros((15, 15))
        return cls(core=core, bias=bias, cov=np.asarray(cov, dtype=float),
                   time=time)


def symmetrize(p):
    return 0.5 * (p + p.T)


def check_covariance(cov, tol=-1e-9):
    """Debug guard: symmetric and eigenvalues above tol."""
    if not np.allclose(cov, cov.T, atol=1e-9):
        return False
    return float(np.linalg.eigvalsh(cov).min()) >= tol


def augment_clone(state, t):
    """Stochastic cloning of the current (R, p) into the clone window.

    The new clone block is inserted right after the bias block (newest
    first); its covariance rows copy the core (theta, p) rows.
    """
    out = state.copy()
    out.clones.insert(0, CloneState(state.rotation.copy(),
                                    state.position.copy(), t))
    n = state.dim
    ins = state.core_dim
    jac = np.zeros((6, n))
    jac[0:3, 0:3] = np.eye(3)
    jac[3:6, 6:9] = np.eye(3)
    cov = np.zeros((n + 6, n + 6))
    cov[:ins, :ins] = state.cov[:ins, :ins]
    cov[:ins, ins + 6:] = state.cov[:ins, ins:]
    cov[ins + 6:, :ins] = state.cov[ins:, :ins]
    cov[ins + 6:, ins + 6:] = state.cov[ins:, ins:]
    block = jac @ state.cov          # 6 x n, in old indexing
    cov[ins:ins + 6, :ins] = block[:, :ins]
    cov[ins:ins + 6, ins + 6:] = block[:, ins:]
    cov[:ins, ins:ins + 6] = block[:, :ins].T
    cov[ins + 6:, ins:ins + 6] = block[:, ins:].T
    cov[ins:ins + 6, ins:ins + 6] = jac @ state.cov @ jac.T
    out.cov = symmetrize(cov)
    return out


def marginalize_oldest(state):
    """Drop the oldest clone; plain row/column deletion of its covariance."""
    if not state.clones:
        return state
    out = state.copy()
    out.clones.pop()
    start = state.idx_clone(len(state.clones) - 1)
    keep = np.r_[0:start, start + 6:state.dim]
    out.cov = state.cov[np.ix_(keep, keep)]
    return out


def apply_correction(state, delta):
    """Left-multiplicative retraction exp(delta) * Xhat (right-invariant).

    Biases are corrected additively; each clone gets its own SE(3)
    left multiplication.
    """
    out = state.copy()
    nc = 9 + 3 * state.num_anchors
    out.core = lg.compose(lg.sek3_exp(delta[:nc]), state.core)
    out.bias = ImuBias(state.bias.gyro + delta[nc:nc + 3],
                       state.bias.accel + delta[nc + 3:nc + 6])
    for i, clone in enumerate(out.clones):
        d = delta[state.idx_clone(i):state.idx_clone(i) + 6]
        corr = lg.sek3_exp(d, k=1)
        clone.rot = corr.rot @ clone.rot
        clone.pos = (corr.rot @ clone.pos + corr.cols[:, 0])
    return out


def kalman_update(state, packet, retraction=apply_correction):
    """EKF update with Joseph-form covariance; returns the corrected state.

    K = P H^T (H P H^T + R)^-1, delta = K r, then the retraction is
    applied (multiplicative for the invariant filter).
    """
    h, r, rn = packet.jac, packet.residual, packet.noise
    if h.shape[1] != state.dim:
        raise ValueError(f"H has {h.shape[1]} columns, state dim {state.dim}")
    p = state.cov
    s = h @ p @ h.T + rn
    try:
        gain = np.linalg.solve(s, h @ p).T
    except np.linalg.LinAlgError as exc:
        raise SingularUpdateError("innovation covariance singular") from exc
    delta = gain @ r
    ikh = np.eye(state.dim) - gain @ h
    cov = symmetrize(ikh @ p @ ikh.T + gain @ rn @ gain.T)
    min_eig = float(np.linalg.eigvalsh(cov).min())
    if min_eig < -1e-6:
        raise NumericalFailureError(f"covariance min eigenvalue {min_eig:.3e}")
    out = retraction(state, delta)
    out.cov = cov
    return out


def chi2_gate(packet, cov, confidence=0.95):
    """Mahalanobis gate: r^T (H P H^T + R)^-1 r below the chi2 quantile."""
    s = packet.jac @ cov @ packet.jac.T + packet.noise
    try:
        gamma = float(packet.residual @ np.linalg.solve(s, packet.residual))
    except np.linalg.LinAlgError:
        return False
    return gamma < chi2.ppf(confidence, df=packet.rows)


def error_vector(est, truth):
    """Full right-invariant error of `est` relative to `truth`.

    Both are FilterState; anchors and clones must line up.  Core/clone
    errors are read off the group error eta = Xhat X^-1 (rotation log and
    the translation-like columns), biases are differenced.
    """
    eta = lg.compose(est.core, lg.inverse(truth.core))
    parts = [lg.so3_log(eta.rot), eta.cols.T.ravel(),
             est.bias.as_vector() - truth.bias.as_vector()]
    for ce, ct in zip(est.clones, truth.clones):
        rot_err = ce.rot @ ct.rot.T
        parts.append(lg.so3_log(rot_err))
        parts.append(ce.pos - rot_err @ ct.pos)
    return np.concatenate(parts)
