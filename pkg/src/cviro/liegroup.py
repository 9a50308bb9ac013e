"""Matrix Lie group primitives for SO(3) and the extended poses SE_K(3).

An SE_K(3) element is a rotation plus K translation-like columns sharing
that rotation; embedded as a (3+K)x(3+K) matrix it is

    [ R   c_1 ... c_K ]
    [ 0       I_K     ]

All operations are pure functions on numpy arrays / ExtendedPose values.
"""

from dataclasses import dataclass

import numpy as np

# Below this rotation angle exp/log/left-Jacobian switch to Taylor series.
SMALL_ANGLE = 1e-7
# log() is rejected this close to the pi singularity.
MAX_LOG_ANGLE = np.pi - 1e-6


class AmbiguousLogError(ValueError):
    """Rotation angle is too close to pi for a well-defined logarithm."""


def skew(v):
    """3-vector to skew-symmetric matrix, skew(v) @ x == cross(v, x)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def unskew(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega):
    """Rodrigues formula; second-order Taylor below the small-angle cutoff."""
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        raise ValueError("so3_exp: non-finite rotation vector")
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rot):
    """Inverse of so3_exp; raises AmbiguousLogError near angle pi."""
    trace = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(trace)
    if theta >= MAX_LOG_ANGLE:
        raise AmbiguousLogError(f"rotation angle {theta:.6f} too close to pi")
    axis_raw = unskew(rot - rot.T) * 0.5  # == axis * sin(theta)
    if theta < SMALL_ANGLE:
        # sin(theta)/theta ~ 1 - theta^2/6
        return axis_raw * (1.0 + theta**2 / 6.0)
    return axis_raw * (theta / np.sin(theta))


def left_jacobian(omega):
    """Left Jacobian of SO(3): J_l(w) = sum w^n / (n+1)!."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * w + b * (w @ w)


def left_jacobian_inv(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + (w @ w) / 12.0
    b = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * w + b * (w @ w)


def project_rotation(rot):
    """Nearest rotation matrix (polar projection via SVD)."""
    u, _, vt = np.linalg.svd(rot)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


@dataclass
class ExtendedPose:
    """SE_K(3) element: rotation `rot` (3x3) and K columns `cols` (3xK)."""

    rot: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=float)
        self.cols = np.asarray(self.cols, dtype=float)
        if self.cols.ndim == 1:
            self.cols = self.cols.reshape(3, 1)

    @property
    def k(self):
        return self.cols.shape[1]

    @property
    def dof(self):
        return 3 + 3 * self.k

    def col(self, i):
        return self.cols[:, i]

    def copy(self):
        return ExtendedPose(self.rot.copy(), self.cols.copy())

    def as_matrix(self):
        k = self.k
        m = np.eye(3 + k)
        m[:3, :3] = self.rot
        m[:3, 3:] = self.cols
        return m

    @classmethod
    def from_matrix(cls, m):
        k = m.shape[0] - 3
        if m.shape[0] != m.shape[1] or k < 1:
            raise ValueError(f"not an SE_K(3) matrix: shape {m.shape}")
        if not (np.allclose(m[3:, :3], 0.0, atol=1e-9)
                and np.allclose(m[3:, 3:], np.eye(k), atol=1e-9)):
            raise ValueError("bottom block rows are not [0 I]")
        return cls(m[:3, :3].copy(), m[:3, 3:].copy())

    @classmethod
    def identity(cls, k):
        return cls(np.eye(3), np.zeros((3, k)))


def hat(xi, k=None):
    """Tangent vector [theta; col_1; ...; col_K] to its matrix form."""
    xi = np.asarray(xi, dtype=float)
    if k is None:
        k = xi.size // 3 - 1
    if xi.size != 3 + 3 * k:
        raise ValueError(f"tangent length {xi.size} does not match K={k}")
    m = np.zeros((3 + k, 3 + k))
    m[:3, :3] = skew(xi[:3])
    m[:3, 3:] = xi[3:].reshape(k, 3).T
    return m


def vee(m):
    k = m.shape[0] - 3
    return np.concatenate([unskew(m[:3, :3]), m[:3, 3:].T.ravel()])


def sek3_exp(xi, k=None):
    """Exponential map: rotation by Rodrigues, columns through J_l."""
    xi = np.asarray(xi, dtype=float)
    if k is None:
        k = xi.size // 3 - 1
    if xi.size != 3 + 3 * k:
        raise ValueError(f"tangent length {xi.size} does not match K={k}")
    theta = xi[:3]
    jl = left_jacobian(theta)
    cols = jl @ xi[3:].reshape(k, 3).T
    return ExtendedPose(so3_exp(theta), cols)


def sek3_log(pose):
    theta = so3_log(pose.rot)
    jinv = left_jacobian_inv(theta)
    return np.concatenate([theta, (jinv @ pose.cols).T.ravel()])


def compose(a, b):
    if a.k != b.k:
        raise ValueError(f"column count mismatch: {a.k} vs {b.k}")
    return ExtendedPose(a.rot @ b.rot, a.rot @ b.cols + a.cols)


def inverse(pose):
    rt = pose.rot.T
    return ExtendedPose(rt, -(rt @ pose.cols))


def adjoint(pose):
    """Adjoint matrix: diagonal blocks R, block (i+1, 0) = skew(col_i) @ R."""
    k = pose.k
    n = 3 + 3 * k
    ad = np.zeros((n, n))
    ad[:3, :3] = pose.rot
    for i in range(k):
        r = 3 + 3 * i
        ad[r:r + 3, r:r + 3] = pose.rot
        ad[r:r + 3, :3] = skew(pose.col(i)) @ pose.rot
    return ad


def rotation_distance(r1, r2):
    """Geodesic angle between two rotations."""
    return np.linalg.norm(so3_log(r1 @ r2.T))
