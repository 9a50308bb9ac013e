"""MSCKF visual update: triangulation over the clone window, per-feature
Jacobians, left-nullspace projection of the feature, and QR compression."""

from dataclasses import dataclass, field

import numpy as np

from .state import UpdatePacket, chi2_gate, kalman_update, apply_correction

MIN_DEPTH = 1e-6
MIN_PARALLAX = 1e-3     # rad
GN_MAX_ITERS = 10


class TrackRejected(RuntimeError):
    """Track unusable: insufficient parallax, bad depth, or divergence."""


@dataclass
class BearingObservation:
    timestamp: float
    feature_id: int
    uv: np.ndarray

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)


@dataclass
class CameraExtrinsics:
    """IMU-to-camera rotation and the IMU origin expressed in the camera."""

    rot_cam_imu: np.ndarray
    p_imu_in_cam: np.ndarray

    def __post_init__(self):
        self.rot_cam_imu = np.asarray(self.rot_cam_imu, dtype=float)
        self.p_imu_in_cam = np.asarray(self.p_imu_in_cam, dtype=float)


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)

    def add(self, obs):
        self.observations.append(obs)

    def __len__(self):
        return len(self.observations)


def project(p_cam):
    if p_cam[2] <= MIN_DEPTH:
        raise TrackRejected(f"projection depth {p_cam[2]:.3e} not positive")
    return p_cam[:2] / p_cam[2]


def point_in_camera(rot_imu, pos_imu, extrinsics, p_world):
    """World point into the camera frame of a pose (R = world<-imu)."""
    return extrinsics.rot_cam_imu @ (rot_imu.T @ (p_world - pos_imu)) \
        + extrinsics.p_imu_in_cam


def camera_pose(rot_imu, pos_imu, extrinsics):
    """World<-camera rotation and camera center in the world."""
    rot_wc = rot_imu @ extrinsics.rot_cam_imu.T
    center = pos_imu - rot_wc @ extrinsics.p_imu_in_cam
    return rot_wc, center


def _match_clones(track, clones):
    """Pair each observation with the clone at its timestamp (unmatched drop)."""
    by_time = {c.timestamp: (i, c) for i, c in enumerate(clones)}
    pairs = []
    for obs in track.observations:
        hit = by_time.get(obs.timestamp)
        if hit is not None:
            pairs.append((obs, *hit))
    return pairs


def triangulate(track, clones, extrinsics):
    """Triangulate a track: linear midpoint seed, then Gauss-Newton.

    Raises TrackRejected for <2 usable observations, parallax below
    threshold, non-positive depth in any view, or divergence.
    """
    pairs = _match_clones(track, clones)
    if len(pairs) < 2:
        raise TrackRejected("need at least two matched observations")
    origins, dirs, obs_uv, poses = [], [], [], []
    for obs, _, clone in pairs:
        rot_wc, center = camera_pose(clone.rot, clone.pos, extrinsics)
        ray = rot_wc @ np.append(obs.uv, 1.0)
        origins.append(center)
        dirs.append(ray / np.linalg.norm(ray))
        obs_uv.append(obs.uv)
        poses.append((clone.rot, clone.pos))
    # Parallax: largest angle between observation rays.
    cos_min = min(float(np.dot(dirs[i], dirs[j]))
                  for i in range(len(dirs)) for j in range(i + 1, len(dirs)))
    if np.arccos(np.clip(cos_min, -1.0, 1.0)) < MIN_PARALLAX:
        raise TrackRejected("insufficient parallax")
    # Linear midpoint: min sum |(I - d d^T)(p - o)|^2.
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, dirs):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ o
    p = np.linalg.solve(a, b)

    cost = None
    for _ in range(GN_MAX_ITERS):
        jac_rows, res_rows = [], []
        for (rot, pos), uv in zip(poses, obs_uv):
            pc = point_in_camera(rot, pos, extrinsics, p)
            if pc[2] <= MIN_DEPTH:
                raise TrackRejected("negative depth during refinement")
            hp = projection_jacobian(pc)
            jac_rows.append(hp @ extrinsics.rot_cam_imu @ rot.T)
            res_rows.append(uv - project(pc))
        jac = np.vstack(jac_rows)
        res = np.concatenate(res_rows)
        new_cost = float(res @ res)
        if cost is not None and new_cost > 4.0 * cost + 1e-12:
            raise TrackRejected("Gauss-Newton diverged")
        cost = new_cost
        try:
            step = np.linalg.lstsq(jac, res, rcond=None)[0]
        except np.linalg.LinAlgError as exc:
            raise TrackRejected("normal equations singular") from exc
        p = p + step
        if np.linalg.norm(step) < 1e-10:
            break
    for (rot, pos), _ in zip(poses, obs_uv):
        if point_in_camera(rot, pos, extrinsics, p)[2] <= MIN_DEPTH:
            raise TrackRejected("refined point behind a camera")
    return p


def projection_jacobian(p_cam):
    """d(projection)/d(p_cam) at a camera-frame point."""
    x, y, z = p_cam
    return np.array([[1.0 / z, 0.0, -x / z**2],
                     [0.0, 1.0 / z, -y / z**2]])


def visual_jacobians(track, p_feat, state, extrinsics):
    """Stacked 2-row blocks (H_x, H_f, residuals) for one feature.

    In invariant coordinates the clone position column receives
    -H_pc C_R I_R^T and the feature +H_pc C_R I_R^T; every other state
    column (including clone orientation and anchors) is exactly zero.
    Observations with non-positive predicted depth are dropped.
    """
    pairs = _match_clones(track, state.clones)
    h_x_rows, h_f_rows, res_rows = [], [], []
    for obs, clone_idx, clone in pairs:
        pc = point_in_camera(clone.rot, clone.pos, extrinsics, p_feat)
        if pc[2] <= MIN_DEPTH:
            continue
        block = projection_jacobian(pc) @ extrinsics.rot_cam_imu @ clone.rot.T
        h_x = np.zeros((2, state.dim))
        ic = state.idx_clone(clone_idx)
        h_x[:, ic + 3:ic + 6] = -block
        h_x_rows.append(h_x)
        h_f_rows.append(block)
        res_rows.append(obs.uv - project(pc))
    if not h_x_rows:
        raise TrackRejected("no observation with positive depth")
    return np.vstack(h_x_rows), np.vstack(h_f_rows), np.concatenate(res_rows)


def nullspace_project(h_x, h_f, residuals, cam_sigma):
    """Project residuals onto the left nullspace of H_f (feature removed).

    The basis has orthonormal columns so the projected noise stays white;
    output has 3 fewer rows.
    """
    rows = h_f.shape[0]
    if rows < 5:
        raise TrackRejected("too few rows for nullspace projection")
    u, s, _ = np.linalg.svd(h_f)
    if s[2] <= 1e-10 * s[0]:
        raise TrackRejected("feature Jacobian rank deficient")
    basis = u[:, 3:]
    noise = cam_sigma**2 * np.eye(rows - 3)
    return UpdatePacket(basis.T @ h_x, basis.T @ residuals, noise)


def compress_and_update(state, packets, gate_confidence=0.95,
                        retraction=apply_correction):
    """Gate per feature, stack, QR-compress to at most state-dim rows,
    then apply one Kalman update.  Returns (state, accepted_count)."""
    accepted = [p for p in packets if chi2_gate(p, state.cov, gate_confidence)]
    if not accepted:
        return state, 0
    h = np.vstack([p.jac for p in accepted])
    r = np.concatenate([p.residual for p in accepted])
    sigma2 = float(accepted[0].noise[0, 0])
    if h.shape[0] > h.shape[1]:
        q, rr = np.linalg.qr(h)
        h, r = rr, q.T @ r
    packet = UpdatePacket(h, r, sigma2 * np.eye(h.shape[0]))
    return kalman_update(state, packet, retraction), len(accepted)
