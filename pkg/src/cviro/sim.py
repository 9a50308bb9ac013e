"""Deterministic synthetic world: analytic ground-truth trajectories,
landmarks, anchors, and noise-corrupted IMU/camera/UWB streams.

IMU measurements are synthesized to be exactly invertible by the filter's
zero-order-hold propagation (rotation from the relative log between truth
samples, acceleration from the velocity increment), so a zero-noise dataset
replays to the truth up to floating-point error.  Separate counter-based
RNG streams (Philox) per sensor keep Monte-Carlo draws independent.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import liegroup as lg
from .propagation import GRAVITY, ImuSample, NoiseParams
from .range_update import RangeMeasurement, UwbExtrinsics
from .visual_update import BearingObservation, CameraExtrinsics

# Forward-looking camera: optical axis along body x, image x to the right.
DEFAULT_CAM_ROT = ((0.0, -1.0, 0.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))

_STREAMS = {"imu": 0, "cam": 1, "uwb": 2, "bias": 3, "landmarks": 4, "init": 5}


def stream_rng(seed, name):
    """Independent deterministic generator for one named noise stream."""
    root = np.random.SeedSequence(seed)
    child = root.spawn(len(_STREAMS))[_STREAMS[name]]
    return np.random.Generator(np.random.Philox(child))


@dataclass
class SimConfig:
    seed: int = 0
    duration: float = 60.0
    imu_rate: int = 100
    cam_rate: int = 10
    uwb_rate: int = 10
    trajectory: str = "lissajous"            # circle | lissajous | spline
    circle_radius: float = 5.0
    circle_rate: float = 0.5                 # rad/s
    liss_amp: tuple = (5.0, 4.0, 0.8)
    liss_freq: float = 0.4
    waypoints: tuple = ((0.0, 0.0, 1.0), (6.0, 2.0, 1.5), (8.0, 8.0, 0.8),
                        (2.0, 6.0, 1.8), (-4.0, 8.0, 1.2), (-6.0, 2.0, 0.9),
                        (0.0, 0.0, 1.0))
    height: float = 1.2
    yaw_mode: str = "spin"                   # spin | follow
    yaw_rate: float = 0.6                    # rad/s, spin mode
    yaw_wobble_amp: float = 0.3
    yaw_wobble_rate: float = 1.1
    pitch_amp: float = 0.25
    pitch_rate: float = 1.3
    roll_amp: float = 0.2
    roll_rate: float = 0.9
    landmark_count: int = 48
    landmark_radius: tuple = (7.0, 14.0)
    landmark_height: tuple = (-1.0, 4.0)
    anchors: tuple = ((-8.0, -8.0, 0.4), (8.0, -8.0, 2.6),
                      (8.0, 8.0, 0.9), (-8.0, 8.0, 2.1))
    noise: NoiseParams = field(default_factory=NoiseParams)
    focal_px: float = 460.0
    fov_half_deg: float = 65.0
    max_depth: float = 30.0
    min_depth: float = 0.2
    cam_rot: tuple = DEFAULT_CAM_ROT
    cam_p_imu: tuple = (0.02, -0.04, 0.01)
    tag_offset: tuple = (0.08, -0.03, 0.05)
    range_bias: float = 0.0
    init_att_std: float = 2.0e-3             # rad, initial estimate draw
    init_vel_std: float = 5.0e-3             # m/s
    init_pos_std: float = 5.0e-3             # m
    init_bg_std: float = 5.0e-5              # rad/s
    init_ba_std: float = 5.0e-4              # m/s^2

    def validate(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        for r in (self.cam_rate, self.uwb_rate):
            if self.imu_rate % r != 0:
                raise ValueError("camera/UWB rates must divide the IMU rate")
        self.noise.validate()
        return self

    def camera_extrinsics(self):
        return CameraExtrinsics(np.array(self.cam_rot, dtype=float),
                                np.array(self.cam_p_imu, dtype=float))

    def uwb_extrinsics(self):
        return UwbExtrinsics(np.array(self.tag_offset, dtype=float),
                             self.range_bias)

    def cam_sigma(self):
        """Pixel noise converted to normalized image coordinates."""
        return self.noise.cam_pixel_sigma / self.focal_px


# ---------------------------------------------------------------------------
# Analytic position profiles: pos/vel/acc as functions of a time array.

class _Circle:
    def __init__(self, cfg):
        self.r = cfg.circle_radius
        self.w = cfg.circle_rate
        self.h = cfg.height

    def pos(self, t):
        w = self.w
        return np.stack([self.r * np.cos(w * t), self.r * np.sin(w * t),
                         self.h * np.ones_like(t)], axis=-1)

    def vel(self, t):
        w = self.w
        return np.stack([-self.r * w * np.sin(w * t),
                         self.r * w * np.cos(w * t),
                         np.zeros_like(t)], axis=-1)

    def acc(self, t):
        w = self.w
        return np.stack([-self.r * w * w * np.cos(w * t),
                         -self.r * w * w * np.sin(w * t),
                         np.zeros_like(t)], axis=-1)


class _Lissajous:
    def __init__(self, cfg):
        self.ax, self.ay, self.az = cfg.liss_amp
        self.w = cfg.liss_freq
        self.h = cfg.height
        self.phase = 0.7

    def pos(self, t):
        w = self.w
        return np.stack([self.ax * np.sin(2 * w * t),
                         self.ay * np.sin(3 * w * t + self.phase),
                         self.h + self.az * np.sin(w * t)], axis=-1)

    def vel(self, t):
        w = self.w
        return np.stack([2 * w * self.ax * np.cos(2 * w * t),
                         3 * w * self.ay * np.cos(3 * w * t + self.phase),
                         w * self.az * np.cos(w * t)], axis=-1)

    def acc(self, t):
        w = self.w
        return np.stack([-(2 * w) ** 2 * self.ax * np.sin(2 * w * t),
                         -(3 * w) ** 2 * self.ay * np.sin(3 * w * t + self.phase),
                         -w * w * self.az * np.sin(w * t)], axis=-1)


class _Spline:
    """Periodic cubic spline through the configured waypoints."""

    def __init__(self, cfg):
        pts = np.array(cfg.waypoints, dtype=float)
        if not np.allclose(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[0]])
        knots = np.linspace(0.0, cfg.duration, len(pts))
        self.spline = CubicSpline(knots, pts, bc_type='periodic')
        self.d1 = self.spline.derivative(1)
        self.d2 = self.spline.derivative(2)

    def pos(self, t):
        return np.atleast_2d(self.spline(t))

    def vel(self, t):
        return np.atleast_2d(self.d1(t))

    def acc(self, t):
        return np.atleast_2d(self.d2(t))


_PROFILES = {"circle": _Circle, "lissajous": _Lissajous, "spline": _Spline}


def _euler_to_rot(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def _body_rates(yaw_d, pitch_d, roll_d, pitch, roll):
    """ZYX Euler angle rates to body angular velocity."""
    return np.array([
        roll_d - yaw_d * np.sin(pitch),
        pitch_d * np.cos(roll) + yaw_d * np.cos(pitch) * np.sin(roll),
        -pitch_d * np.sin(roll) + yaw_d * np.cos(pitch) * np.cos(roll),
    ])


@dataclass
class TruthTrajectory:
    """Ground truth sampled at the IMU rate (N+1 samples over the run)."""

    t: np.ndarray
    rot: np.ndarray          # (N, 3, 3), world <- body
    vel: np.ndarray
    pos: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    omega_body: np.ndarray   # instantaneous analytic rates
    accel_body: np.ndarray
    imu_rate: int = 100

    def __len__(self):
        return len(self.t)

    def index_of(self, time):
        idx = int(round(time * self.imu_rate))
        if not np.isclose(self.t[idx], time, atol=1e-9):
            raise KeyError(f"no truth sample at t={time}")
        return idx


def gen_trajectory(cfg, bias_rng=None):
    """Sample the analytic trajectory at the IMU rate, with bias walks."""
    cfg.validate()
    profile = _PROFILES[cfg.trajectory](cfg)
    n = int(round(cfg.duration * cfg.imu_rate))
    t = np.arange(n + 1) / cfg.imu_rate
    pos = profile.pos(t)
    vel = profile.vel(t)
    acc = profile.acc(t)

    if cfg.yaw_mode == "spin":
        yaw = cfg.yaw_rate * t + cfg.yaw_wobble_amp * np.sin(cfg.yaw_wobble_rate * t)
        yaw_d = cfg.yaw_rate + cfg.yaw_wobble_amp * cfg.yaw_wobble_rate \
            * np.cos(cfg.yaw_wobble_rate * t)
    elif cfg.yaw_mode == "follow":
        yaw = np.unwrap(np.arctan2(vel[:, 1], vel[:, 0])) \
            + cfg.yaw_wobble_amp * np.sin(cfg.yaw_wobble_rate * t)
        speed2 = vel[:, 0] ** 2 + vel[:, 1] ** 2
        yaw_d = (vel[:, 0] * acc[:, 1] - vel[:, 1] * acc[:, 0]) / speed2 \
            + cfg.yaw_wobble_amp * cfg.yaw_wobble_rate * np.cos(cfg.yaw_wobble_rate * t)
    else:
        raise ValueError(f"unknown yaw mode {cfg.yaw_mode!r}")
    pitch = cfg.pitch_amp * np.sin(cfg.pitch_rate * t)
    pitch_d = cfg.pitch_amp * cfg.pitch_rate * np.cos(cfg.pitch_rate * t)
    roll = cfg.roll_amp * np.sin(cfg.roll_rate * t)
    roll_d = cfg.roll_amp * cfg.roll_rate * np.cos(cfg.roll_rate * t)

    rot = np.empty((n + 1, 3, 3))
    omega = np.empty((n + 1, 3))
    acc_body = np.empty((n + 1, 3))
    for k in range(n + 1):
        rot[k] = _euler_to_rot(yaw[k], pitch[k], roll[k])
        omega[k] = _body_rates(yaw_d[k], pitch_d[k], roll_d[k], pitch[k], roll[k])
        acc_body[k] = rot[k].T @ (acc[k] - GRAVITY)

    dt = 1.0 / cfg.imu_rate
    if bias_rng is None:
        bias_rng = stream_rng(cfg.seed, "bias")
    bg = np.zeros((n + 1, 3))
    ba = np.zeros((n + 1, 3))
    if cfg.noise.gyro_bias_walk > 0:
        steps = bias_rng.normal(0.0, cfg.noise.gyro_bias_walk * np.sqrt(dt), (n, 3))
        bg[1:] = np.cumsum(steps, axis=0)
    if cfg.noise.accel_bias_walk > 0:
        steps = bias_rng.normal(0.0, cfg.noise.accel_bias_walk * np.sqrt(dt), (n, 3))
        ba[1:] = np.cumsum(steps, axis=0)
    return TruthTrajectory(t=t, rot=rot, vel=vel, pos=pos, gyro_bias=bg,
                           accel_bias=ba, omega_body=omega, accel_body=acc_body,
                           imu_rate=cfg.imu_rate)


def synth_imu(truth, noise, rng):
    """ZOH-consistent IMU measurements between consecutive truth samples."""
    n = len(truth) - 1
    dt = 1.0 / truth.imu_rate
    sg = noise.gyro_noise_density * np.sqrt(truth.imu_rate)
    sa = noise.accel_noise_density * np.sqrt(truth.imu_rate)
    wn = rng.normal(0.0, 1.0, (n, 3)) * sg if sg > 0 else np.zeros((n, 3))
    an = rng.normal(0.0, 1.0, (n, 3)) * sa if sa > 0 else np.zeros((n, 3))
    samples = []
    for k in range(n):
        gyro = lg.so3_log(truth.rot[k].T @ truth.rot[k + 1]) / dt
        accel = truth.rot[k].T @ ((truth.vel[k + 1] - truth.vel[k]) / dt - GRAVITY)
        samples.append(ImuSample(
            timestamp=truth.t[k],
            gyro=gyro + truth.gyro_bias[k] + wn[k],
            accel=accel + truth.accel_bias[k] + an[k]))
    return samples


def gen_landmarks(cfg, rng=None):
    """Landmarks on a cylindrical shell around the workspace origin."""
    if rng is None:
        rng = stream_rng(cfg.seed, "landmarks")
    r = rng.uniform(*cfg.landmark_radius, cfg.landmark_count)
    ang = rng.uniform(0.0, 2.0 * np.pi, cfg.landmark_count)
    z = rng.uniform(*cfg.landmark_height, cfg.landmark_count)
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=-1)


def synth_camera(truth, landmarks, extrinsics, cfg, rng):
    """Project visible landmarks at camera epochs, noise in normalized uv."""
    step = cfg.imu_rate // cfg.cam_rate
    cos_fov = np.cos(np.deg2rad(cfg.fov_half_deg))
    sigma = cfg.cam_sigma()
    obs = []
    for k in range(0, len(truth), step):
        rot, pos = truth.rot[k], truth.pos[k]
        pc = (extrinsics.rot_cam_imu @ rot.T @ (landmarks - pos).T).T \
            + extrinsics.p_imu_in_cam
        depth = pc[:, 2]
        rho = np.linalg.norm(pc, axis=1)
        visible = (depth > cfg.min_depth) & (depth < cfg.max_depth) \
            & (depth >= cos_fov * np.maximum(rho, 1e-12))
        for fid in np.flatnonzero(visible):
            uv = pc[fid, :2] / depth[fid]
            if sigma > 0:
                uv = uv + rng.normal(0.0, sigma, 2)
            obs.append(BearingObservation(truth.t[k], int(fid), uv))
    return obs


def synth_uwb(truth, anchors, extrinsics, cfg, rng):
    """Exact geometric ranges plus bias and Gaussian noise, per anchor."""
    step = cfg.imu_rate // cfg.uwb_rate
    sigma = cfg.noise.uwb_range_sigma
    anchors = np.asarray(anchors, dtype=float)
    out = []
    for k in range(0, len(truth), step):
        tag = truth.pos[k] + truth.rot[k] @ extrinsics.tag_offset
        dists = np.linalg.norm(anchors - tag, axis=1)
        noise = rng.normal(0.0, sigma, len(anchors)) if sigma > 0 \
            else np.zeros(len(anchors))
        for a, (d, w) in enumerate(zip(dists, noise)):
            out.append(RangeMeasurement(truth.t[k], a,
                                        d + extrinsics.range_bias + w, 0))
    return out


@dataclass
class SimDataset:
    config: SimConfig
    truth: TruthTrajectory
    landmarks: np.ndarray
    anchors: np.ndarray
    imu: list
    features: list
    ranges: list

    def features_by_time(self):
        grouped = {}
        for ob in self.features:
            grouped.setdefault(ob.timestamp, []).append(ob)
        return grouped

    def ranges_by_time(self):
        grouped = {}
        for rm in self.ranges:
            grouped.setdefault(rm.timestamp, []).append(rm)
        return grouped


def simulate(cfg):
    """Full deterministic dataset for one seed."""
    cfg.validate()
    truth = gen_trajectory(cfg, bias_rng=stream_rng(cfg.seed, "bias"))
    landmarks = gen_landmarks(cfg, stream_rng(cfg.seed, "landmarks"))
    anchors = np.array(cfg.anchors, dtype=float)
    imu = synth_imu(truth, cfg.noise, stream_rng(cfg.seed, "imu"))
    features = synth_camera(truth, landmarks, cfg.camera_extrinsics(), cfg,
                            stream_rng(cfg.seed, "cam"))
    ranges = synth_uwb(truth, anchors, cfg.uwb_extrinsics(), cfg,
                       stream_rng(cfg.seed, "uwb"))
    return SimDataset(config=cfg, truth=truth, landmarks=landmarks,
                      anchors=anchors, imu=imu, features=features,
                      ranges=ranges)
