"""Config parsing (flat key=value INI) and dataset file I/O.

Formats
-------
imu.csv      : timestamp,wx,wy,wz,ax,ay,az
features.csv : timestamp,feature_id,u,v          (normalized coordinates)
ranges.csv   : timestamp,tag_id,anchor_id,range_m
*.tum        : timestamp tx ty tz qx qy qz qw    (9 significant digits)

CSV floats are written with 17 significant digits so write/read round-trips
are bit-exact.
"""

import configparser
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .propagation import ImuSample, NoiseParams
from .range_update import RangeMeasurement
from .sim import SimConfig
from .visual_update import BearingObservation

F = "%.17g"         # lossless float64
FT = "%.9g"         # TUM precision


class ParseError(ValueError):
    pass


@dataclass
class AuditConfig:
    steps: int = 40
    dt: float = 0.1
    est_sigma: float = 0.01
    trials: int = 10


@dataclass
class RunConfig:
    mode: str = "run"
    estimator: str = "cviro"
    runs: int = 30
    workers: int = 0            # 0 = one per CPU
    sim: SimConfig = field(default_factory=SimConfig)
    max_clones: int = 11
    gate_confidence: float = 0.95
    anchor_window: int = 50
    anchor_min_sv: float = 0.2
    min_track_obs: int = 3
    audit: AuditConfig = field(default_factory=AuditConfig)

    def validate(self):
        if self.max_clones < 2:
            raise ValueError("max_clones must be >= 2")
        self.sim.validate()
        return self

    def filter_kwargs(self):
        return dict(max_clones=self.max_clones,
                    gate_confidence=self.gate_confidence,
                    anchor_window=self.anchor_window,
                    anchor_min_sv=self.anchor_min_sv,
                    min_track_obs=self.min_track_obs)


def _parse_vec(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _parse_vec_list(text):
    return tuple(_parse_vec(chunk) for chunk in text.split(";") if chunk.strip())


def parse_config(path):
    """Read a key = value config file; missing keys keep their defaults
    (the defaults are the published simulation parameter set)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        parser.read_file(fh, source=path)
    cfg = RunConfig()
    run = parser["run"] if parser.has_section("run") else {}
    cfg.mode = run.get("mode", cfg.mode)
    cfg.estimator = run.get("estimator", cfg.estimator)
    cfg.runs = int(run.get("runs", cfg.runs))
    cfg.workers = int(run.get("workers", cfg.workers))

    s = cfg.sim
    if parser.has_section("sim"):
        sec = parser["sim"]
        s.seed = int(sec.get("seed", s.seed))
        s.duration = float(sec.get("duration", s.duration))
        s.imu_rate = int(sec.get("imu_rate", s.imu_rate))
        s.cam_rate = int(sec.get("cam_rate", s.cam_rate))
        s.uwb_rate = int(sec.get("uwb_rate", s.uwb_rate))
        s.trajectory = sec.get("trajectory", s.trajectory)
        s.circle_radius = float(sec.get("circle_radius", s.circle_radius))
        s.circle_rate = float(sec.get("circle_rate", s.circle_rate))
        if "liss_amp" in sec:
            s.liss_amp = _parse_vec(sec["liss_amp"])
        s.liss_freq = float(sec.get("liss_freq", s.liss_freq))
        if "waypoints" in sec:
            s.waypoints = _parse_vec_list(sec["waypoints"])
        s.height = float(sec.get("height", s.height))
        s.yaw_mode = sec.get("yaw_mode", s.yaw_mode)
        s.yaw_rate = float(sec.get("yaw_rate", s.yaw_rate))
        s.yaw_wobble_amp = float(sec.get("yaw_wobble_amp", s.yaw_wobble_amp))
        s.yaw_wobble_rate = float(sec.get("yaw_wobble_rate", s.yaw_wobble_rate))
        s.pitch_amp = float(sec.get("pitch_amp", s.pitch_amp))
        s.pitch_rate = float(sec.get("pitch_rate", s.pitch_rate))
        s.roll_amp = float(sec.get("roll_amp", s.roll_amp))
        s.roll_rate = float(sec.get("roll_rate", s.roll_rate))
        s.landmark_count = int(sec.get("landmark_count", s.landmark_count))
        if "landmark_radius" in sec:
            s.landmark_radius = _parse_vec(sec["landmark_radius"])
        if "landmark_height" in sec:
            s.landmark_height = _parse_vec(sec["landmark_height"])
        if "anchors" in sec:
            s.anchors = _parse_vec_list(sec["anchors"])
        s.focal_px = float(sec.get("focal_px", s.focal_px))
        s.fov_half_deg = float(sec.get("fov_half_deg", s.fov_half_deg))
        s.max_depth = float(sec.get("max_depth", s.max_depth))
        s.min_depth = float(sec.get("min_depth", s.min_depth))
        if "cam_p_imu" in sec:
            s.cam_p_imu = _parse_vec(sec["cam_p_imu"])
        if "tag_offset" in sec:
            s.tag_offset = _parse_vec(sec["tag_offset"])
        s.range_bias = float(sec.get("range_bias", s.range_bias))
        s.init_att_std = float(sec.get("init_att_std", s.init_att_std))
        s.init_vel_std = float(sec.get("init_vel_std", s.init_vel_std))
        s.init_pos_std = float(sec.get("init_pos_std", s.init_pos_std))
        s.init_bg_std = float(sec.get("init_bg_std", s.init_bg_std))
        s.init_ba_std = float(sec.get("init_ba_std", s.init_ba_std))

    if parser.has_section("noise"):
        sec = parser["noise"]
        nz = s.noise
        nz.gyro_noise_density = float(sec.get("gyro_noise_density",
                                              nz.gyro_noise_density))
        nz.accel_noise_density = float(sec.get("accel_noise_density",
                                                nz.accel_noise_density))
        nz.gyro_bias_walk = float(sec.get("gyro_bias_walk", nz.gyro_bias_walk))
        nz.accel_bias_walk = float(sec.get("accel_bias_walk",
                                           nz.accel_bias_walk))
        nz.cam_pixel_sigma = float(sec.get("cam_pixel_sigma",
                                           nz.cam_pixel_sigma))
        nz.uwb_range_sigma = float(sec.get("uwb_range_sigma",
                                           nz.uwb_range_sigma))

    if parser.has_section("filter"):
        sec = parser["filter"]
        cfg.max_clones = int(sec.get("max_clones", cfg.max_clones))
        cfg.gate_confidence = float(sec.get("gate_confidence",
                                            cfg.gate_confidence))
        cfg.anchor_window = int(sec.get("anchor_window", cfg.anchor_window))
        cfg.anchor_min_sv = float(sec.get("anchor_min_sv", cfg.anchor_min_sv))
        cfg.min_track_obs = int(sec.get("min_track_obs", cfg.min_track_obs))

    if parser.has_section("audit"):
        sec = parser["audit"]
        cfg.audit.steps = int(sec.get("steps", cfg.audit.steps))
        cfg.audit.dt = float(sec.get("dt", cfg.audit.dt))
        cfg.audit.est_sigma = float(sec.get("est_sigma", cfg.audit.est_sigma))
        cfg.audit.trials = int(sec.get("trials", cfg.audit.trials))
    return cfg.validate()


# ---------------------------------------------------------------------------
# CSV / TUM readers and writers.

def _rows(path, n_fields):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != n_fields:
                raise ParseError(f"{path}:{lineno}: expected {n_fields} "
                                 f"fields, got {len(parts)}")
            try:
                yield lineno, [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None


def _check_time(path, lineno, t, prev, strict):
    if (strict and t <= prev) or t < prev:
        raise ParseError(f"{path}:{lineno}: timestamp regression "
                         f"{t} after {prev}")
    return t


def read_imu(path):
    out, prev = [], -np.inf
    for lineno, vals in _rows(path, 7):
        prev = _check_time(path, lineno, vals[0], prev, strict=True)
        out.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return out


def write_imu(samples, path):
    with open(path, "w") as fh:
        fh.write("# timestamp,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            row = [s.timestamp, *s.gyro, *s.accel]
            fh.write(",".join(F % v for v in row) + "\n")


def read_features(path):
    out, prev = [], -np.inf
    for lineno, vals in _rows(path, 4):
        prev = _check_time(path, lineno, vals[0], prev, strict=False)
        out.append(BearingObservation(vals[0], int(vals[1]),
                                      np.array(vals[2:4])))
    return out


def write_features(obs, path):
    with open(path, "w") as fh:
        fh.write("# timestamp,feature_id,u,v\n")
        for ob in obs:
            fh.write(F % ob.timestamp + f",{ob.feature_id}," +
                     ",".join(F % v for v in ob.uv) + "\n")


def read_ranges(path):
    out, prev = [], -np.inf
    for lineno, vals in _rows(path, 4):
        prev = _check_time(path, lineno, vals[0], prev, strict=False)
        out.append(RangeMeasurement(vals[0], int(vals[2]), vals[3],
                                    int(vals[1])))
    return out


def write_ranges(ranges, path):
    with open(path, "w") as fh:
        fh.write("# timestamp,tag_id,anchor_id,range_m\n")
        for r in ranges:
            fh.write(F % r.timestamp + f",{r.tag_id},{r.anchor_id}," +
                     (F % r.range) + "\n")


def quat_xyzw(rot):
    return Rotation.from_matrix(rot).as_quat()


def write_tum(times, rotations, positions, path):
    with open(path, "w") as fh:
        for t, rot, pos in zip(times, rotations, positions):
            q = quat_xyzw(rot)
            vals = [t, *pos, *q]
            fh.write(" ".join(FT % v for v in vals) + "\n")


def read_tum(path):
    times, rots, poss = [], [], []
    prev = -np.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields")
            vals = [float(p) for p in parts]
            prev = _check_time(path, lineno, vals[0], prev, strict=True)
            times.append(vals[0])
            poss.append(np.array(vals[1:4]))
            rots.append(Rotation.from_quat(vals[4:8]).as_matrix())
    return np.array(times), np.array(rots), np.array(poss)


def write_state_csv(result, path):
    """Snapshot rows: t, quat xyzw, v, p, per-anchor estimate, diag(P)."""
    aids = sorted(result.anchors)
    with open(path, "w") as fh:
        fh.write("# timestamp,qx,qy,qz,qw,vx,vy,vz,px,py,pz"
                 + "".join(f",a{a}x,a{a}y,a{a}z" for a in aids)
                 + ",diag(P)...\n")
        for i, t in enumerate(result.t):
            row = [t, *quat_xyzw(result.rot[i]), *result.vel[i],
                   *result.pos[i]]
            for a in aids:
                row.extend(result.anchors[a].est[i])
            row.extend(result.cov_diag[i])
            fh.write(",".join(F % v for v in row) + "\n")


def write_kv(kv, path):
    with open(path, "w") as fh:
        for key in sorted(kv):
            val = kv[key]
            if isinstance(val, float):
                fh.write(f"{key} = {F % val}\n")
            else:
                fh.write(f"{key} = {val}\n")


def read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report.table() + "\n")
    write_kv(report.keyvalues(), os.path.join(out_dir, "report.kv"))


def write_series(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name, s in report.estimators.items():
        path = os.path.join(out_dir, f"series_{name}.csv")
        with open(path, "w") as fh:
            fh.write("# t,prmse,ormse,pnees,onees\n")
            for i, t in enumerate(s.t):
                row = [t, s.prmse_series[i], s.ormse_series[i],
                       s.pnees_series[i], s.onees_series[i]]
                fh.write(",".join(F % v for v in row) + "\n")


def write_dataset(dataset, out_dir):
    """Emit the CSV/TUM dataset files plus the exact initial state."""
    os.makedirs(out_dir, exist_ok=True)
    write_imu(dataset.imu, os.path.join(out_dir, "imu.csv"))
    write_features(dataset.features, os.path.join(out_dir, "features.csv"))
    write_ranges(dataset.ranges, os.path.join(out_dir, "ranges.csv"))
    truth = dataset.truth
    step = dataset.config.imu_rate // dataset.config.cam_rate
    idx = range(0, len(truth), step)
    write_tum([truth.t[i] for i in idx], [truth.rot[i] for i in idx],
              [truth.pos[i] for i in idx], os.path.join(out_dir, "truth.tum"))
    q0 = quat_xyzw(truth.rot[0])
    init = {
        "t0": truth.t[0],
        "quat_xyzw": " ".join(F % v for v in q0),
        "velocity": " ".join(F % v for v in truth.vel[0]),
        "position": " ".join(F % v for v in truth.pos[0]),
        "gyro_bias": " ".join(F % v for v in truth.gyro_bias[0]),
        "accel_bias": " ".join(F % v for v in truth.accel_bias[0]),
    }
    write_kv(init, os.path.join(out_dir, "init.kv"))


def read_initial_state(path):
    kv = read_kv(path)
    rot = Rotation.from_quat([float(x) for x in kv["quat_xyzw"].split()]) \
        .as_matrix()
    return dict(
        rot=rot,
        vel=np.array([float(x) for x in kv["velocity"].split()]),
        pos=np.array([float(x) for x in kv["position"].split()]),
        gyro_bias=np.array([float(x) for x in kv["gyro_bias"].split()]),
        accel_bias=np.array([float(x) for x in kv["accel_bias"].split()]),
    )
