"""Replay a dataset through an estimator and collect per-epoch snapshots;
Monte-Carlo fan-out lives here so workers stay picklable."""

from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np

from . import evaluation, sim, visual_update
from .baseline import BaselineVioFilter, initial_state_vector
from .filters import CviroFilter, FilterConfig, initial_state_invariant
from .liegroup import so3_exp
from .state import ImuBias

ESTIMATORS = ("cviro", "vio-baseline")


@dataclass
class AnchorSeries:
    est: np.ndarray          # (N, 3), NaN before initialization
    cov: np.ndarray          # (N, 3, 3)
    init_time: float = float("nan")

    def final(self):
        if not np.all(np.isfinite(self.est[-1])):
            return None, None
        return self.est[-1], self.cov[-1]


@dataclass
class RunResult:
    estimator: str
    t: np.ndarray
    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray
    cov_ori: np.ndarray
    cov_pos: np.ndarray
    cov_diag: list
    anchors: dict = field(default_factory=dict)
    anchor_truth: dict = field(default_factory=dict)
    update_count: int = 0
    final_reproj: float = float("nan")


@dataclass
class InitDraw:
    """Shared initial estimate for both estimators (one draw per run)."""

    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray
    bias: ImuBias
    p0_vec: np.ndarray


def draw_initial(dataset, floor=1e-12):
    """Initial estimate = truth at t0 perturbed per the configured stds;
    the same draw seeds the vector-coordinate initial covariance."""
    cfg = dataset.config
    rng = sim.stream_rng(cfg.seed, "init")
    stds = np.array([cfg.init_att_std] * 3 + [cfg.init_vel_std] * 3
                    + [cfg.init_pos_std] * 3 + [cfg.init_bg_std] * 3
                    + [cfg.init_ba_std] * 3)
    draw = rng.normal(0.0, 1.0, 15) * stds
    truth = dataset.truth
    rot = so3_exp(draw[0:3]) @ truth.rot[0]
    vel = truth.vel[0] + draw[3:6]
    pos = truth.pos[0] + draw[6:9]
    bias = ImuBias(truth.gyro_bias[0] + draw[9:12],
                   truth.accel_bias[0] + draw[12:15])
    p0 = np.diag(np.maximum(stds, floor) ** 2)
    return InitDraw(rot=rot, vel=vel, pos=pos, bias=bias, p0_vec=p0)


def build_filter_config(sim_cfg, max_clones=11, gate_confidence=0.95,
                        anchor_window=50, anchor_min_sv=0.2, min_track_obs=3):
    return FilterConfig(
        noise=sim_cfg.noise, max_clones=max_clones,
        gate_confidence=gate_confidence, anchor_window=anchor_window,
        anchor_min_sv=anchor_min_sv, min_track_obs=min_track_obs,
        cam_extrinsics=sim_cfg.camera_extrinsics(),
        uwb_extrinsics=sim_cfg.uwb_extrinsics(),
        cam_sigma=max(sim_cfg.cam_sigma(), 1e-9))


def make_filter(estimator, dataset, filter_cfg, init_draw):
    if estimator == "cviro":
        state = initial_state_invariant(init_draw.rot, init_draw.vel,
                                        init_draw.pos, init_draw.bias,
                                        init_draw.p0_vec)
        anchor_ids = list(range(len(dataset.anchors)))
        return CviroFilter(filter_cfg, state, anchor_ids)
    if estimator == "vio-baseline":
        state = initial_state_vector(init_draw.rot, init_draw.vel,
                                     init_draw.pos, init_draw.bias,
                                     init_draw.p0_vec)
        return BaselineVioFilter(filter_cfg, state)
    raise ValueError(f"unknown estimator {estimator!r}")


def final_reprojection(filt):
    """Max |residual| over currently tracked, triangulable features."""
    worst = 0.0
    found = False
    for track in filt.tracks.values():
        if len(track) < 3:
            continue
        try:
            p = visual_update.triangulate(track, filt.state.clones,
                                          filt.cfg.cam_extrinsics)
            _, _, res = visual_update.visual_jacobians(
                track, p, filt.state, filt.cfg.cam_extrinsics)
        except visual_update.TrackRejected:
            continue
        worst = max(worst, float(np.abs(res).max()))
        found = True
    return worst if found else float("nan")


def replay(dataset, estimator, filter_cfg=None, init_draw=None):
    """Run one estimator over a dataset; snapshots at every sensor epoch."""
    if filter_cfg is None:
        filter_cfg = build_filter_config(dataset.config)
    if init_draw is None:
        init_draw = draw_initial(dataset)
    filt = make_filter(estimator, dataset, filter_cfg, init_draw)
    feats = dataset.features_by_time()
    rngs = dataset.ranges_by_time()
    epochs = sorted(set(feats) | set(rngs))
    imu = dataset.imu
    n = len(epochs)
    res = RunResult(
        estimator=estimator, t=np.array(epochs),
        rot=np.empty((n, 3, 3)), vel=np.empty((n, 3)), pos=np.empty((n, 3)),
        cov_ori=np.empty((n, 3, 3)), cov_pos=np.empty((n, 3, 3)), cov_diag=[],
        anchors={a: AnchorSeries(np.full((n, 3), np.nan),
                                 np.full((n, 3, 3), np.nan))
                 for a in range(len(dataset.anchors))},
        anchor_truth={a: dataset.anchors[a].copy()
                      for a in range(len(dataset.anchors))})
    cursor = 0
    for i, t in enumerate(epochs):
        batch = []
        while cursor < len(imu) and imu[cursor].timestamp < t - 1e-12:
            batch.append(imu[cursor])
            cursor += 1
        if batch:
            filt.process_imu(batch, t)
        if t in rngs:
            filt.process_ranges(rngs[t])
        if t in feats:
            filt.process_camera(t, feats[t])
        state = filt.state
        res.rot[i] = state.rotation
        res.vel[i] = state.velocity
        res.pos[i] = state.position
        res.cov_ori[i] = state.cov[0:3, 0:3]
        res.cov_pos[i] = state.cov[6:9, 6:9]
        res.cov_diag.append(np.diag(state.cov).copy())
        for aid in res.anchors:
            if state.has_anchor(aid):
                series = res.anchors[aid]
                if np.isnan(series.init_time):
                    series.init_time = t
                ia = state.idx_anchor(aid)
                series.est[i] = state.anchor_position(aid)
                series.cov[i] = state.cov[ia:ia + 3, ia:ia + 3]
    res.update_count = filt.update_count
    res.final_reproj = final_reprojection(filt)
    return res


def _mc_worker(args):
    sim_cfg, estimators, filter_kwargs = args
    dataset = sim.simulate(sim_cfg)
    filter_cfg = build_filter_config(sim_cfg, **filter_kwargs)
    init_draw = draw_initial(dataset)
    out = {}
    for est in estimators:
        result = replay(dataset, est, filter_cfg, init_draw)
        out[est] = evaluation.run_metrics(result, dataset.truth, est)
    return out


def monte_carlo(sim_cfg, n_runs, estimators=ESTIMATORS, workers=None,
                **filter_kwargs):
    """Run n seeds (sim_cfg.seed + i) through the estimators in parallel
    and aggregate; the reduction order is seed order, so reports are
    deterministic for a given (config, n_runs)."""
    from dataclasses import replace
    jobs = [(replace(sim_cfg, seed=sim_cfg.seed + i), tuple(estimators),
             filter_kwargs) for i in range(n_runs)]
    if workers is None or workers > 1:
        with Pool(processes=workers) as pool:
            results = pool.map(_mc_worker, jobs)
    else:
        results = [_mc_worker(j) for j in jobs]
    report = evaluation.EvalReport(run_count=n_runs)
    for est in estimators:
        per_run = [r[est] for r in results]
        report.estimators[est] = evaluation.aggregate(per_run, per_run[0].t)
    return report
