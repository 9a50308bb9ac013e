"""Estimator front-ends: clone scheduling, feature-track bookkeeping, and
the per-epoch measurement pipeline shared by the invariant filter and the
vector-error baseline."""

from dataclasses import dataclass, field

import numpy as np

from . import anchor_init, propagation, range_update, visual_update
from .liegroup import skew
from .propagation import NoiseParams
from .state import (FilterState, apply_correction, augment_clone,
                    marginalize_oldest)
from .visual_update import FeatureTrack, TrackRejected


@dataclass
class FilterConfig:
    noise: NoiseParams = field(default_factory=NoiseParams)
    max_clones: int = 11
    gate_confidence: float = 0.95
    anchor_window: int = 50
    anchor_min_sv: float = 0.2
    min_track_obs: int = 3
    cam_extrinsics: object = None
    uwb_extrinsics: object = None
    cam_sigma: float = 1.0 / 460.0     # normalized-coordinate pixel noise

    def validate(self):
        if self.max_clones < 2:
            raise ValueError("max_clones must be at least 2")
        return self


class VioFilterBase:
    """Clone window + MSCKF feature pipeline; subclasses provide the error
    parameterization (propagation Jacobians, visual Jacobians, retraction)."""

    def __init__(self, cfg, init_state):
        self.cfg = cfg.validate()
        self.state = init_state
        self.tracks = {}
        self.update_count = 0

    # hooks -------------------------------------------------------------
    def _propagate(self, batch, t_end):
        raise NotImplementedError

    def _visual_jacobians(self, track, p_feat):
        raise NotImplementedError

    def _retraction(self):
        return apply_correction

    # pipeline ----------------------------------------------------------
    def process_imu(self, batch, t_end):
        if batch:
            self.state = self._propagate(batch, t_end)
        self.state.time = t_end

    def process_ranges(self, measurements):
        pass

    def process_camera(self, t, observations):
        """Clone the pose, ingest observations, run updates for tracks that
        died or that would lose observations to marginalization."""
        self.state = augment_clone(self.state, t)
        seen = set()
        for obs in observations:
            seen.add(obs.feature_id)
            self.tracks.setdefault(obs.feature_id,
                                   FeatureTrack(obs.feature_id)).add(obs)
        ready = [fid for fid in self.tracks if fid not in seen]
        if len(self.state.clones) > self.cfg.max_clones:
            oldest_t = self.state.clones[-1].timestamp
            for fid, track in self.tracks.items():
                if fid in ready:
                    continue
                if any(o.timestamp == oldest_t for o in track.observations):
                    ready.append(fid)
        self._update_from_tracks(ready)
        for fid in ready:
            del self.tracks[fid]
        while len(self.state.clones) > self.cfg.max_clones:
            self.state = marginalize_oldest(self.state)

    def _update_from_tracks(self, feature_ids):
        packets = []
        for fid in feature_ids:
            track = self.tracks[fid]
            if len(track) < self.cfg.min_track_obs:
                continue
            try:
                p_feat = visual_update.triangulate(
                    track, self.state.clones, self.cfg.cam_extrinsics)
                h_x, h_f, res = self._visual_jacobians(track, p_feat)
                packets.append(visual_update.nullspace_project(
                    h_x, h_f, res, self.cfg.cam_sigma))
            except TrackRejected:
                continue
        if packets:
            self.state, n = visual_update.compress_and_update(
                self.state, packets, self.cfg.gate_confidence,
                self._retraction())
            self.update_count += n


class CviroFilter(VioFilterBase):
    """Right-invariant tightly-coupled visual-inertial-ranging filter with
    on-line UWB anchor calibration."""

    def __init__(self, cfg, init_state, anchor_ids):
        super().__init__(cfg, init_state)
        self.initializer = anchor_init.AnchorInitializer(
            anchor_ids, cfg.anchor_window, cfg.anchor_min_sv)

    def _propagate(self, batch, t_end):
        return propagation.propagate(self.state, batch, self.cfg.noise, t_end)

    def _visual_jacobians(self, track, p_feat):
        return visual_update.visual_jacobians(
            track, p_feat, self.state, self.cfg.cam_extrinsics)

    def process_ranges(self, measurements):
        live = [m for m in measurements if self.state.has_anchor(m.anchor_id)]
        fresh = [m for m in measurements if not self.state.has_anchor(m.anchor_id)]
        if live:
            self.state = range_update.apply_range_update(
                self.state, live, self.cfg.uwb_extrinsics,
                self.cfg.noise.uwb_range_sigma, self.cfg.gate_confidence)
        if fresh:
            self.state = self.initializer.offer(
                self.state, fresh, self.cfg.uwb_extrinsics,
                self.cfg.noise.uwb_range_sigma)


def initial_state_invariant(rot, vel, pos, bias, p0_vec, time=0.0):
    """Build the invariant-filter initial state from vector-coordinate
    initial covariance p0_vec (ordered theta, v, p, bg, ba)."""
    state = FilterState.initial(rot, vel, pos, bias, time=time)
    jac = np.eye(15)
    jac[3:6, 0:3] = skew(vel)
    jac[6:9, 0:3] = skew(pos)
    state.cov = jac @ p0_vec @ jac.T
    return state
