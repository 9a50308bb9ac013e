"""Tightly-coupled UWB range updates against jointly estimated anchors."""

from dataclasses import dataclass

import numpy as np

from . import liegroup as lg
from .state import UpdatePacket, chi2_gate, kalman_update

DEGENERATE_RANGE = 1e-6


class AnchorNotInitialized(RuntimeError):
    """Range arrived for an anchor that is not in the state yet."""


class DegenerateGeometry(RuntimeError):
    """Tag and anchor coincide; the range direction is undefined."""


@dataclass
class RangeMeasurement:
    timestamp: float
    anchor_id: int
    range: float
    tag_id: int = 0


@dataclass
class UwbExtrinsics:
    """Tag lever arm in the IMU frame and constant range bias (pre-calibrated)."""

    tag_offset: np.ndarray
    range_bias: float = 0.0

    def __post_init__(self):
        self.tag_offset = np.asarray(self.tag_offset, dtype=float)


def tag_position(rot, pos, extrinsics):
    return pos + rot @ extrinsics.tag_offset


def range_predict(state, extrinsics, anchor_id):
    """Predicted range |p_I + R p_T - p_u| + bias."""
    if not state.has_anchor(anchor_id):
        raise AnchorNotInitialized(f"anchor {anchor_id} not initialized")
    d = tag_position(state.rotation, state.position, extrinsics) \
        - state.anchor_position(anchor_id)
    return float(np.linalg.norm(d)) + extrinsics.range_bias


def range_jacobian(state, extrinsics, meas):
    """One-row UpdatePacket for a range measurement.

    Blocks: theta <- H_pu @ Lambda, p <- H_pu, anchor <- -H_pu, with
    Lambda = skew(p_u - p_I - R p_T); velocity, bias and clones are zero.
    """
    if not state.has_anchor(meas.anchor_id):
        raise AnchorNotInitialized(f"anchor {meas.anchor_id} not initialized")
    d = tag_position(state.rotation, state.position, extrinsics) \
        - state.anchor_position(meas.anchor_id)
    dist = np.linalg.norm(d)
    if dist < DEGENERATE_RANGE:
        raise DegenerateGeometry("tag coincides with anchor estimate")
    h_pu = d / dist
    h = np.zeros((1, state.dim))
    h[0, 0:3] = h_pu @ lg.skew(-d)
    h[0, 6:9] = h_pu
    ia = state.idx_anchor(meas.anchor_id)
    h[0, ia:ia + 3] = -h_pu
    residual = meas.range - (dist + extrinsics.range_bias)
    return h, residual


def range_packet(state, extrinsics, meas, sigma):
    h, residual = range_jacobian(state, extrinsics, meas)
    return UpdatePacket(h, np.array([residual]), np.array([[sigma**2]]))


def apply_range_update(state, measurements, extrinsics, sigma,
                       gate_confidence=0.95):
    """Sequential gated scalar updates, one per measurement.

    Measurements whose anchors are uninitialized or whose geometry is
    degenerate are skipped; gated-out rows leave the state unchanged.
    """
    out = state
    for meas in measurements:
        try:
            packet = range_packet(out, extrinsics, meas, sigma)
        except (AnchorNotInitialized, DegenerateGeometry):
            continue
        if not chi2_gate(packet, out.cov, gate_confidence):
            continue
        out = kalman_update(out, packet)
    return out
