"""Anchor position initialization: nonlinear least squares over a buffered
pose/range window, then covariance augmentation through a QR split.

The solved anchor enters the state in invariant coordinates.  Because the
anchor is determined relative to the local trajectory, its error decomposes
as xi_u = eps_ls + xi_p(current): the range-noise part eps_ls from the
least-squares subsystem plus the common-mode trajectory error, which in
right-invariant coordinates is exactly the current position error (the
attitude coupling cancels).  Installing the cross-covariance this way keeps
the constant unobservable subspace intact at initialization.
"""

from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .state import COL_ANCHOR0, symmetrize

GN_MAX_ITERS = 50
GN_STEP_TOL = 1e-8


class InitDeferred(RuntimeError):
    """Geometry or convergence not good enough yet; keep buffering."""


@dataclass
class BufferEntry:
    tag_pos: np.ndarray
    pose_cov: np.ndarray      # 6x6 (theta, p) marginal at buffering time
    range: float


@dataclass
class InitBuffer:
    capacity: int = 50
    min_singular_value: float = 0.2   # m, geometry gate on centered tags
    entries: list = field(default_factory=list)

    def add(self, tag_pos, pose_cov, rng):
        self.entries.append(BufferEntry(np.asarray(tag_pos, float),
                                        np.asarray(pose_cov, float), rng))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    @property
    def full(self):
        return len(self.entries) >= self.capacity

    def tags(self):
        return np.array([e.tag_pos for e in self.entries])

    def ranges(self):
        return np.array([e.range for e in self.entries])

    def geometry_ok(self):
        if len(self.entries) < 4:
            return False
        tags = self.tags()
        centered = tags - tags.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        return sv[-1] > self.min_singular_value


def _intersect_spheres(centers, radii):
    """Closed-form three-sphere intersection; returns 0-2 candidate points."""
    c1, c2, c3 = centers
    r1, r2, r3 = radii
    ex = c2 - c1
    d = np.linalg.norm(ex)
    if d < 1e-9:
        return []
    ex = ex / d
    u = c3 - c1
    i = float(ex @ u)
    ey = u - i * ex
    ny = np.linalg.norm(ey)
    if ny < 1e-9:
        return []
    ey = ey / ny
    ez = np.cross(ex, ey)
    j = float(ey @ u)
    x = (r1**2 - r2**2 + d**2) / (2 * d)
    y = (r1**2 - r3**2 + i**2 + j**2) / (2 * j) - (i / j) * x
    z2 = r1**2 - x**2 - y**2
    base = c1 + x * ex + y * ey
    if z2 < 0.0:
        return [base]           # spheres barely miss; still a usable seed
    z = np.sqrt(z2)
    return [base + z * ez, base - z * ez]


def _seed_candidates(tags, ranges, max_seeds=8):
    n = len(tags)
    picks = [(0, n // 2, n - 1), (0, n // 3, 2 * n // 3),
             (n // 4, n // 2, 3 * n // 4), (0, n // 4, n - 1)]
    seeds = []
    for a, b, c in picks:
        if len({a, b, c}) < 3:
            continue
        seeds.extend(_intersect_spheres(tags[[a, b, c]], ranges[[a, b, c]]))
        if len(seeds) >= max_seeds:
            break
    if not seeds:
        seeds.append(tags.mean(axis=0) + np.array([0.0, 0.0, ranges.mean()]))
    return seeds[:max_seeds]


def solve_anchor_nls(buf, extrinsics):
    """Gauss-Newton range-only anchor solve from the best sphere seed.

    Returns (anchor, converged, rms).  Raises InitDeferred on collinear
    geometry or divergence.
    """
    if not buf.geometry_ok():
        raise InitDeferred("buffer geometry insufficient")
    tags = buf.tags()
    ranges = buf.ranges() - extrinsics.range_bias

    def residuals(p):
        return ranges - np.linalg.norm(tags - p, axis=1)

    seeds = _seed_candidates(tags, ranges)
    costs = [float(residuals(s) @ residuals(s)) for s in seeds]
    p = seeds[int(np.argmin(costs))].copy()
    cost = min(costs)
    converged = False
    for _ in range(GN_MAX_ITERS):
        diff = tags - p
        dist = np.linalg.norm(diff, axis=1)
        if np.any(dist < 1e-9):
            raise InitDeferred("anchor seed coincides with a tag position")
        jac = diff / dist[:, None]          # d(residual)/dp = +(t-p)/|t-p|... sign folded
        res = ranges - dist
        step, *_ = np.linalg.lstsq(jac, res, rcond=None)
        p = p - step
        new_cost = float(res @ res)
        if not np.isfinite(new_cost) or new_cost > 10.0 * cost + 1.0:
            raise InitDeferred("Gauss-Newton diverged")
        cost = new_cost
        if np.linalg.norm(step) < GN_STEP_TOL:
            converged = True
            break
    if not converged:
        raise InitDeferred("Gauss-Newton did not converge")
    rms = float(np.sqrt(np.mean(residuals(p) ** 2)))
    return p, converged, rms


def init_covariance(state, buf, anchor, anchor_id, range_sigma):
    """Grow the state by one anchor column with QR-split covariance.

    The stacked range rows are QR-reduced to the 3-row anchor subsystem
    whose information gives the least-squares covariance; the cross
    covariance to the existing state is the current position row (the
    common-mode coupling in invariant coordinates).
    """
    tags = buf.tags()
    diff = tags - anchor
    dist = np.linalg.norm(diff, axis=1)
    h_b = -diff / dist[:, None]           # d(range)/d(anchor estimate)
    r1 = np.linalg.qr(h_b, mode='r')      # 3x3 triangular factor
    if np.linalg.matrix_rank(r1, tol=1e-8) < 3:
        raise InitDeferred("anchor subsystem rank deficient")
    info = (r1.T @ r1) / range_sigma**2
    p_ls = np.linalg.inv(info)

    out = state.copy()
    slot = int(np.searchsorted(np.asarray(state.anchor_ids, dtype=int),
                               anchor_id))
    col = COL_ANCHOR0 + slot
    out.core.cols = np.insert(state.core.cols, col, anchor, axis=1)
    out.anchor_ids = state.anchor_ids[:slot] + [anchor_id] \
        + state.anchor_ids[slot:]

    n = state.dim
    ins = 9 + 3 * slot
    pos_rows = state.cov[6:9, :]          # xi_p rows
    cov = np.zeros((n + 3, n + 3))
    cov[:ins, :ins] = state.cov[:ins, :ins]
    cov[:ins, ins + 3:] = state.cov[:ins, ins:]
    cov[ins + 3:, :ins] = state.cov[ins:, :ins]
    cov[ins + 3:, ins + 3:] = state.cov[ins:, ins:]
    cov[ins:ins + 3, :ins] = pos_rows[:, :ins]
    cov[ins:ins + 3, ins + 3:] = pos_rows[:, ins:]
    cov[:ins, ins:ins + 3] = pos_rows[:, :ins].T
    cov[ins + 3:, ins:ins + 3] = pos_rows[:, ins:].T
    cov[ins:ins + 3, ins:ins + 3] = p_ls + state.cov[6:9, 6:9]
    out.cov = symmetrize(cov)
    return out


class AnchorInitializer:
    """Buffers ranges for uninitialized anchors and triggers delayed init."""

    def __init__(self, anchor_ids, window=50, min_singular_value=0.2):
        self.buffers = {a: InitBuffer(window, min_singular_value)
                        for a in anchor_ids}

    def pending(self, state):
        return [a for a in self.buffers if not state.has_anchor(a)]

    def offer(self, state, measurements, extrinsics, range_sigma):
        """Buffer ranges for uninitialized anchors; initialize when ready.

        Returns the (possibly grown) state.  Buffered measurements are
        consumed by initialization and never reused as filter updates.
        """
        out = state
        tag = state.position + state.rotation @ extrinsics.tag_offset
        pose_cov = out.cov[np.ix_([0, 1, 2, 6, 7, 8], [0, 1, 2, 6, 7, 8])]
        for meas in measurements:
            buf = self.buffers.get(meas.anchor_id)
            if buf is None or out.has_anchor(meas.anchor_id):
                continue
            buf.add(tag, pose_cov, meas.range)
            if not (buf.full and buf.geometry_ok()):
                continue
            try:
                anchor, _, _ = solve_anchor_nls(buf, extrinsics)
                out = init_covariance(out, buf, anchor, meas.anchor_id,
                                      range_sigma)
            except InitDeferred:
                continue
            buf.entries.clear()
        return out
