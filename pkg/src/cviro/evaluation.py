"""Accuracy and consistency metrics (RMSE, ATE, NEES) and Monte-Carlo
aggregation.  NEES is raw 3-dof (consistent mean 3), evaluated in each
filter's own error parameterization; ATE aligns yaw + translation only,
matching the system's unobservable directions."""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import liegroup as lg

# 3-sigma equivalent probability mass for a 3-dof Gaussian.
COVER_3SIGMA = chi2.ppf(0.9973, df=3)


def nees(error, cov):
    """e^T P^-1 e for a 3-dof block; NaN (skipped) if P is singular."""
    try:
        return float(error @ np.linalg.solve(cov, error))
    except np.linalg.LinAlgError:
        return np.nan


def orientation_error(rot_est, rot_true):
    return lg.so3_log(rot_est @ rot_true.T)


def position_error_invariant(rot_est, pos_est, rot_true, pos_true):
    """Right-invariant position error: the translation column of the group
    error, p_hat - (Rhat R^T) p."""
    return pos_est - (rot_est @ rot_true.T) @ pos_true


def position_error_vector(pos_est, pos_true):
    return pos_est - pos_true


def anchor_error_invariant(rot_est, rot_true, anchor_est, anchor_true):
    return anchor_est - (rot_est @ rot_true.T) @ anchor_true


def ate(est_pos, gt_pos):
    """RMSE after closed-form 4-DOF (yaw about gravity + translation)
    alignment of the estimate onto the ground truth."""
    est = np.asarray(est_pos, dtype=float)
    gt = np.asarray(gt_pos, dtype=float)
    if len(est) < 2 or len(est) != len(gt):
        raise ValueError("need two aligned trajectories of equal length")
    ce, cg = est.mean(axis=0), gt.mean(axis=0)
    de, dg = est - ce, gt - cg
    num = float(np.sum(de[:, 0] * dg[:, 1] - de[:, 1] * dg[:, 0]))
    den = float(np.sum(de[:, 0] * dg[:, 0] + de[:, 1] * dg[:, 1]))
    alpha = np.arctan2(num, den)
    c, s = np.cos(alpha), np.sin(alpha)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shift = cg - rz @ ce
    residual = (rz @ est.T).T + shift - gt
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


@dataclass
class RunMetrics:
    """Per-run error and NEES series at the evaluation epochs."""

    t: np.ndarray
    pos_err_sq: np.ndarray        # squared norm of 3-dof position error
    ori_err_sq: np.ndarray
    pnees: np.ndarray
    onees: np.ndarray
    ate: float
    anchor_errors: dict           # anchor id -> final error norm (m)
    anchor_covered: dict          # anchor id -> bool (3-sigma ellipsoid)


def run_metrics(result, truth, estimator):
    """Compute RunMetrics from a runner result against the truth trajectory.

    `estimator` picks the error parameterization the filter maintains.
    """
    n = len(result.t)
    pos_err_sq = np.empty(n)
    ori_err_sq = np.empty(n)
    pnees = np.empty(n)
    onees = np.empty(n)
    est_pos = np.empty((n, 3))
    gt_pos = np.empty((n, 3))
    for i in range(n):
        k = truth.index_of(result.t[i])
        rt, pt = truth.rot[k], truth.pos[k]
        re, pe = result.rot[i], result.pos[i]
        e_th = orientation_error(re, rt)
        if estimator == "cviro":
            e_p = position_error_invariant(re, pe, rt, pt)
        else:
            e_p = position_error_vector(pe, pt)
        pos_err_sq[i] = float(e_p @ e_p)
        ori_err_sq[i] = float(e_th @ e_th)
        pnees[i] = nees(e_p, result.cov_pos[i])
        onees[i] = nees(e_th, result.cov_ori[i])
        est_pos[i] = pe
        gt_pos[i] = pt
    anchor_errors, anchor_covered = {}, {}
    for aid, series in result.anchors.items():
        est_anchor, cov_anchor = series.final()
        if est_anchor is None:
            continue
        k = truth.index_of(result.t[-1])
        e_u = anchor_error_invariant(result.rot[-1], truth.rot[k],
                                     est_anchor, result.anchor_truth[aid])
        anchor_errors[aid] = float(np.linalg.norm(
            est_anchor - result.anchor_truth[aid]))
        val = nees(e_u, cov_anchor)
        anchor_covered[aid] = bool(np.isfinite(val) and val <= COVER_3SIGMA)
    return RunMetrics(t=result.t.copy(), pos_err_sq=pos_err_sq,
                      ori_err_sq=ori_err_sq, pnees=pnees, onees=onees,
                      ate=ate(est_pos, gt_pos), anchor_errors=anchor_errors,
                      anchor_covered=anchor_covered)


@dataclass
class EstimatorSummary:
    prmse: float
    ormse: float
    pnees: float
    onees: float
    ate: float
    anchor_rmse: float
    anchor_coverage: float
    prmse_series: np.ndarray
    ormse_series: np.ndarray
    pnees_series: np.ndarray
    onees_series: np.ndarray
    t: np.ndarray


@dataclass
class EvalReport:
    run_count: int
    estimators: dict = field(default_factory=dict)  # name -> EstimatorSummary
    flags: dict = field(default_factory=dict)

    def table(self):
        lines = [f"Monte Carlo over {self.run_count} runs",
                 f"{'Method':<14}{'PRMSE':>9}{'ORMSE':>9}{'PNEES':>9}"
                 f"{'ONEES':>9}{'ATE':>9}{'AnchRMSE':>10}{'AnchCov':>9}"]
        for name, s in self.estimators.items():
            anch = f"{s.anchor_rmse:9.3f}" if np.isfinite(s.anchor_rmse) \
                else f"{'-':>9}"
            cov = f"{s.anchor_coverage:8.2f}" if np.isfinite(s.anchor_coverage) \
                else f"{'-':>8}"
            lines.append(f"{name:<14}{s.prmse:9.3f}{s.ormse:9.3f}"
                         f"{s.pnees:9.3f}{s.onees:9.3f}{s.ate:9.3f}"
                         f" {anch}{cov}")
        for key, val in sorted(self.flags.items()):
            lines.append(f"{key} = {val}")
        return "\n".join(lines)

    def keyvalues(self):
        kv = {"run_count": self.run_count}
        for name, s in self.estimators.items():
            for f in ("prmse", "ormse", "pnees", "onees", "ate",
                      "anchor_rmse", "anchor_coverage"):
                kv[f"{name}.{f}"] = getattr(s, f)
        kv.update(self.flags)
        return kv


def aggregate(per_run, t):
    """Average run metrics: RMSE over runs then time; NEES over runs then
    time (NaN epochs skipped)."""
    pos_sq = np.stack([m.pos_err_sq for m in per_run])
    ori_sq = np.stack([m.ori_err_sq for m in per_run])
    pnees = np.stack([m.pnees for m in per_run])
    onees = np.stack([m.onees for m in per_run])
    prmse_series = np.sqrt(pos_sq.mean(axis=0))
    ormse_series = np.sqrt(ori_sq.mean(axis=0))
    pnees_series = np.nanmean(pnees, axis=0)
    onees_series = np.nanmean(onees, axis=0)
    anchor_errs = [e for m in per_run for e in m.anchor_errors.values()]
    covered = [c for m in per_run for c in m.anchor_covered.values()]
    return EstimatorSummary(
        prmse=float(prmse_series.mean()),
        ormse=float(ormse_series.mean()),
        pnees=float(np.nanmean(pnees_series)),
        onees=float(np.nanmean(onees_series)),
        ate=float(np.mean([m.ate for m in per_run])),
        anchor_rmse=float(np.sqrt(np.mean(np.square(anchor_errs))))
        if anchor_errs else float("nan"),
        anchor_coverage=float(np.mean(covered)) if covered else float("nan"),
        prmse_series=prmse_series, ormse_series=ormse_series,
        pnees_series=pnees_series, onees_series=onees_series, t=t)
