"""Evaluation metrics: coverage, interval size, rank-correlation
adaptivity measures, size-quantile diagnostics, and the oracle
interval-size-ratio analysis.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .conformal import PredictionInterval
from .data import RiskLevel
from .randomness import STREAM_BOOTSTRAP, make_rng


class DegenerateMetricWarning(UserWarning):
    """Metric undefined on this input (constant vectors, massive ties)."""


def _halves_centers(intervals) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(intervals, (list, tuple)) and intervals and isinstance(
        intervals[0], PredictionInterval
    ):
        return (
            np.array([iv.half_width for iv in intervals]),
            np.array([iv.center for iv in intervals]),
        )
    raise TypeError("expected a sequence of PredictionInterval")


def coverage(intervals, labels) -> float:
    """Fraction of labels inside the closed prediction intervals."""
    halves, centers = _halves_centers(intervals)
    labels = np.asarray(labels, dtype=float).ravel()
    if labels.shape[0] != halves.shape[0]:
        raise ValueError("intervals/labels length mismatch")
    inside = np.abs(labels - centers) <= halves
    return float(inside.mean())


def _merge_count_inversions(b: np.ndarray) -> int:
    """Strict inversions (b_i > b_j for i < j) by merge sort."""
    a = b.tolist()
    buf = a[:]
    n = len(a)
    count = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    count += mid - i
                    buf[k] = a[j]
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:hi] = a[i:mid] if i < mid else a[j:hi]
            a[lo:hi] = buf[lo:hi]
        width *= 2
    return count


def _tie_term(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau-b via merge-sort inversion counting."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("length mismatch")
    if n < 2:
        raise ValueError("need at least 2 observations")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn(
            "constant input: rank correlation undefined, returning 0",
            DegenerateMetricWarning,
            stacklevel=2,
        )
        return 0.0
    perm = np.lexsort((b, a))
    a_s, b_s = a[perm], b[perm]
    n0 = n * (n - 1) // 2
    n1 = _tie_term(a_s)
    n2 = _tie_term(b_s)
    n3 = _tie_term(a_s + 1j * b_s)  # joint ties: equal in both coordinates
    discordant = _merge_count_inversions(b_s)
    num = n0 - n1 - n2 + n3 - 2 * discordant
    den = math.sqrt((n0 - n1) * (n0 - n2))
    return float(num / den)


def tau_si(scores, interval_sizes) -> float:
    """Point-wise rank correlation between conformal scores and sizes."""
    return kendall_tau(scores, interval_sizes)


@dataclass(frozen=True)
class SQIBins:
    isq: np.ndarray  # bin midpoints of interval-size quantile bins
    csq: np.ndarray  # per-bin conditional score quantile
    counts: np.ndarray
    n_merged: int = 0


def sqi_bins(interval_sizes, scores, alpha, n_bins: int = 10) -> SQIBins:
    """Bin by interval-size quantiles; report per-bin size midpoints and
    the (1-alpha) empirical score quantile (plain order statistic).

    Bins with fewer than 2 points merge rightward, except when every bin
    holds exactly the same count (exact quantile split).
    """
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    sizes = np.asarray(interval_sizes, dtype=float).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    m = sizes.shape[0]
    if scores.shape[0] != m:
        raise ValueError("length mismatch")
    if m < n_bins:
        raise ValueError(f"need at least n_bins={n_bins} points, got {m}")
    inner = np.quantile(sizes, np.arange(1, n_bins) / n_bins)
    edges = np.concatenate([[sizes.min()], inner, [sizes.max()]])
    assignment = np.searchsorted(inner, sizes, side="right")
    counts = np.bincount(assignment, minlength=n_bins)

    groups = [[d] for d in range(n_bins)]
    if not np.all(counts == counts[0]):
        merged = []
        n_merged = 0
        pending: list[int] = []
        pending_count = 0
        for d in range(n_bins):
            pending.append(d)
            pending_count += counts[d]
            if pending_count >= 2:
                merged.append(pending)
                pending = []
                pending_count = 0
        if pending:
            if merged:
                merged[-1].extend(pending)
            else:
                merged.append(pending)
        n_merged = n_bins - len(merged)
        if n_merged:
            warnings.warn(
                f"merged {n_merged} under-filled interval-size bins",
                DegenerateMetricWarning,
                stacklevel=2,
            )
        groups = merged
    else:
        n_merged = 0

    isq, csq, out_counts = [], [], []
    for grp in groups:
        lo_edge = edges[grp[0]]
        hi_edge = edges[grp[-1] + 1]
        mask = np.isin(assignment, grp)
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        bin_scores = np.sort(scores[mask])
        q_idx = max(1, math.ceil((1 - alpha) * cnt))
        isq.append(0.5 * (lo_edge + hi_edge))
        csq.append(float(bin_scores[q_idx - 1]))
        out_counts.append(cnt)
    return SQIBins(
        isq=np.array(isq),
        csq=np.array(csq),
        counts=np.array(out_counts, dtype=int),
        n_merged=n_merged,
    )


def r2_sqi(bins: SQIBins) -> float:
    """Fit quality of the fixed model ISQ = 2 * CSQ (no free
    parameters); NaN when the ISQ variance vanishes."""
    if bins.isq.shape[0] < 2:
        raise ValueError("need at least 2 bins")
    total = float(np.sum((bins.isq - bins.isq.mean()) ** 2))
    if total == 0.0:
        return math.nan
    resid = float(np.sum((bins.isq - 2.0 * bins.csq) ** 2))
    return 1.0 - resid / total


def tau_sqi(bins: SQIBins) -> float:
    """Rank correlation of bin order with the per-bin score quantile."""
    return kendall_tau(np.arange(bins.csq.shape[0], dtype=float), bins.csq)


def oracle_is_ratio(beta: float, lam: float, alpha) -> float:
    """Ratio of the perfectly adaptive mean interval size to the flat
    conformal interval size for a two-scale half-normal error mixture."""
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    if not (0 < beta < 1):
        raise ValueError("beta must be in (0, 1)")
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    if lam == 1.0:
        return 1.0
    z = norm.ppf(1 - alpha / 2)  # (1-alpha) quantile of the half-normal

    def mixture_cdf(t):
        return beta * (2 * norm.cdf(t) - 1) + (1 - beta) * (2 * norm.cdf(t / lam) - 1)

    try:
        q = brentq(lambda t: mixture_cdf(t) - (1 - alpha), 1e-12, z * lam + 10.0,
                   xtol=1e-12, rtol=1e-14)
    except (ValueError, RuntimeError) as exc:
        raise ValueError(f"mixture quantile root-finding failed: {exc}") from exc
    return float(z * (beta + (1 - beta) * lam) / q)


@dataclass
class EvaluationReport:
    coverage: float
    mean_interval_size: float
    r2_sqi: float
    tau_sqi: float
    tau_si: float
    n_infinite_intervals: int

    def to_json_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "is_mean": self.mean_interval_size,
            "r2_sqi": None if math.isnan(self.r2_sqi) else self.r2_sqi,
            "tau_sqi": self.tau_sqi,
            "tau_si": self.tau_si,
            "n_infinite": self.n_infinite_intervals,
        }


def render_r2(value: float) -> str:
    """Table rendering convention: values far below zero print as '<< 0'."""
    if math.isnan(value) or value < -2:
        return "<< 0"
    return f"{value:.4f}"


def evaluate(
    intervals,
    labels,
    predictions,
    alpha,
    infinite_size_replacement: float | None = None,
    n_bins: int = 10,
) -> EvaluationReport:
    """Assemble all metrics for one repetition.

    Coverage counts infinite intervals as covering; size-based metrics
    replace infinite half-widths by ``infinite_size_replacement``
    (typically the largest observed calibration error).
    """
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    halves, centers = _halves_centers(intervals)
    labels = np.asarray(labels, dtype=float).ravel()
    predictions = np.asarray(predictions, dtype=float).ravel()
    if not (labels.shape[0] == halves.shape[0] == predictions.shape[0]):
        raise ValueError("length mismatch")
    cov = coverage(intervals, labels)
    inf_mask = np.isinf(halves)
    n_inf = int(inf_mask.sum())
    if n_inf:
        if infinite_size_replacement is None:
            raise ValueError(
                "infinite intervals present: supply infinite_size_replacement"
            )
        halves = np.where(inf_mask, infinite_size_replacement, halves)
    sizes = 2.0 * halves
    scores = np.abs(labels - predictions)
    t_si = tau_si(scores, sizes)
    bins = sqi_bins(sizes, scores, alpha, n_bins=n_bins)
    if bins.isq.shape[0] >= 2:
        r2 = r2_sqi(bins)
        t_sqi = tau_sqi(bins)
    else:
        r2 = math.nan
        t_sqi = 0.0
    return EvaluationReport(
        coverage=cov,
        mean_interval_size=float(sizes.mean()),
        r2_sqi=r2,
        tau_sqi=t_sqi,
        tau_si=t_si,
        n_infinite_intervals=n_inf,
    )


def percentile_uncertainty(values: np.ndarray, seed: int = 0,
                           n_boot: int = 1000) -> float:
    """67th percentile of |bootstrap mean - sample mean| over seeded
    resamples: the reporting convention for repetition uncertainty."""
    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] < 2:
        return 0.0
    rng = make_rng(seed, STREAM_BOOTSTRAP)
    m = values.mean()
    idx = rng.integers(0, values.shape[0], size=(n_boot, values.shape[0]))
    devs = np.abs(values[idx].mean(axis=1) - m)
    return float(np.percentile(devs, 67))


def aggregate_reports(
    reports: list[EvaluationReport], seed: int = 0
) -> dict:
    """Mean and percentile uncertainty per metric across repetitions."""
    fields = ["coverage", "is_mean", "r2_sqi", "tau_sqi", "tau_si"]
    rows = [r.to_json_dict() for r in reports]
    out: dict = {"reps": rows, "n_infinite": sum(r.n_infinite_intervals for r in reports)}
    for name in fields:
        vals = np.array([math.nan if row[name] is None else row[name] for row in rows])
        finite = vals[np.isfinite(vals)]
        if finite.size == 0:
            out[name] = {"mean": None, "unc": None}
        else:
            out[name] = {
                "mean": float(finite.mean()),
                "unc": percentile_uncertainty(finite, seed=seed),
            }
    return out
