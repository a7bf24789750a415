"""Conformal regression engines: split, MADSplit, and Jackknife+ with
locally rescaled scores.

Raw nonconformity scores are absolute errors |y - mu(X)|. The Jackknife+
engine rescales each calibration score by a leave-one-out kernel mean of
the other calibration scores, and prices a test interval from the N
products of leave-one-out test means with the rescaled scores.

Hot paths are vectorized over test points, with an exact slow path for
rows whose nearest-neighbor boundary is tied. All float reductions are
performed in ascending value order so predictions are bit-identical
under permutations of the calibration set and any batching/threading.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import RiskLevel
from .kernels import KernelSpec, _record_fallback, sorted_sum

FLOOR_FACTOR = 1e-12

STATE_FORMAT_VERSION = 1


def score_floor(cal_scores: np.ndarray) -> float:
    """Lower clamp for kernel-mean denominators."""
    m = float(np.max(cal_scores)) if len(cal_scores) else 0.0
    return FLOOR_FACTOR * (m if m > 0 else 1.0)


def conformal_quantile(scores: np.ndarray, alpha: float | RiskLevel) -> float:
    """The ceil((1-alpha)(n+1))-th smallest score (1-based).

    Returns +inf when the index exceeds n (calibration too small to
    certify the requested risk)."""
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    scores = np.asarray(scores, dtype=float).ravel()
    n = scores.shape[0]
    if n == 0:
        raise ValueError("empty score vector")
    q = math.ceil((1 - alpha) * (n + 1))
    if q > n:
        return math.inf
    return float(np.partition(scores, q - 1)[q - 1])


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    half_width: float
    alpha: float

    def __post_init__(self):
        if self.half_width < 0 or math.isnan(self.half_width):
            raise ValueError("half_width must be non-negative")

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


@dataclass
class CalibrationState:
    """Frozen calibration artifacts, sufficient to price any test point."""

    method: str  # "split" | "madsplit" | "jkplus"
    alpha: float
    cal_scores: np.ndarray
    rescaled_scores: np.ndarray | None = None
    kernel: KernelSpec | None = None
    cal_embeddings: np.ndarray | None = None
    train_embeddings: np.ndarray | None = None
    train_abs_errors: np.ndarray | None = None
    loo_means: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "format_version": STATE_FORMAT_VERSION,
            "method": self.method,
            "alpha": self.alpha,
            "cal_scores": arr(self.cal_scores),
            "rescaled_scores": arr(self.rescaled_scores),
            "kernel": None if self.kernel is None else self.kernel.to_json_dict(),
            "cal_embeddings": arr(self.cal_embeddings),
            "train_embeddings": arr(self.train_embeddings),
            "train_abs_errors": arr(self.train_abs_errors),
            "loo_means": arr(self.loo_means),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CalibrationState":
        if d.get("format_version") != STATE_FORMAT_VERSION:
            raise ValueError(
                f"unsupported state format version {d.get('format_version')!r}"
            )

        def arr(v, ndim=1):
            if v is None:
                return None
            a = np.asarray(v, dtype=float)
            return np.atleast_2d(a) if ndim == 2 else a

        return CalibrationState(
            method=d["method"],
            alpha=float(d["alpha"]),
            cal_scores=arr(d["cal_scores"]),
            rescaled_scores=arr(d.get("rescaled_scores")),
            kernel=(
                None if d.get("kernel") is None else KernelSpec.from_json_dict(d["kernel"])
            ),
            cal_embeddings=arr(d.get("cal_embeddings"), ndim=2),
            train_embeddings=arr(d.get("train_embeddings"), ndim=2),
            train_abs_errors=arr(d.get("train_abs_errors")),
            loo_means=arr(d.get("loo_means")),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @staticmethod
    def load(path) -> "CalibrationState":
        with open(path, encoding="utf-8") as fh:
            return CalibrationState.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Kernel mean helpers (vectorized, canonical-order sums)
# ---------------------------------------------------------------------------


def _knn_means_no_exclusion(
    queries: np.ndarray, ref_points: np.ndarray, ref_values: np.ndarray, k: int
) -> np.ndarray:
    """KNN mean of ref_values at each query (full reference pool)."""
    n = ref_points.shape[0]
    k_eff = min(k, n)
    out = np.empty(queries.shape[0])
    D = cdist(queries, ref_points)
    DS = np.sort(D, axis=1)
    if k_eff == n:
        out[:] = sorted_sum(ref_values) / n
        return out
    tie_free = DS[:, k_eff - 1] < DS[:, k_eff]
    if np.any(tie_free):
        part = np.argpartition(D[tie_free], k_eff - 1, axis=1)[:, :k_eff]
        out[tie_free] = sorted_sum(ref_values[part], axis=1) / k_eff
    for r in np.flatnonzero(~tie_free):
        thr = DS[r, k_eff - 1]
        members = D[r] <= thr
        out[r] = sorted_sum(ref_values[members]) / members.sum()
    return out


def _rbf_means_no_exclusion(queries, ref_points, ref_values, scale) -> np.ndarray:
    D2 = cdist(queries, ref_points, metric="sqeuclidean")
    W = np.exp(-D2 / scale**2)
    den = sorted_sum(W, axis=1)
    num = sorted_sum(W * ref_values[None, :], axis=1)
    out = np.empty(queries.shape[0])
    ok = den > 0.0
    out[ok] = num[ok] / den[ok]
    for r in np.flatnonzero(~ok):
        _record_fallback()
        out[r] = sorted_sum(ref_values) / ref_values.shape[0]
    return out


def kernel_means(
    kernel: KernelSpec, queries, ref_points, ref_values
) -> np.ndarray:
    """Nadaraya-Watson means with no exclusions (MADSplit sigma-hat)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    ref_points = np.atleast_2d(np.asarray(ref_points, dtype=float))
    ref_values = np.asarray(ref_values, dtype=float).ravel()
    if kernel.kind == "knn":
        return _knn_means_no_exclusion(queries, ref_points, ref_values, kernel.k)
    if kernel.per_point_scales is not None:
        raise ValueError("per-point scales are not defined for this estimator")
    return _rbf_means_no_exclusion(queries, ref_points, ref_values, kernel.length_scale)


def _knn_loo_means(emb: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Leave-one-out KNN score means over the calibration set."""
    n = emb.shape[0]
    if n < 2:
        raise ValueError("need at least 2 calibration points")
    k_eff = min(k, n - 1)
    D = cdist(emb, emb)
    np.fill_diagonal(D, np.inf)
    DS = np.sort(D, axis=1)
    out = np.empty(n)
    if k_eff == n - 1:
        # subtracting the own score from a shared total is not bit-exact, so
        # sum each leave-one-out set explicitly
        for i in range(n):
            out[i] = sorted_sum(np.delete(scores, i)) / (n - 1)
        return out
    tie_free = DS[:, k_eff - 1] < DS[:, k_eff]
    if np.any(tie_free):
        part = np.argpartition(D[tie_free], k_eff - 1, axis=1)[:, :k_eff]
        out[tie_free] = sorted_sum(scores[part], axis=1) / k_eff
    for r in np.flatnonzero(~tie_free):
        members = D[r] <= DS[r, k_eff - 1]
        out[r] = sorted_sum(scores[members]) / members.sum()
    return out


def _rbf_loo_means(
    emb: np.ndarray, scores: np.ndarray, kernel: KernelSpec
) -> np.ndarray:
    n = emb.shape[0]
    D2 = cdist(emb, emb, metric="sqeuclidean")
    if kernel.per_point_scales is not None:
        scales = np.asarray(kernel.per_point_scales, dtype=float)
        W = np.exp(-D2 / scales[:, None] ** 2)
    else:
        W = np.exp(-D2 / kernel.length_scale**2)
    np.fill_diagonal(W, 0.0)
    den = sorted_sum(W, axis=1)
    num = sorted_sum(W * scores[None, :], axis=1)
    out = np.empty(n)
    ok = den > 0.0
    out[ok] = num[ok] / den[ok]
    for r in np.flatnonzero(~ok):
        _record_fallback()
        out[r] = sorted_sum(np.delete(scores, r)) / (n - 1)
    return out


def loo_score_means(kernel: KernelSpec, emb, scores) -> np.ndarray:
    """Leave-one-out kernel score means at each calibration point."""
    emb = np.atleast_2d(np.asarray(emb, dtype=float))
    scores = np.asarray(scores, dtype=float).ravel()
    if kernel.kind == "knn":
        return _knn_loo_means(emb, scores, kernel.k)
    return _rbf_loo_means(emb, scores, kernel)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def _validate_lengths(*arrays):
    n = len(arrays[0])
    for a in arrays[1:]:
        if len(a) != n:
            raise ValueError("input length mismatch")
    return n


def calibrate_split(predictions, labels, alpha) -> CalibrationState:
    """Plain split conformal: global quantile of absolute errors."""
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    predictions = np.asarray(predictions, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    _validate_lengths(predictions, labels)
    scores = np.abs(labels - predictions)
    return CalibrationState(method="split", alpha=alpha, cal_scores=scores)


def calibrate_madsplit(
    train_embeddings,
    train_abs_errors,
    cal_embeddings,
    cal_predictions,
    cal_labels,
    kernel: KernelSpec,
    alpha,
) -> CalibrationState:
    """MADSplit: scores rescaled by a train-side conditional error mean."""
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    train_embeddings = np.atleast_2d(np.asarray(train_embeddings, dtype=float))
    train_abs_errors = np.asarray(train_abs_errors, dtype=float).ravel()
    if train_abs_errors.shape[0] == 0:
        raise ValueError("empty training error set")
    if np.any(train_abs_errors < 0):
        raise ValueError("training absolute errors must be non-negative")
    cal_embeddings = np.atleast_2d(np.asarray(cal_embeddings, dtype=float))
    cal_predictions = np.asarray(cal_predictions, dtype=float).ravel()
    cal_labels = np.asarray(cal_labels, dtype=float).ravel()
    _validate_lengths(cal_embeddings, cal_predictions, cal_labels)
    scores = np.abs(cal_labels - cal_predictions)
    sigma = kernel_means(kernel, cal_embeddings, train_embeddings, train_abs_errors)
    sigma = np.maximum(sigma, score_floor(scores))
    rescaled = scores / sigma
    return CalibrationState(
        method="madsplit",
        alpha=alpha,
        cal_scores=scores,
        rescaled_scores=rescaled,
        kernel=kernel,
        cal_embeddings=cal_embeddings,
        train_embeddings=train_embeddings,
        train_abs_errors=train_abs_errors,
        loo_means=sigma,
    )


def calibrate_jkplus(
    cal_embeddings, cal_predictions, cal_labels, kernel: KernelSpec, alpha
) -> CalibrationState:
    """Jackknife+ rescaled scores: each calibration score divided by the
    leave-one-out kernel mean of the other calibration scores."""
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    cal_embeddings = np.atleast_2d(np.asarray(cal_embeddings, dtype=float))
    cal_predictions = np.asarray(cal_predictions, dtype=float).ravel()
    cal_labels = np.asarray(cal_labels, dtype=float).ravel()
    n = _validate_lengths(cal_embeddings, cal_predictions, cal_labels)
    if n < 3:
        raise ValueError("Jackknife+ calibration requires at least 3 points")
    scores = np.abs(cal_labels - cal_predictions)
    means = loo_score_means(kernel, cal_embeddings, scores)
    means = np.maximum(means, score_floor(scores))
    rescaled = scores / means
    return CalibrationState(
        method="jkplus",
        alpha=alpha,
        cal_scores=scores,
        rescaled_scores=rescaled,
        kernel=kernel,
        cal_embeddings=cal_embeddings,
        loo_means=means,
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _jk_test_means_knn_block(
    D: np.ndarray, scores: np.ndarray, k: int
) -> np.ndarray:
    """For each test row and each left-out calibration point i, the KNN
    mean of calibration scores at the test point over cal minus {i}.

    Returns an (R, N) matrix. Removing point i from the pool can promote
    the (k+1)-th neighbor; tied boundaries fall back to an exact loop.
    """
    R, n = D.shape
    k_eff = min(k, n - 1)
    out = np.empty((R, n))
    if k_eff == n - 1:
        # every non-excluded point is a neighbor
        for i in range(n):
            out[:, i] = sorted_sum(np.delete(scores, i)) / (n - 1)
        return out
    ORD = np.argsort(D, axis=1, kind="stable")
    DS = np.take_along_axis(D, ORD, axis=1)
    tie_free = (DS[:, k_eff - 1] < DS[:, k_eff]) & (DS[:, k_eff] < DS[:, k_eff + 1])
    rows = np.flatnonzero(tie_free)
    if rows.size:
        topk = ORD[rows][:, :k_eff]  # (r, k)
        s_top = scores[topk]
        base = sorted_sum(s_top, axis=1) / k_eff
        extra = scores[ORD[rows, k_eff]]
        # replacement sums: drop each top-k member, promote the (k+1)-th
        repl = np.repeat(s_top[:, None, :], k_eff, axis=1)  # (r, k, k)
        ii = np.arange(k_eff)
        repl[:, ii, ii] = extra[:, None]
        repl_means = np.sort(repl, axis=2).sum(axis=2) / k_eff  # (r, k)
        sub = np.broadcast_to(base[:, None], (rows.size, n)).copy()
        np.put_along_axis(sub, topk, repl_means, axis=1)
        out[rows] = sub
    for r in np.flatnonzero(~tie_free):
        d = D[r]
        for i in range(n):
            di = d.copy()
            di[i] = np.inf
            thr = np.partition(di, k_eff - 1)[k_eff - 1]
            members = di <= thr
            out[r, i] = sorted_sum(scores[members]) / members.sum()
    return out


def _jk_test_means_rbf_block(
    D2: np.ndarray, scores: np.ndarray, kernel: KernelSpec
) -> np.ndarray:
    """RBF counterpart of the leave-one-out test means, (R, N)."""
    R, n = D2.shape
    if kernel.per_point_scales is None:
        W = np.exp(-D2 / kernel.length_scale**2)
        A = sorted_sum(W * scores[None, :], axis=1)
        B = sorted_sum(W, axis=1)
        num = A[:, None] - W * scores[None, :]
        den = B[:, None] - W
        out = np.empty((R, n))
        ok = den > 0.0
        out[ok] = num[ok] / den[ok]
        bad = ~ok
        if np.any(bad):
            for r, i in zip(*np.nonzero(bad)):
                _record_fallback()
                out[r, i] = sorted_sum(np.delete(scores, i)) / (n - 1)
        return out
    scales = np.asarray(kernel.per_point_scales, dtype=float)
    out = np.empty((R, n))
    for i in range(n):
        W = np.exp(-D2 / scales[i] ** 2)
        W[:, i] = 0.0
        den = sorted_sum(W, axis=1)
        num = sorted_sum(W * scores[None, :], axis=1)
        ok = den > 0.0
        out[ok, i] = num[ok] / den[ok]
        for r in np.flatnonzero(~ok):
            _record_fallback()
            out[r, i] = sorted_sum(np.delete(scores, i)) / (n - 1)
    return out


def _half_widths_block(state: CalibrationState, emb_block: np.ndarray) -> np.ndarray:
    """JK+ half-widths for a block of test embeddings."""
    n = state.cal_scores.shape[0]
    q = math.ceil((1 - state.alpha) * (n + 1))
    if q > n:
        return np.full(emb_block.shape[0], np.inf)
    if state.kernel.kind == "knn":
        D = cdist(emb_block, state.cal_embeddings)
        means = _jk_test_means_knn_block(D, state.cal_scores, state.kernel.k)
    else:
        D2 = cdist(emb_block, state.cal_embeddings, metric="sqeuclidean")
        means = _jk_test_means_rbf_block(D2, state.cal_scores, state.kernel)
    products = means * state.rescaled_scores[None, :]
    return np.partition(products, q - 1, axis=1)[:, q - 1]


def _madsplit_half_widths_block(
    state: CalibrationState, emb_block: np.ndarray
) -> np.ndarray:
    qv = conformal_quantile(state.rescaled_scores, state.alpha)
    sigma = kernel_means(
        state.kernel, emb_block, state.train_embeddings, state.train_abs_errors
    )
    sigma = np.maximum(sigma, score_floor(state.cal_scores))
    return qv * sigma


def _half_widths(
    state: CalibrationState, test_embeddings: np.ndarray | None
) -> np.ndarray:
    if state.method == "split":
        if test_embeddings is None:
            raise ValueError("test embeddings required to size the output")
        qv = conformal_quantile(state.cal_scores, state.alpha)
        return np.full(test_embeddings.shape[0], qv)
    if test_embeddings is None:
        raise ValueError(f"method {state.method!r} requires test embeddings")
    if state.method == "madsplit":
        return _madsplit_half_widths_block(state, test_embeddings)
    if state.method == "jkplus":
        return _half_widths_block(state, test_embeddings)
    raise ValueError(f"unknown method {state.method!r}")


def predict_interval(
    state: CalibrationState, test_embedding=None, test_prediction: float = 0.0
) -> PredictionInterval:
    """Price a single test point from a calibrated state."""
    emb = None
    if test_embedding is not None:
        emb = np.atleast_2d(np.asarray(test_embedding, dtype=float))
    elif state.method != "split":
        raise ValueError(f"method {state.method!r} requires a test embedding")
    else:
        emb = np.zeros((1, 1))
    hw = _half_widths(state, emb)
    return PredictionInterval(
        center=float(test_prediction), half_width=float(hw[0]), alpha=state.alpha
    )


def _worker_count() -> int:
    env = os.environ.get("CONFORMAL_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def predict_batch(
    state: CalibrationState,
    test_embeddings,
    test_predictions,
    chunk_size: int = 512,
    n_workers: int | None = None,
) -> list[PredictionInterval]:
    """Element-wise predict_interval, vectorized in fixed-size chunks.

    Chunk boundaries do not depend on the worker count, and chunks are
    written back by index, so output is bit-identical for any thread
    count.
    """
    test_predictions = np.asarray(test_predictions, dtype=float).ravel()
    if state.method == "split":
        emb = np.zeros((test_predictions.shape[0], 1))
    else:
        emb = np.atleast_2d(np.asarray(test_embeddings, dtype=float))
        if emb.shape[0] != test_predictions.shape[0]:
            raise ValueError("embeddings/predictions length mismatch")
    n = test_predictions.shape[0]
    halves = np.empty(n)
    chunks = [(lo, min(lo + chunk_size, n)) for lo in range(0, n, chunk_size)]
    workers = n_workers if n_workers is not None else _worker_count()

    def run(bounds):
        lo, hi = bounds
        halves[lo:hi] = _half_widths(state, emb[lo:hi])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for b in chunks:
            run(b)
    return [
        PredictionInterval(center=float(c), half_width=float(h), alpha=state.alpha)
        for c, h in zip(test_predictions, halves)
    ]
