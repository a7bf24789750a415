"""Mutual-information estimation, PCA projection, local-coverage bounds,
and the MI-driven kernel length-scale tuning procedure.

The MI estimator is the standard k-nearest-neighbor construction
(Kozachenko-Leonenko / KSG variant 1): max-norm neighborhoods in the
joint space, strict marginal neighbor counts, digamma correction.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import digamma

from .conformal import score_floor
from .data import RiskLevel
from .kernels import KernelSpec
from .randomness import STREAM_TUNING, make_rng


class ConstantMarginalWarning(UserWarning):
    """A zero-variance marginal makes MI trivially zero."""


@dataclass(frozen=True)
class MIEstimate:
    value: float  # nats, clamped at 0
    k_neighbors: int
    n_samples: int


@dataclass(frozen=True)
class PCAProjection:
    means: np.ndarray
    components: np.ndarray  # rows = principal directions, orthonormal
    explained_variance: np.ndarray  # non-increasing

    def transform(self, data: np.ndarray) -> np.ndarray:
        data = np.atleast_2d(np.asarray(data, dtype=float))
        return (data - self.means[None, :]) @ self.components.T


def _index_jitter(n: int, column_key: int) -> np.ndarray:
    """Deterministic pseudo-uniform values in [-0.5, 0.5) keyed on index."""
    idx = np.arange(1, n + 1, dtype=np.uint64)
    mult = np.uint64(2654435761 + 2 * column_key + 1)
    h = (idx * mult) & np.uint64(0xFFFFFFFF)
    return h.astype(float) / 2.0**32 - 0.5


def _jittered(col: np.ndarray, column_key: int) -> np.ndarray:
    scale = float(np.std(col))
    if scale == 0.0:
        return col
    return col + 1e-10 * scale * _index_jitter(col.shape[0], column_key)


def _marginal_counts_1d(col: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Number of other points with |x_j - x_i| strictly below eps_i."""
    order = np.argsort(col, kind="stable")
    xs = col[order]
    left = np.searchsorted(xs, col - eps, side="right")
    right = np.searchsorted(xs, col + eps, side="left")
    return right - left - 1


def ksg_mutual_information(x, s, k: int = 3) -> MIEstimate:
    """KSG (variant 1) mutual information between x (n, d) and s (n,)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 1 and x.shape[1] > 1:
        x = x.T
    s = np.asarray(s, dtype=float).ravel()
    n = s.shape[0]
    if x.shape[0] != n:
        raise ValueError("x and s length mismatch")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(s)):
        raise ValueError("NaN/Inf in MI input")
    if k < 1 or n <= k:
        raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
    if np.all(np.ptp(x, axis=0) == 0) or np.ptp(s) == 0:
        warnings.warn(
            "constant marginal: mutual information is 0 by convention",
            ConstantMarginalWarning,
            stacklevel=2,
        )
        return MIEstimate(value=0.0, k_neighbors=k, n_samples=n)

    xj = np.column_stack([_jittered(x[:, c], c) for c in range(x.shape[1])])
    sj = _jittered(s, x.shape[1])
    joint = np.column_stack([xj, sj])
    tree = cKDTree(joint)
    eps = tree.query(joint, k=k + 1, p=np.inf)[0][:, k]

    ns = _marginal_counts_1d(sj, eps)
    if xj.shape[1] == 1:
        nx = _marginal_counts_1d(xj[:, 0], eps)
    else:
        xtree = cKDTree(xj)
        radii = np.nextafter(eps, -np.inf)
        nx = np.array(
            [
                len(hits) - 1
                for hits in xtree.query_ball_point(xj, radii, p=np.inf)
            ]
        )
    value = (
        digamma(k)
        + digamma(n)
        - float(np.mean(digamma(nx + 1) + digamma(ns + 1)))
    )
    return MIEstimate(value=max(0.0, value), k_neighbors=k, n_samples=n)


def fit_pca(data, n_components: int) -> PCAProjection:
    """Top-variance orthonormal directions from the covariance
    eigendecomposition of centered data."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if n < 2:
        raise ValueError("PCA requires at least 2 rows")
    if not (1 <= n_components <= min(n, d)):
        raise ValueError(f"n_components must be in [1, {min(n, d)}]")
    means = data.mean(axis=0)
    centered = data - means[None, :]
    cov = centered.T @ centered / (n - 1)
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1][:n_components]
    return PCAProjection(
        means=means,
        components=eigvec[:, order].T.copy(),
        explained_variance=eigval[order].copy(),
    )


def mi_objective(embeddings, scores, n_pca: int = 3, k: int = 3) -> float:
    """Sum of marginal MI(score, component) over raw dimensions (if the
    embedding is at most n_pca-dimensional) or PCA components."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if embeddings.shape[0] == 1 and embeddings.shape[1] > 1:
        embeddings = embeddings.T
    scores = np.asarray(scores, dtype=float).ravel()
    if embeddings.shape[1] > n_pca:
        proj = fit_pca(embeddings, n_pca)
        embeddings = proj.transform(embeddings)
    total = 0.0
    for c in range(embeddings.shape[1]):
        total += ksg_mutual_information(embeddings[:, c : c + 1], scores, k=k).value
    return total


@dataclass(frozen=True)
class CoverageBound:
    """Adjusted risk levels from the score-input MI bound."""

    alpha_adjusted: float  # alpha + sqrt(1 - exp(-mi)) / rho, clamped at 1
    alpha_adjusted_sqrt: float  # looser sqrt(mi) variant
    alpha_adjusted_finite_n: float | None = None
    alpha_adjusted_sqrt_finite_n: float | None = None


def local_coverage_bound(
    mi: float, rho: float, alpha, n: int | None = None
) -> CoverageBound:
    """Adjusted risk on any input event of probability at least rho.

    With ``n`` given, also reports the finite-sample variants where the
    baseline risk is 1 - ceil((1-alpha)(n+1))/(n+1).
    """
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    if mi < 0:
        raise ValueError("mutual information must be non-negative")
    if not (0 < rho <= 1):
        raise ValueError("rho must be in (0, 1]")
    pen_tight = math.sqrt(1.0 - math.exp(-mi)) / rho
    pen_loose = math.sqrt(mi) / rho
    out = {
        "alpha_adjusted": min(1.0, alpha + pen_tight),
        "alpha_adjusted_sqrt": min(1.0, alpha + pen_loose),
    }
    if n is not None:
        alpha_n = 1.0 - math.ceil((1 - alpha) * (n + 1)) / (n + 1)
        out["alpha_adjusted_finite_n"] = min(1.0, alpha_n + pen_tight)
        out["alpha_adjusted_sqrt_finite_n"] = min(1.0, alpha_n + pen_loose)
    return CoverageBound(**out)


def markov_coverage(q_threshold: float) -> float:
    """Lower coverage bound 1 - 1/q for a mean-rescaled score threshold."""
    if q_threshold <= 0:
        raise ValueError("threshold must be positive")
    return max(0.0, 1.0 - 1.0 / q_threshold)


def cantelli_threshold(cv: float, alpha) -> float:
    """Rescaled-score threshold guaranteeing miscoverage <= alpha given
    the conditional coefficient of variation."""
    alpha = alpha.alpha if isinstance(alpha, RiskLevel) else RiskLevel(alpha).alpha
    if cv < 0:
        raise ValueError("coefficient of variation must be non-negative")
    return 1.0 + cv * math.sqrt((1 - alpha) / alpha)


@dataclass(frozen=True)
class TuningParams:
    n_pca: int = 3
    # pair-sampling budget for the scan-range estimate; must be large enough
    # that the sampled minimum distance tracks the data's resolution scale,
    # otherwise the grid never reaches the fully-local regime
    n_sample: int = 500_000
    n_scan: int = 16
    beta_expand: float = 3.0
    mi_k: int = 3
    mi_subsample: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.beta_expand < 1:
            raise ValueError("beta_expand must be >= 1")
        if self.n_scan < 2:
            raise ValueError("n_scan must be >= 2")


@dataclass
class TuningDiagnostics:
    scales: np.ndarray  # scanned length-scale grid
    mean_mi: np.ndarray  # MI objective per scale, averaged over leave-outs
    per_point_scales: np.ndarray
    mi_grid: np.ndarray  # (N, n_scan)

    def to_rows(self):
        return list(zip(self.scales.tolist(), self.mean_mi.tolist()))


def _pair_distance_range(emb: np.ndarray, n_sample: int, rng) -> tuple[float, float]:
    n = emb.shape[0]
    n_pairs = min(n_sample, n * (n - 1) // 2)
    d_list = []
    attempts = 0
    while len(d_list) < n_pairs:
        attempts += 1
        if attempts > 50:
            raise ValueError("could not sample distinct point pairs (all duplicates?)")
        a = rng.integers(0, n, size=n_pairs)
        b = rng.integers(0, n, size=n_pairs)
        ok = a != b
        d = np.sqrt(np.sum((emb[a[ok]] - emb[b[ok]]) ** 2, axis=1))
        d_list.extend(d[d > 0].tolist())
    d_arr = np.array(d_list[:n_pairs])
    return float(d_arr.min()), float(d_arr.max())


def tune_kernel(
    cal_embeddings, cal_predictions, cal_labels, params: TuningParams | None = None
) -> tuple[KernelSpec, TuningDiagnostics]:
    """Per-point RBF length scales minimizing a leave-one-out
    score-input MI objective over a log grid of candidate scales.

    For each candidate scale and each left-out point m, rescaled scores
    are computed with both the query point and m excluded from the
    kernel means, and the MI between those scores and the inputs
    (point m dropped) is estimated. Each point gets the scale minimizing
    its own leave-out MI; ties resolve to the smallest scale.
    """
    if params is None:
        params = TuningParams()
    emb = np.atleast_2d(np.asarray(cal_embeddings, dtype=float))
    preds = np.asarray(cal_predictions, dtype=float).ravel()
    labels = np.asarray(cal_labels, dtype=float).ravel()
    n = emb.shape[0]
    if n < 4:
        raise ValueError("kernel tuning requires at least 4 points")
    scores = np.abs(labels - preds)
    floor = score_floor(scores)
    rng = make_rng(params.seed, STREAM_TUNING)

    d_min, d_max = _pair_distance_range(emb, params.n_sample, rng)
    scales = np.geomspace(d_min / params.beta_expand, d_max * params.beta_expand,
                          params.n_scan)

    # fixed MI subsample, shared across the whole scan
    if n - 1 > params.mi_subsample:
        sub = np.sort(rng.choice(n, size=params.mi_subsample + 1, replace=False))
    else:
        sub = np.arange(n)
    sub_set = np.zeros(n, dtype=bool)
    sub_set[sub] = True

    D2 = cdist(emb, emb, metric="sqeuclidean")
    mi_grid = np.empty((n, params.n_scan))
    for col, lam in enumerate(scales):
        K = np.exp(-D2 / lam**2)
        np.fill_diagonal(K, 0.0)
        a = K @ scores  # row sums of K_ik s_k (self excluded via diagonal)
        b = K.sum(axis=1)
        for m in range(n):
            # leave-two-out means: exclude query i (diagonal) and point m
            num = a - K[:, m] * scores[m]
            den = b - K[:, m]
            num[m] = np.nan
            den[m] = np.nan
            with np.errstate(invalid="ignore", divide="ignore"):
                means = num / den
            bad = ~np.isfinite(means)
            bad[m] = False
            if np.any(bad):
                # degenerate kernel rows: uniform mean over the pool
                pool_mean = (scores.sum() - scores[m]) / (n - 1)
                means[bad] = (pool_mean * (n - 1) - scores[bad]) / (n - 2)
            s_plus = scores / np.maximum(means, floor)
            keep = sub_set.copy()
            keep[m] = False
            mi_grid[m, col] = mi_objective(
                emb[keep], s_plus[keep], n_pca=params.n_pca, k=params.mi_k
            )
    best = np.argmin(mi_grid, axis=1)  # first minimum = smallest scale
    per_point = scales[best]
    spec = KernelSpec.rbf(per_point_scales=per_point)
    diag = TuningDiagnostics(
        scales=scales,
        mean_mi=mi_grid.mean(axis=0),
        per_point_scales=per_point,
        mi_grid=mi_grid,
    )
    return spec, diag
