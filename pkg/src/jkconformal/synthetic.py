"""1D heteroscedastic synthetic regression data and small built-in base
regressors for end-to-end experiments.

y = f(X) + eps with X ~ U(0,1), f(X) = f0 + X^2 sin(k_f X + phi_f),
eps ~ Normal(0, lam * nu(X)) and nu(X) = eps0 + |sin(k_eps X + phi_eps)|.
The second Normal parameter is read as the standard deviation by
default; set ``noise_as_variance`` to treat it as the variance.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import Dataset
from .randomness import STREAM_SYNTH, make_rng, standard_normal


@dataclass(frozen=True)
class Synth1DParams:
    f0: float = 1e-1
    k_f: float = 10.0
    phi_f: float = 0.5
    eps0: float = 1e-2
    k_eps: float = 2.0
    phi_eps: float = 0.3
    lam: float = 1e-1
    noise_as_variance: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.eps0 < 0:
            raise ValueError("eps0 must be non-negative")


def mean_function(x: np.ndarray, params: Synth1DParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return params.f0 + x**2 * np.sin(params.k_f * x + params.phi_f)


def noise_scale(x: np.ndarray, params: Synth1DParams) -> np.ndarray:
    """Standard deviation of the label noise at x."""
    x = np.asarray(x, dtype=float)
    nu = params.eps0 + np.abs(np.sin(params.k_eps * x + params.phi_eps))
    raw = params.lam * nu
    return np.sqrt(raw) if params.noise_as_variance else raw


def generate_1d(
    n: int, params: Synth1DParams | None = None, seed: int = 0, stream: int = 0
) -> Dataset:
    """Sample n points, deterministic under (seed, stream)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if params is None:
        params = Synth1DParams()
    rng = make_rng(seed, STREAM_SYNTH + stream)
    x = rng.random(n)
    z = standard_normal(rng, n)
    y = mean_function(x, params) + z * noise_scale(x, params)
    return Dataset(features=x[:, None], labels=y)


class KNNRegressor:
    """Mean label of the k nearest training points. k=1 realizes the
    zero-training-error overfit regime."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._features: np.ndarray | None = None
        self._labels: np.ndarray | None = None

    def fit(self, features, labels) -> "KNNRegressor":
        features = np.atleast_2d(np.asarray(features, dtype=float))
        labels = np.asarray(labels, dtype=float).ravel()
        if features.shape[0] != labels.shape[0]:
            raise ValueError("features/labels length mismatch")
        if features.shape[0] == 0:
            raise ValueError("empty training set")
        self._features = features
        self._labels = labels
        return self

    def predict(self, query_features) -> np.ndarray:
        if self._features is None:
            raise RuntimeError("regressor not fitted")
        q = np.atleast_2d(np.asarray(query_features, dtype=float))
        k_eff = min(self.k, self._features.shape[0])
        D = cdist(q, self._features)
        if k_eff == self._features.shape[0]:
            return np.full(q.shape[0], self._labels.mean())
        part = np.argpartition(D, k_eff - 1, axis=1)[:, :k_eff]
        return self._labels[part].mean(axis=1)


class BinnedMean:
    """Mean label within equal-width 1-D bins of the training inputs."""

    def __init__(self, n_bins: int):
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        self.n_bins = n_bins
        self._edges: np.ndarray | None = None
        self._means: np.ndarray | None = None
        self._global_mean = 0.0

    def fit(self, features, labels) -> "BinnedMean":
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != 1:
            raise ValueError("BinnedMean supports 1-D features only")
        x = features[:, 0]
        labels = np.asarray(labels, dtype=float).ravel()
        if x.shape[0] == 0:
            raise ValueError("empty training set")
        self._edges = np.linspace(x.min(), x.max(), self.n_bins + 1)
        idx = np.clip(
            np.searchsorted(self._edges, x, side="right") - 1, 0, self.n_bins - 1
        )
        self._global_mean = float(labels.mean())
        sums = np.bincount(idx, weights=labels, minlength=self.n_bins)
        counts = np.bincount(idx, minlength=self.n_bins)
        with np.errstate(invalid="ignore"):
            means = sums / counts
        self._means = np.where(counts > 0, means, self._global_mean)
        return self

    def predict(self, query_features) -> np.ndarray:
        if self._means is None:
            raise RuntimeError("regressor not fitted")
        q = np.atleast_2d(np.asarray(query_features, dtype=float))
        if q.shape[1] != 1:
            raise ValueError("BinnedMean supports 1-D features only")
        idx = np.clip(
            np.searchsorted(self._edges, q[:, 0], side="right") - 1,
            0,
            self.n_bins - 1,
        )
        return self._means[idx]


def fit_predict(regressor, train: Dataset, query_features) -> np.ndarray:
    """Fit on a training Dataset, predict at the query features."""
    regressor.fit(train.features, train.labels)
    return regressor.predict(query_features)
