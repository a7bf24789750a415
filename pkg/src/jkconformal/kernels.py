"""Kernel evaluation and normalized local-mean weight computations.

Two kernel families are supported: a K-nearest-neighbor indicator kernel
and an isotropic RBF, the latter optionally with a per-calibration-point
length scale (the tuned-kernel case). Nearest-neighbor queries are exact;
ties at the k-th distance are all included so results are permutation
stable.

All summations over kernel values run in ascending value order so that
results are bit-identical under any permutation of the reference points.
"""

import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateKernelWarning(UserWarning):
    """All kernel values underflowed to zero; uniform fallback applied."""


#: Incremented whenever an RBF evaluation falls back to uniform weights.
degenerate_fallback_count = 0


def _record_fallback():
    global degenerate_fallback_count
    degenerate_fallback_count += 1
    warnings.warn(
        "RBF kernel underflowed to zero everywhere; using uniform weights",
        DegenerateKernelWarning,
        stacklevel=3,
    )


def sorted_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum in ascending order: permutation-independent float reduction."""
    return np.sort(values, axis=axis).sum(axis=axis)


@dataclass(frozen=True)
class KernelSpec:
    """Declarative kernel description.

    kind: "knn" (indicator over the k nearest points) or "rbf"
    (exp(-||q - r||^2 / scale^2)). ``per_point_scales`` overrides the RBF
    scale per calibration point; the scale used for an evaluation is the
    one attached to the left-out calibration point.
    """

    kind: str
    k: int = 0
    length_scale: float = 0.0
    per_point_scales: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("knn", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "knn" and self.k < 1:
            raise ValueError("KNN kernel requires k >= 1")
        if self.kind == "rbf":
            if self.per_point_scales is not None:
                scales = np.asarray(self.per_point_scales, dtype=float).ravel()
                if np.any(scales <= 0):
                    raise ValueError("per_point_scales must be positive")
                scales.flags.writeable = False
                object.__setattr__(self, "per_point_scales", scales)
            elif self.length_scale <= 0:
                raise ValueError("RBF kernel requires length_scale > 0")

    @staticmethod
    def knn(k: int) -> "KernelSpec":
        return KernelSpec(kind="knn", k=k)

    @staticmethod
    def rbf(length_scale: float = 0.0, per_point_scales=None) -> "KernelSpec":
        return KernelSpec(
            kind="rbf", length_scale=length_scale, per_point_scales=per_point_scales
        )

    def scale_for(self, index: int | None) -> float:
        if self.per_point_scales is not None:
            if index is None:
                raise ValueError("per-point scales require a scale index")
            return float(self.per_point_scales[index])
        return self.length_scale

    def to_json_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "knn":
            d["k"] = self.k
        else:
            if self.per_point_scales is not None:
                d["per_point_scales"] = [float(v) for v in self.per_point_scales]
            else:
                d["length_scale"] = self.length_scale
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "KernelSpec":
        if d["kind"] == "knn":
            return KernelSpec.knn(int(d["k"]))
        scales = d.get("per_point_scales")
        return KernelSpec.rbf(
            length_scale=float(d.get("length_scale", 0.0)),
            per_point_scales=None if scales is None else np.asarray(scales, float),
        )


class NeighborIndex:
    """Exact nearest-neighbor queries over a fixed point set.

    A single distance definition is used throughout so tie inclusion at
    the k-th distance is exact and permutation stable.
    """

    def __init__(self, points: np.ndarray):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.ndim != 2:
            raise ValueError("points must be a 2-D matrix")
        self.points = points
        self.n, self.dim = points.shape

    def distances(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=float).ravel()
        if query.shape[0] != self.dim:
            raise ValueError(
                f"query dimension {query.shape[0]} != index dimension {self.dim}"
            )
        diff = self.points - query[None, :]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def knn_indices(self, query, k: int, exclude=()) -> np.ndarray:
        """Indices of the k nearest points to query, excluding
        ``exclude``, with ties at the k-th distance all included."""
        query = np.asarray(query, dtype=float).ravel()
        excl = set(int(e) for e in exclude)
        pool = self.n - len(excl)
        if pool < 1:
            raise ValueError("no points left after exclusions")
        k_eff = min(k, pool)
        d = self.distances(query)
        if excl:
            d = d.copy()
            d[list(excl)] = np.inf
        thr = np.partition(d, k_eff - 1)[k_eff - 1]
        return np.flatnonzero(d <= thr)


def kernel_value(
    spec: KernelSpec,
    query_point,
    reference_point,
    context: NeighborIndex | None = None,
    reference_index: int | None = None,
    exclusions=(),
    scale_index: int | None = None,
) -> float:
    """Single kernel evaluation.

    KNN: indicator that ``reference_index`` is among the k nearest
    points of ``context`` to the query (after exclusions). RBF:
    exp(-||q - r||^2 / scale^2).
    """
    q = np.asarray(query_point, dtype=float).ravel()
    r = np.asarray(reference_point, dtype=float).ravel()
    if q.shape != r.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {r.shape}")
    if spec.kind == "rbf":
        scale = spec.scale_for(scale_index)
        dist2 = float(np.sum((q - r) ** 2))
        return float(np.exp(-dist2 / scale**2))
    if context is None or reference_index is None:
        raise ValueError("KNN kernel evaluation requires context and reference_index")
    members = context.knn_indices(q, spec.k, exclude=exclusions)
    return 1.0 if reference_index in members else 0.0


def _weights_at(
    spec: KernelSpec,
    query: np.ndarray,
    points: np.ndarray,
    exclusions,
    scale_index: int | None = None,
    index: NeighborIndex | None = None,
) -> np.ndarray:
    """Normalized local-mean weights at an arbitrary query point.

    Returns a length-n vector, zero exactly on ``exclusions``, summing
    to 1 over the rest. Falls back to uniform weights (with a warning)
    when every kernel value underflows to zero.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    excl = np.asarray(sorted(set(int(e) for e in exclusions)), dtype=int)
    if n - excl.shape[0] < 1:
        raise ValueError("no support left after exclusions")
    if index is None:
        index = NeighborIndex(points)
    w = np.zeros(n)
    if spec.kind == "knn":
        members = index.knn_indices(query, spec.k, exclude=excl)
        w[members] = 1.0 / members.shape[0]
        return w
    scale = spec.scale_for(scale_index)
    d2 = np.sum((points - np.asarray(query, float)[None, :]) ** 2, axis=1)
    vals = np.exp(-d2 / scale**2)
    vals[excl] = 0.0
    total = sorted_sum(vals)
    if total <= 0.0:
        _record_fallback()
        mask = np.ones(n, dtype=bool)
        mask[excl] = False
        w[mask] = 1.0 / mask.sum()
        return w
    return vals / total


def nw_weights(
    spec: KernelSpec,
    i: int,
    exclusions,
    points: np.ndarray,
    index: NeighborIndex | None = None,
    scale_index: int | None = None,
) -> np.ndarray:
    """Nadaraya-Watson weights for sample i over ``points``.

    ``exclusions`` must contain i itself. For per-point RBF scales the
    effective scale belongs to the left-out point (``scale_index``,
    defaulting to i).
    """
    exclusions = set(int(e) for e in exclusions)
    if i not in exclusions:
        raise ValueError("exclusions must contain the query index i")
    if scale_index is None:
        scale_index = i
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return _weights_at(
        spec, points[i], points, exclusions, scale_index=scale_index, index=index
    )


def nw_mean_at(
    spec: KernelSpec,
    query: np.ndarray,
    points: np.ndarray,
    values: np.ndarray,
    exclusions=(),
    scale_index: int | None = None,
    index: NeighborIndex | None = None,
) -> float:
    """Kernel-weighted mean of ``values`` at an arbitrary query point.

    Numerator and normalization both run over the non-excluded points,
    summed in canonical order.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    excl = np.asarray(sorted(set(int(e) for e in exclusions)), dtype=int)
    n = points.shape[0]
    if n - excl.shape[0] < 1:
        raise ValueError("no support left after exclusions")
    if index is None:
        index = NeighborIndex(points)
    if spec.kind == "knn":
        members = index.knn_indices(query, spec.k, exclude=excl)
        return float(sorted_sum(values[members]) / members.shape[0])
    scale = spec.scale_for(scale_index)
    d2 = np.sum((points - np.asarray(query, float)[None, :]) ** 2, axis=1)
    vals = np.exp(-d2 / scale**2)
    vals[excl] = 0.0
    den = sorted_sum(vals)
    if den <= 0.0:
        _record_fallback()
        mask = np.ones(n, dtype=bool)
        mask[excl] = False
        return float(sorted_sum(values[mask]) / mask.sum())
    return float(sorted_sum(vals * values) / den)


def leave_two_out_mean(
    spec: KernelSpec,
    i: int,
    j: int,
    points: np.ndarray,
    scores: np.ndarray,
    index: NeighborIndex | None = None,
) -> float:
    """Kernel mean of scores at point i with both i and j left out.

    For per-point RBF scales the effective scale is the one attached to
    j, matching the tuned-kernel calibration convention.
    """
    if i == j:
        raise ValueError("leave-two-out requires i != j")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return nw_mean_at(
        spec,
        points[i],
        points,
        scores,
        exclusions={i, j},
        scale_index=j,
        index=index,
    )
