"""Core datatypes, CSV ingestion, and deterministic data splitting.

CSV schema: a header row with feature columns ``x0, x1, ...``, a label
column ``y``, an optional prediction column ``pred``, and optional
embedding columns ``emb0, emb1, ...``. One row per sample, ``.`` decimal
separator, UTF-8.
"""

import csv
import re
from dataclasses import dataclass

import numpy as np

from .randomness import STREAM_SPLIT, make_rng


class ParseError(ValueError):
    """Malformed dataset file."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) plus label vector (n,)."""

    features: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        labels = np.asarray(self.labels, dtype=float).ravel()
        if feats.shape[0] != labels.shape[0]:
            raise ValueError(
                f"features rows ({feats.shape[0]}) != labels length ({labels.shape[0]})"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN/Inf")
        if not np.all(np.isfinite(labels)):
            raise ValueError("labels contain NaN/Inf")
        if self.ids is not None and len(self.ids) != labels.shape[0]:
            raise ValueError("ids length mismatch")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ModelOutputs:
    """Predictions (and optional embeddings) attached to a Dataset."""

    predictions: np.ndarray
    embeddings: np.ndarray | None = None

    def __post_init__(self):
        preds = np.asarray(self.predictions, dtype=float).ravel()
        if not np.all(np.isfinite(preds)):
            raise ValueError("predictions contain NaN/Inf")
        object.__setattr__(self, "predictions", _readonly(preds))
        if self.embeddings is not None:
            emb = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
            if emb.shape[0] != preds.shape[0]:
                raise ValueError("embeddings must have one row per sample")
            if not np.all(np.isfinite(emb)):
                raise ValueError("embeddings contain NaN/Inf")
            object.__setattr__(self, "embeddings", _readonly(emb))

    def __len__(self) -> int:
        return self.predictions.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/calibration/test partition request."""

    seed: int
    n_train: int
    n_cal: int
    n_test: int
    repetition_index: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_cal", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.repetition_index < 0:
            raise ValueError("repetition_index must be non-negative")

    @property
    def total(self) -> int:
        return self.n_train + self.n_cal + self.n_test


@dataclass(frozen=True)
class RiskLevel:
    """Marginal risk level; open interval because alpha in {0, 1} makes
    the conformal quantile index degenerate."""

    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


def split(
    dataset: Dataset, spec: SplitSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint (train, cal, test) index arrays, deterministic under
    (seed, repetition_index).

    Indices are permuted with a Philox stream and cut contiguously, then
    sorted within each part.
    """
    n = len(dataset)
    if spec.total > n:
        raise ValueError(
            f"split sizes {spec.n_train}+{spec.n_cal}+{spec.n_test} exceed dataset size {n}"
        )
    rng = make_rng(spec.seed, STREAM_SPLIT + spec.repetition_index)
    perm = rng.permutation(n)
    a, b = spec.n_train, spec.n_train + spec.n_cal
    c = b + spec.n_test
    return (
        np.sort(perm[:a]),
        np.sort(perm[a:b]),
        np.sort(perm[b:c]),
    )


_FEATURE_RE = re.compile(r"^x(\d+)$")
_EMB_RE = re.compile(r"^emb(\d+)$")


def _parse_header(header: list[str]) -> tuple[list[int], int, int | None, list[int]]:
    feat_cols: dict[int, int] = {}
    emb_cols: dict[int, int] = {}
    y_col = None
    pred_col = None
    for pos, name in enumerate(header):
        name = name.strip()
        m = _FEATURE_RE.match(name)
        if m:
            feat_cols[int(m.group(1))] = pos
            continue
        m = _EMB_RE.match(name)
        if m:
            emb_cols[int(m.group(1))] = pos
            continue
        if name == "y":
            y_col = pos
        elif name == "pred":
            pred_col = pos
        else:
            raise ParseError(f"unrecognized column {name!r} in header")
    if y_col is None:
        raise ParseError("missing label column 'y'")
    if not feat_cols:
        raise ParseError("no feature columns 'x<i>' found")
    if sorted(feat_cols) != list(range(len(feat_cols))):
        raise ParseError("feature columns must be contiguous x0..x<d-1>")
    if emb_cols and sorted(emb_cols) != list(range(len(emb_cols))):
        raise ParseError("embedding columns must be contiguous emb0..emb<d-1>")
    feats = [feat_cols[i] for i in range(len(feat_cols))]
    embs = [emb_cols[i] for i in range(len(emb_cols))]
    return feats, y_col, pred_col, embs


def load_dataset(path) -> tuple[Dataset, ModelOutputs | None]:
    """Read the canonical CSV; prediction/embedding columns, when
    present, populate a ModelOutputs."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        feat_pos, y_pos, pred_pos, emb_pos = _parse_header(header)
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(
                    f"{path}: row {lineno}: expected {width} cells, got {len(row)}"
                )
            parsed = []
            for cell, name in zip(row, header):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {lineno}: non-numeric cell {cell!r} in column {name!r}"
                    ) from None
                if not np.isfinite(v):
                    raise ParseError(
                        f"{path}: row {lineno}: NaN/Inf in column {name!r}"
                    )
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    table = np.array(rows, dtype=float)
    dataset = Dataset(features=table[:, feat_pos], labels=table[:, y_pos])
    outputs = None
    if pred_pos is not None or emb_pos:
        if pred_pos is None:
            raise ParseError(f"{path}: embedding columns require a 'pred' column")
        emb = table[:, emb_pos] if emb_pos else None
        outputs = ModelOutputs(predictions=table[:, pred_pos], embeddings=emb)
    return dataset, outputs


def save_dataset(path, dataset: Dataset, outputs: ModelOutputs | None = None) -> None:
    """Write the canonical CSV with full float precision (round-trips
    bit-exactly through load_dataset)."""
    d = dataset.n_features
    header = [f"x{i}" for i in range(d)] + ["y"]
    cols = [dataset.features[:, i] for i in range(d)] + [dataset.labels]
    if outputs is not None:
        header.append("pred")
        cols.append(outputs.predictions)
        if outputs.embeddings is not None:
            for j in range(outputs.embeddings.shape[1]):
                header.append(f"emb{j}")
                cols.append(outputs.embeddings[:, j])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            writer.writerow([repr(float(col[i])) for col in cols])
