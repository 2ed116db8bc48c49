"""AUROC (exact and histogram-binned) and the per-category metrics table."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from snl.errors import UndefinedMetricError

DEFAULT_BINS = 4096

CSV_COLUMNS = ["category", "image_auroc", "pixel_auroc", "n_test", "n_anom", "map_min", "map_max"]


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    return scores, labels


def _check_classes(n_pos: int, n_neg: int) -> None:
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")


def auroc(scores, labels) -> float:
    """Exact AUROC: the Mann-Whitney U statistic over ``#pos * #neg``.

    Tied scores count one half.
    """
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    _check_classes(n_pos, n_neg)
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class BinnedROC:
    """Streaming ROC accumulator over fixed-width score bins on ``[lo, hi]``.

    Scores outside the range fall into the end bins.  Accumulators with the
    same range merge by adding counts, so the result does not depend on how
    the data was chunked or in which order chunks were merged.
    """

    lo: float
    hi: float
    bins: int = DEFAULT_BINS
    pos: np.ndarray = field(default=None, repr=False)
    neg: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("bin range must be finite")
        if self.pos is None:
            self.pos = np.zeros(self.bins, dtype=np.int64)
        if self.neg is None:
            self.neg = np.zeros(self.bins, dtype=np.int64)

    def bin_index(self, scores: np.ndarray) -> np.ndarray:
        width = self.hi - self.lo
        if width <= 0:
            return np.zeros(scores.shape, dtype=np.int64)
        idx = np.floor((scores - self.lo) / width * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def update(self, scores, labels) -> "BinnedROC":
        scores, labels = _as_arrays(scores, labels)
        idx = self.bin_index(scores)
        self.pos += np.bincount(idx[labels], minlength=self.bins)
        self.neg += np.bincount(idx[~labels], minlength=self.bins)
        return self

    def merge(self, other: "BinnedROC") -> "BinnedROC":
        if (self.lo, self.hi, self.bins) != (other.lo, other.hi, other.bins):
            raise ValueError("cannot merge accumulators with different binning")
        return BinnedROC(self.lo, self.hi, self.bins, self.pos + other.pos, self.neg + other.neg)

    __add__ = merge

    def auroc(self) -> float:
        n_pos = int(self.pos.sum())
        n_neg = int(self.neg.sum())
        _check_classes(n_pos, n_neg)
        neg_below = np.concatenate([[0], np.cumsum(self.neg)[:-1]])
        # integer pair counts first, then a single division
        wins2 = int((self.pos * (2 * neg_below + self.neg)).sum())
        return wins2 / (2.0 * n_pos * n_neg)


def binned_auroc(scores, labels, bins: int = DEFAULT_BINS) -> float:
    """Histogram AUROC with the range taken from the data."""
    scores, labels = _as_arrays(scores, labels)
    return BinnedROC(float(scores.min()), float(scores.max()), bins).update(scores, labels).auroc()


@dataclass
class CategoryResult:
    category: str
    image_auroc: float
    pixel_auroc: float
    n_test: int
    n_anom: int
    map_min: float = float("nan")
    map_max: float = float("nan")


def mean_row(rows: list[CategoryResult]) -> CategoryResult:
    """Unweighted mean over categories."""
    if not rows:
        raise UndefinedMetricError("no categories to average")
    return CategoryResult(
        category="mean",
        image_auroc=float(np.mean([r.image_auroc for r in rows])),
        pixel_auroc=float(np.nanmean([r.pixel_auroc for r in rows])),
        n_test=sum(r.n_test for r in rows),
        n_anom=sum(r.n_anom for r in rows),
        map_min=rows[0].map_min,
        map_max=rows[0].map_max,
    )


def write_metrics_csv(path, rows: list[CategoryResult]) -> None:
    """One row per category followed by the mean row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in [*rows, mean_row(rows)]:
            writer.writerow(
                [
                    r.category,
                    repr(float(r.image_auroc)),
                    repr(float(r.pixel_auroc)),
                    r.n_test,
                    r.n_anom,
                    repr(float(r.map_min)),
                    repr(float(r.map_max)),
                ]
            )


def read_metrics_csv(path) -> list[CategoryResult]:
    """Inverse of :func:`write_metrics_csv`, including the mean row."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        return [
            CategoryResult(
                category=row["category"],
                image_auroc=float(row["image_auroc"]),
                pixel_auroc=float(row["pixel_auroc"]),
                n_test=int(row["n_test"]),
                n_anom=int(row["n_anom"]),
                map_min=float(row["map_min"]),
                map_max=float(row["map_max"]),
            )
            for row in reader
        ]
