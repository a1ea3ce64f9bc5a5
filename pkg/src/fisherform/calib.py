"""Rank normalization against a reference set, ROC curves and histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricKind


@dataclass(frozen=True)
class ReferenceSet:
    metric: MetricKind
    scores: np.ndarray = field(repr=False)
    source_label: str = ""

    def __post_init__(self):
        scores = np.sort(np.asarray(self.scores, dtype=np.float64).ravel())
        if scores.size == 0:
            raise ValueError("reference set is empty")
        if not np.all(np.isfinite(scores)):
            raise ValueError("reference scores must be finite")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "metric", MetricKind(self.metric))

    def __len__(self):
        return self.scores.size


def rank_normalize(q_value, ref: ReferenceSet):
    """Fraction of reference scores strictly below ``q_value``.

    Ties count as not-below.  Accepts a scalar or an array of queries.
    """
    q = np.asarray(q_value, dtype=np.float64)
    out = np.searchsorted(ref.scores, q, side="left") / ref.scores.size
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> RocCurve:
    """ROC of the rule "score >= threshold means positive".

    Thresholds sweep every distinct score from high to low.  Tied
    positive/negative scores produce a diagonal segment, so the trapezoidal
    area equals the Mann-Whitney statistic ``P(pos > neg) + P(pos = neg)/2``.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc needs at least one positive and one negative score")
    if np.isnan(pos).any() or np.isnan(neg).any():
        raise ValueError("roc scores must not be NaN")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    tpr = np.concatenate([[0.0], tp / pos.size])
    fpr = np.concatenate([[0.0], fp / neg.size])
    # integer trapezoid sum keeps the area exact up to one final division
    tp_i = np.concatenate([[0], tp])
    fp_i = np.concatenate([[0], fp])
    twice_area = np.sum(np.diff(fp_i) * (tp_i[1:] + tp_i[:-1]))
    auc = float(twice_area) / (2.0 * pos.size * neg.size)
    return RocCurve(fpr, tpr, auc)


def histogram(scores: Iterable[float], bins: int, range: tuple[float, float]) -> list[tuple[float, int]]:
    """Counts per equal-width bin; a score equal to ``hi`` lands in the last bin."""
    lo, hi = range
    if bins < 1:
        raise ValueError("bins must be at least 1")
    if not lo < hi:
        raise ValueError("histogram range needs lo < hi")
    counts, edges = np.histogram(np.asarray(list(scores), dtype=np.float64), bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    return [(float(c), int(n)) for c, n in zip(centers, counts)]


def write_reference_csv(path, refs: Iterable[ReferenceSet]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "score"])
        for ref in refs:
            for s in ref.scores:
                w.writerow([ref.metric.value, repr(float(s))])


def load_reference_csv(path, source_label: str | None = None) -> dict[MetricKind, ReferenceSet]:
    """Load reference scores grouped by metric.

    Accepts either a ``metric,score`` file or a score table (its ``raw``
    column is used).
    """
    groups: dict[MetricKind, list[float]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(row for row in f if not row.startswith("#"))
        fields = reader.fieldnames or []
        column = "score" if "score" in fields else "raw" if "raw" in fields else None
        if "metric" not in fields or column is None:
            raise ValueError(f"{path}: expected a 'metric,score' header")
        for lineno, row in enumerate(reader, start=2):
            try:
                groups.setdefault(MetricKind(row["metric"]), []).append(float(row[column]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    label = source_label if source_label is not None else Path(path).name
    return {m: ReferenceSet(m, s, label) for m, s in groups.items()}


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# auc={curve.auc!r}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for x, y in curve.points:
            w.writerow([repr(x), repr(y)])


def read_roc_csv(path) -> RocCurve:
    auc = None
    rows = []
    with open(path, newline="") as f:
        for line in f:
            line = line.strip()
            if line.startswith("# auc="):
                auc = float(line[len("# auc="):])
            elif line and not line.startswith("#") and line != "fpr,tpr":
                x, y = line.split(",")
                rows.append((float(x), float(y)))
    if auc is None:
        raise ValueError(f"{path}: missing '# auc=' line")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    return RocCurve(arr[:, 0], arr[:, 1], auc)
