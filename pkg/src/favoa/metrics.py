"""Ranking and classification metrics with "speaking_audible" as the positive class.

Scores are ranked descending; equal scores are ordered by ascending entry id
so that average precision is reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from favoa.errors import FormatError, UndefinedMetricError

POSITIVE_LABEL = "speaking_audible"
NEGATIVE_LABELS = ("not_speaking", "speaking_not_audible")


@dataclass(frozen=True)
class ScoredEntry:
    score: float
    label: int
    entry_id: str | int


@dataclass
class MetricReport:
    map: float
    auc: float
    balanced_accuracy: float
    threshold: float = 0.5
    count: int = 0
    positives: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def map_label(raw: str) -> int:
    """1 for audible speech, 0 for the other two annotations."""
    if raw == POSITIVE_LABEL:
        return 1
    if raw in NEGATIVE_LABELS:
        return 0
    raise FormatError(f"unknown raw label {raw!r}")


def unpack(entries: Sequence[ScoredEntry]) -> tuple[np.ndarray, np.ndarray, list]:
    scores = np.array([e.score for e in entries], dtype=np.float64)
    labels = np.array([e.label for e in entries], dtype=np.int64)
    return scores, labels, [e.entry_id for e in entries]


def _prepare(scores, labels, ids=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching 1-D arrays")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if ids is None:
        ids = np.arange(scores.size)
    return scores, labels, list(ids)


_AP_BITS = 256


def ranking(scores, ids) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending id."""
    keys = sorted(range(len(ids)), key=lambda i: ids[i])
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[keys] = np.arange(len(ids))
    return np.lexsort((id_rank, -np.asarray(scores)))


def average_precision(scores, labels, ids=None) -> float:
    """Mean over positives of precision at each positive's rank."""
    scores, labels, ids = _prepare(scores, labels, ids)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    ranked = labels[ranking(scores, ids)]
    pos_ranks = np.flatnonzero(ranked == 1) + 1
    # sum hits/rank in fixed point with 2**-256 resolution, then round once;
    # the result is the correctly rounded rational for any realistic input
    total = sum((hits << _AP_BITS) // int(rank) for hits, rank in enumerate(pos_ranks, start=1))
    return float(Fraction(total, n_pos << _AP_BITS))


def roc_auc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counting one half."""
    scores, labels, _ = _prepare(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # twice the average 1-based rank of each distinct value is an integer,
    # so the statistic is an exact ratio of integers rounded once at the end
    upper = np.cumsum(counts)
    twice_rank = 2 * upper - counts + 1
    twice_rank_sum = int(twice_rank[inverse][labels == 1].sum())
    return (twice_rank_sum - n_pos * (n_pos + 1)) / (2 * n_pos * n_neg)


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores, labels, _ = _prepare(scores, labels)
    pos = labels == 1
    if pos.all() or not pos.any():
        raise UndefinedMetricError("balanced accuracy needs both classes")
    pred = scores >= threshold
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    tp, tn = int(pred[pos].sum()), int((~pred[~pos]).sum())
    # (tp/P + tn/N) / 2 as a single correctly rounded division
    return (tp * n_neg + tn * n_pos) / (2 * n_pos * n_neg)


def evaluate(scores, labels, ids=None, threshold: float = 0.5) -> MetricReport:
    scores, labels, ids = _prepare(scores, labels, ids)
    return MetricReport(
        map=average_precision(scores, labels, ids),
        auc=roc_auc(scores, labels),
        balanced_accuracy=balanced_accuracy(scores, labels, threshold),
        threshold=threshold,
        count=int(labels.size),
        positives=int(labels.sum()),
    )


def write_scores_csv(path: str | Path, ids, scores, raw_labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry_id", "score", "label"])
        for i, s, lab in zip(ids, scores, raw_labels):
            w.writerow([i, repr(float(s)), lab])


def read_scores_csv(path: str | Path) -> tuple[list[str], np.ndarray, list[str]]:
    ids, scores, raw = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"entry_id", "score", "label"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ids.append(row["entry_id"])
            try:
                scores.append(float(row["score"]))
            except ValueError as exc:
                raise FormatError(f"{path}: bad score {row['score']!r} for {row['entry_id']}") from exc
            raw.append(row["label"])
    return ids, np.array(scores, dtype=np.float64), raw


def report_from_csv(path: str | Path, threshold: float = 0.5) -> MetricReport:
    ids, scores, raw = read_scores_csv(path)
    labels = np.array([map_label(r) for r in raw], dtype=np.int64)
    return evaluate(scores, labels, ids, threshold)
