"""How much the voice branch drives each decision, read off the GBU gate.

The degree of contribution of an entry is the fraction of gate elements
strictly above 0.5, i.e. the share of fused elements that lean towards the
voice branch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from favoa.data import FeaturizedSet
from favoa.errors import ContractError, FavoaError
from favoa.model import FavoaParams, ModelConfig, predict
from favoa.tensor import Tensor

# degrees are ratios k/d; this absorbs rounding when they sit on a bin edge
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class ContributionRecord:
    entry_id: str
    degree: float
    label: str
    q: float


@dataclass
class Histogram:
    bin_width: float
    bins: list[tuple[float, int]]

    @property
    def counts(self) -> list[int]:
        return [c for _, c in self.bins]


def degree_of_contribution(p: Tensor | np.ndarray | Sequence[float]) -> float:
    arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ContractError("gate vector is empty")
    return float(np.count_nonzero(arr > 0.5)) / arr.size


def degrees(gates: np.ndarray) -> np.ndarray:
    """Row-wise degree of contribution for a ``[N, d]`` stack of gates."""
    gates = np.asarray(gates)
    if gates.ndim != 2 or gates.shape[1] == 0:
        raise ContractError(f"expected a [N, d] gate array, got {gates.shape}")
    return np.count_nonzero(gates > 0.5, axis=1) / gates.shape[1]


def n_bins_for(bin_width: float) -> int:
    if not bin_width > 0 or not math.isfinite(bin_width):
        raise ContractError(f"bin width must be positive, got {bin_width}")
    n = round(1.0 / bin_width)
    if n < 1 or abs(n * bin_width - 1.0) > 1e-9:
        raise ContractError(f"bin width {bin_width} does not divide [0, 1] into whole bins")
    return n


def build_histogram(values: Sequence[ContributionRecord] | Sequence[float], bin_width: float = 0.025) -> Histogram:
    """Equal-width bins over [0, 1]; a value on an edge goes to the upper bin, 1.0 to the last."""
    n = n_bins_for(bin_width)
    vals = [v.degree if isinstance(v, ContributionRecord) else float(v) for v in values]
    if not vals:
        raise ContractError("no records to histogram")
    counts = [0] * n
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"degree {v} outside [0, 1]")
        counts[min(int(math.floor(v * n + _EDGE_EPS)), n - 1)] += 1
    return Histogram(bin_width, [(k / n, c) for k, c in enumerate(counts)])


def summarize(records: Sequence[ContributionRecord]) -> dict:
    d = np.array([r.degree for r in records])
    return {
        "count": int(d.size),
        "mean": float(d.mean()),
        "median": float(np.median(d)),
        "frac_gt_0.15": float(np.mean(d > 0.15)),
        "frac_gt_0.30": float(np.mean(d > 0.30)),
    }


def analyze(params: FavoaParams, config: ModelConfig, data: FeaturizedSet, bin_width: float = 0.025):
    """Per-entry records, histogram and summary for a featurized dataset."""
    try:
        q, gates = predict(params, config, data.context, data.voice)
    except FavoaError as exc:
        raise type(exc)(f"forward pass failed for batch starting at {data.ids[0] if data.ids else '?'}: {exc}") from exc
    degs = degrees(gates)
    records = [
        ContributionRecord(e.entry_id, float(dg), e.raw_label, float(qq))
        for e, dg, qq in zip(data.entries, degs, q)
    ]
    return records, build_histogram(records, bin_width), summarize(records)


def write_records_csv(path: str | Path, records: Sequence[ContributionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry_id", "degree", "label", "score"])
        for r in records:
            w.writerow([r.entry_id, repr(r.degree), r.label, repr(r.q)])


def write_histogram_csv(path: str | Path, hist: Histogram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lower", "count"])
        for lower, count in hist.bins:
            w.writerow([repr(lower), count])


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
