"""Plot-free histogram of gate contributions for a trained parameter file.

Usage::

    python scripts/contribution_histogram.py DATASET PARAMS [--split val] [--bin-width 0.05]

Prints an ASCII bar per bin, broken down by label, followed by the summary.
"""

from __future__ import annotations

import argparse
import json

from favoa.contribution import analyze, build_histogram
from favoa.data import FeatureStoreProvider, featurize, load_dataset
from favoa.model import load_params, read_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset")
    ap.add_argument("params")
    ap.add_argument("--split", default="val")
    ap.add_argument("--bin-width", type=float, default=0.05)
    ap.add_argument("--width", type=int, default=50, help="characters for the longest bar")
    args = ap.parse_args(argv)

    cfg = read_config(args.params)
    params = load_params(args.params, cfg)
    ds = load_dataset(args.dataset)
    data = featurize(ds, FeatureStoreProvider(ds), ds.split(args.split), cfg.L, cfg.S, cfg.tau)
    records, hist, summary = analyze(params, cfg, data, args.bin_width)

    by_label = {}
    for label in sorted({r.label for r in records}):
        by_label[label] = build_histogram([r for r in records if r.label == label], args.bin_width).counts
    peak = max(hist.counts) or 1
    for i, total in enumerate(hist.counts):
        lo = i * args.bin_width
        split = " ".join(f"{lab}={c[i]}" for lab, c in by_label.items())
        print(f"[{lo:5.3f}, {lo + args.bin_width:5.3f}) {'#' * round(args.width * total / peak):<{args.width}} {split}")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
