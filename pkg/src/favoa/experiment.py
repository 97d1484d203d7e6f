"""The fusion-advantage experiment: full model versus a context-only ablation.

Both variants train on the same generated dataset with the same seed and
budget; they are compared on the ambiguous part of the validation split,
where only face-voice matching carries label information.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from favoa.data import FeatureStoreProvider, featurize, load_dataset
from favoa.metrics import average_precision
from favoa.model import FavoaParams, ModelConfig, predict
from favoa.synth import AMBIGUOUS, GeneratorConfig, generate
from favoa.train import Schedule, TrainConfig, train


@dataclass
class FusionSetup:
    seed: int = 0
    scenes: int = 500
    epochs: int = 30
    rate: float = 1e-3
    generator: dict = field(default_factory=dict)


@dataclass
class FusionResult:
    entries: int
    ambiguous_fraction: float
    ambiguous_val: int
    prevalence: float
    ap_full: float
    ap_context: float
    seconds: float
    losses: dict[str, list[float]]

    @property
    def gap(self) -> float:
        return self.ap_full - self.ap_context

    def to_dict(self) -> dict:
        return {**asdict(self), "gap": self.gap}


def run_fusion_experiment(setup: FusionSetup, workdir: str | Path, log=None) -> FusionResult:
    start = time.perf_counter()
    gen = GeneratorConfig(seed=setup.seed, scenes=setup.scenes, **setup.generator)
    generate(gen, workdir)
    ds = load_dataset(workdir)
    provider = FeatureStoreProvider(ds)
    base = ModelConfig()
    train_set = featurize(ds, provider, ds.split("train"), base.L, base.S, base.tau)
    val_set = featurize(ds, provider, ds.split("val"), base.L, base.S, base.tau)
    amb = val_set.subset([e.ambiguity == AMBIGUOUS for e in val_set.entries])

    tc = TrainConfig(epochs=setup.epochs, seed=setup.seed, schedule=Schedule(gamma_0=setup.rate))
    aps, losses = {}, {}
    for name, ablate in (("full", False), ("context", True)):
        cfg = ModelConfig(ablate_fv=ablate)
        params = FavoaParams.init(cfg, setup.seed)
        report, _ = train(params, cfg, train_set, None, tc,
                          on_epoch=(lambda r, s, n=name: log(f"{n} epoch {r.epoch} loss {r.mean_loss:.4f}")) if log else None)
        q, _ = predict(params, cfg, amb.context, amb.voice)
        aps[name] = average_precision(q, amb.labels, amb.ids)
        losses[name] = report.losses

    n_amb = sum(e.ambiguity == AMBIGUOUS for e in ds.entries)
    return FusionResult(
        entries=len(ds.entries),
        ambiguous_fraction=n_amb / len(ds.entries),
        ambiguous_val=len(amb),
        prevalence=float(np.mean(amb.labels)),
        ap_full=aps["full"],
        ap_context=aps["context"],
        seconds=time.perf_counter() - start,
        losses=losses,
    )
