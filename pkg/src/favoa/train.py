"""Mini-batch training with summed cross-entropy, ADAM, and step-decay of the rate."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from favoa import tensor as T
from favoa.data import FeaturizedSet
from favoa.errors import ContractError, NumericError, UndefinedMetricError
from favoa.metrics import evaluate
from favoa.model import (
    CHECKPOINT_MAGIC,
    FavoaParams,
    ModelConfig,
    batch_loss,
    params_from_arrays,
    predict,
    read_tensor_file,
    trainable_parameters,
    write_tensor_file,
)

Q_FLOOR = 1e-12


@dataclass
class Schedule:
    """``rate(epoch) = gamma_0 * eta ** (epoch // period)``."""

    gamma_0: float = 3e-6
    eta: float = 0.1
    period: int = 10

    def rate(self, epoch: int) -> float:
        if epoch < 0:
            raise ContractError("epoch must be non-negative")
        return self.gamma_0 * self.eta ** (epoch // self.period)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def loss(q: float, y: int) -> float:
    """Binary cross-entropy of probability ``q`` for label ``y``, with ``q`` clamped away from 0 and 1."""
    q = min(max(float(q), Q_FLOOR), 1.0 - Q_FLOOR)
    return -y * math.log(q) - (1 - y) * math.log(1.0 - q)


def adam_step(state: OptimizerState, params: dict[str, T.Tensor], grads: dict[str, np.ndarray], rate: float) -> OptimizerState:
    """One bias-corrected ADAM update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter group {name.split('.')[0]!r} ({name})")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochRecord:
    epoch: int
    rate: float
    mean_loss: float
    val: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.epochs)


def _safe_metrics(q: np.ndarray, labels: np.ndarray, ids: list[str]) -> dict:
    try:
        r = evaluate(q, labels, ids)
    except UndefinedMetricError:
        return {"count": int(labels.size)}
    return {"map": r.map, "auc": r.auc, "balanced_accuracy": r.balanced_accuracy, "count": r.count}


def validation_metrics(params: FavoaParams, config: ModelConfig, data: FeaturizedSet) -> dict:
    if len(data) == 0:
        return {}
    q, _ = predict(params, config, data.context, data.voice)
    out = {"all": _safe_metrics(q, data.labels, data.ids)}
    for mode in sorted({e.ambiguity for e in data.entries}):
        mask = np.array([e.ambiguity == mode for e in data.entries])
        out[mode] = _safe_metrics(q[mask], data.labels[mask], [i for i, k in zip(data.ids, mask) if k])
    return out


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def minibatch_gradients(params: FavoaParams, config: ModelConfig, context, voice, labels) -> tuple[float, dict[str, np.ndarray]]:
    params.zero_grad()
    total, _ = batch_loss(params, config, context, voice, labels)
    T.backward(total)
    grads = {}
    for gname, grp in trainable_parameters(params):
        for k, t in grp.tensors().items():
            grads[f"{gname}.{k}"] = t.grad if t.grad is not None else np.zeros(t.shape)
    return total.item(), grads


def train(
    params: FavoaParams,
    config: ModelConfig,
    train_set: FeaturizedSet,
    val_set: FeaturizedSet | None,
    tc: TrainConfig,
    state: OptimizerState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> tuple[TrainReport, OptimizerState]:
    """Train ``params`` in place for epochs ``start_epoch .. tc.epochs - 1``."""
    if len(train_set) == 0:
        raise ContractError("training set is empty")
    state = state or OptimizerState(tc.beta1, tc.beta2, tc.eps)
    report = TrainReport(tc.seed, {"model": asdict(config), "train": asdict(tc)})
    named = params.named_tensors()
    for epoch in range(start_epoch, tc.epochs):
        rate = tc.schedule.rate(epoch)
        order = epoch_order(tc.seed, epoch, len(train_set))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batch_total, grads = minibatch_gradients(
                params, config, train_set.context[idx], train_set.voice[idx], train_set.labels[idx]
            )
            if not math.isfinite(batch_total):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            total += batch_total
            adam_step(state, named, grads, rate)
        params.zero_grad()
        val = validation_metrics(params, config, val_set) if val_set is not None else {}
        rec = EpochRecord(epoch, rate, total / len(train_set), val)
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec, state)
    return report, state


# ---------------------------------------------------------------------------
# checkpoints: parameters, ADAM moments and the next epoch in one file


def save_checkpoint(path: str | Path, params: FavoaParams, config: ModelConfig, state: OptimizerState, next_epoch: int) -> None:
    dims = dict(config.dims())
    dims["next_epoch"] = next_epoch
    dims["adam_step"] = state.step
    tensors = {f"param/{k}": t.data for k, t in params.named_tensors().items()}
    tensors.update({f"m/{k}": v for k, v in state.m.items()})
    tensors.update({f"v/{k}": v for k, v in state.v.items()})
    # hyperparameters ride along as 0-d tensors to stay bit-exact
    tensors["hyper/beta1"] = np.float64(state.beta1)
    tensors["hyper/beta2"] = np.float64(state.beta2)
    tensors["hyper/eps"] = np.float64(state.eps)
    write_tensor_file(path, CHECKPOINT_MAGIC, dims, tensors)


def load_checkpoint(path: str | Path) -> tuple[FavoaParams, ModelConfig, OptimizerState, int]:
    dims, tensors = read_tensor_file(path, CHECKPOINT_MAGIC)
    config = ModelConfig(**{k: int(dims[k]) for k in ModelConfig().dims()})
    params = params_from_arrays({k[6:]: v for k, v in tensors.items() if k.startswith("param/")}, config)
    state = OptimizerState(
        beta1=float(tensors["hyper/beta1"]),
        beta2=float(tensors["hyper/beta2"]),
        eps=float(tensors["hyper/eps"]),
        step=int(dims["adam_step"]),
        m={k[2:]: v for k, v in tensors.items() if k.startswith("m/")},
        v={k[2:]: v for k, v in tensors.items() if k.startswith("v/")},
    )
    return params, config, state, int(dims["next_epoch"])
