"""Parameterised layers: linear, single-layer LSTM, single-head self-attention,
and two-class softmax cross-entropy.

Layers accept either an unbatched input or one with a leading batch axis; the
last axis is always the feature axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from favoa import tensor as T
from favoa.errors import ContractError, DimensionError
from favoa.tensor import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _add_bias(y: Tensor, b: Tensor) -> Tensor:
    return y + (b if y.shape == b.shape else T.expand(b, y.shape))


class ParamGroup:
    """Mixin giving dataclass parameter groups a uniform tensor listing."""

    trainable: bool

    def tensors(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for t in self.tensors().values():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for t in self.tensors().values():
            t.requires_grad = flag


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearParams(ParamGroup):
    W: Tensor
    b: Tensor
    trainable: bool = True

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"linear: W {self.W.shape} and b {self.b.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "LinearParams":
        return cls(uniform_init(rng, (out_dim, in_dim), in_dim), uniform_init(rng, (out_dim,), in_dim))

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    """``W x + b`` along the last axis of ``x``."""
    if x.ndim == 0 or x.shape[-1] != p.in_dim:
        raise DimensionError(f"linear: input {x.shape} does not end in {p.in_dim}")
    return _add_bias(T.matmul(x, T.transpose(p.W)), p.b)


# ---------------------------------------------------------------------------
# LSTM

_GATES = ("i", "f", "o", "g")


@dataclass
class LstmParams(ParamGroup):
    """Input, forget, output and candidate gates; each W is hidden x (input + hidden)."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor
    trainable: bool = True

    def __post_init__(self):
        shape = self.W_i.shape
        if len(shape) != 2 or shape[1] <= shape[0]:
            raise DimensionError(f"lstm: gate matrix shape {shape} is not hidden x (input + hidden)")
        for g in _GATES:
            if getattr(self, f"W_{g}").shape != shape:
                raise DimensionError(f"lstm: gate {g} weight {getattr(self, f'W_{g}').shape} != {shape}")
            if getattr(self, f"b_{g}").shape != (shape[0],):
                raise DimensionError(f"lstm: gate {g} bias {getattr(self, f'b_{g}').shape} != ({shape[0]},)")

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W_i.shape[1] - self.hidden

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int) -> "LstmParams":
        fan_in = in_dim + hidden
        ws = {f"W_{g}": uniform_init(rng, (hidden, fan_in), fan_in) for g in _GATES}
        bs = {f"b_{g}": uniform_init(rng, (hidden,), fan_in) for g in _GATES}
        return cls(**ws, **bs)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"W_{g}": getattr(self, f"W_{g}") for g in _GATES}
        out.update({f"b_{g}": getattr(self, f"b_{g}") for g in _GATES})
        return out


def lstm_forward(p: LstmParams, seq: Tensor) -> Tensor:
    """Run the recurrence from zero state; returns the hidden state at every step.

    ``seq`` is ``[T, in]`` or ``[B, T, in]``; the result is ``[T, hidden]`` or
    ``[B, T, hidden]`` respectively.
    """
    unbatched = seq.ndim == 2
    if unbatched:
        seq = T.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3 or seq.shape[-1] != p.in_dim:
        raise DimensionError(f"lstm: sequence {seq.shape} does not end in {p.in_dim}")
    batch, steps, _ = seq.shape
    if steps < 1:
        raise ContractError("lstm: empty sequence")

    h = Tensor(np.zeros((batch, p.hidden)))
    c = Tensor(np.zeros((batch, p.hidden)))
    weights = {g: T.transpose(getattr(p, f"W_{g}")) for g in _GATES}
    biases = {g: T.expand(getattr(p, f"b_{g}"), (batch, p.hidden)) for g in _GATES}
    outputs = []
    for t in range(steps):
        xh = T.concat([seq[:, t, :], h], axis=-1)
        i = T.sigmoid(T.matmul(xh, weights["i"]) + biases["i"])
        f = T.sigmoid(T.matmul(xh, weights["f"]) + biases["f"])
        o = T.sigmoid(T.matmul(xh, weights["o"]) + biases["o"])
        g = T.tanh(T.matmul(xh, weights["g"]) + biases["g"])
        c = f * c + i * g
        h = o * T.tanh(c)
        outputs.append(h)
    out = T.stack(outputs, axis=1)
    if unbatched:
        out = T.reshape(out, (steps, p.hidden))
    return out


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams(ParamGroup):
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    trainable: bool = True

    def __post_init__(self):
        dk, din = self.W_q.shape
        if dk <= 0:
            raise DimensionError("attention: key dimension must be positive")
        for name in ("W_k", "W_v"):
            if getattr(self, name).shape != (dk, din):
                raise DimensionError(f"attention: {name} {getattr(self, name).shape} != {(dk, din)}")
        if self.W_o.shape != (din, dk):
            raise DimensionError(f"attention: W_o {self.W_o.shape} != {(din, dk)}")

    @property
    def d_k(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_q.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_k: int = 64) -> "AttentionParams":
        return cls(
            uniform_init(rng, (d_k, d_in), d_in),
            uniform_init(rng, (d_k, d_in), d_in),
            uniform_init(rng, (d_k, d_in), d_in),
            uniform_init(rng, (d_in, d_k), d_k),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}


def attention_weights(p: AttentionParams, tokens: Tensor) -> Tensor:
    q = T.matmul(tokens, T.transpose(p.W_q))
    k = T.matmul(tokens, T.transpose(p.W_k))
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(p.d_k))
    return T.softmax(scores, axis=-1)


def attention_forward(p: AttentionParams, tokens: Tensor) -> Tensor:
    """Single-head scaled dot-product self-attention followed by an output projection.

    ``tokens`` is ``[N, d_in]`` or ``[B, N, d_in]``.
    """
    if tokens.ndim not in (2, 3) or tokens.shape[-1] != p.d_in:
        raise DimensionError(f"attention: tokens {tokens.shape} do not end in {p.d_in}")
    if tokens.shape[-2] < 1:
        raise ContractError("attention: no tokens")
    weights = attention_weights(p, tokens)
    v = T.matmul(tokens, T.transpose(p.W_v))
    return T.matmul(T.matmul(weights, v), T.transpose(p.W_o))


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Summed two-class cross-entropy, in log-sum-exp form.

    ``logits`` is ``[2]`` with an int label, or ``[B, 2]`` with ``B`` labels.
    Index 1 is the positive class.
    """
    if logits.ndim == 0 or logits.shape[-1] != 2:
        raise DimensionError(f"cross-entropy expects two logits per entry, got {logits.shape}")
    labels = np.asarray(label)
    if not np.isin(labels, (0, 1)).all():
        raise ContractError(f"labels must be 0 or 1, got {labels.tolist()}")
    labels = labels.astype(np.int64)
    logp = T.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if labels.ndim != 0:
            raise DimensionError("cross-entropy: one label expected for unbatched logits")
        return -logp[int(labels)]
    if labels.shape != logits.shape[:1]:
        raise DimensionError(f"cross-entropy: {labels.shape[0] if labels.ndim else 1} labels for {logits.shape[0]} rows")
    picked = logp[np.arange(logits.shape[0]), labels]
    return -T.tsum(picked)
