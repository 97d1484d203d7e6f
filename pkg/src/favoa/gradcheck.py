"""Finite-difference validation of every primitive, layer, and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from favoa import tensor as T
from favoa.gbu import GbuParams, gbu_forward
from favoa.layers import (
    AttentionParams,
    LinearParams,
    LstmParams,
    attention_forward,
    linear_forward,
    lstm_forward,
    softmax_cross_entropy,
)
from favoa.model import FavoaParams, ModelConfig, forward_batch
from favoa.tensor import Tensor, finite_difference_check

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    checked: int
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.reshape(y * Tensor(w), (-1,)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    w23, w34 = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    w3, w22 = rng.standard_normal(3), rng.standard_normal((2, 2))
    cases = {
        "add": (lambda a, b: _weighted_sum(a + b, w23), [t(2, 3), t(2, 3)]),
        "sub": (lambda a, b: _weighted_sum(a - b, w23), [t(2, 3), t(2, 3)]),
        "hadamard": (lambda a, b: _weighted_sum(a * b, w23), [t(2, 3), t(2, 3)]),
        "scale": (lambda a: _weighted_sum(a * 2.5, w23), [t(2, 3)]),
        "neg": (lambda a: _weighted_sum(-a, w23), [t(2, 3)]),
        "sigmoid": (lambda a: _weighted_sum(T.sigmoid(a), w23), [t(2, 3)]),
        "tanh": (lambda a: _weighted_sum(T.tanh(a), w23), [t(2, 3)]),
        "relu": (lambda a: _weighted_sum(T.relu(a), w23), [Tensor(_away_from_zero(rng, (2, 3)))]),
        "exp": (lambda a: _weighted_sum(T.exp(a), w23), [t(2, 3)]),
        "log": (lambda a: _weighted_sum(T.log(a), w23), [Tensor(rng.uniform(0.5, 2.0, (2, 3)))]),
        "matmul": (lambda a, b: _weighted_sum(a @ b, w34), [t(3, 5), t(5, 4)]),
        "matmul_batched": (
            lambda a, b: _weighted_sum(a @ b, np.stack([w34, w34 * 0.5])),
            [t(2, 3, 5), t(2, 5, 4)],
        ),
        "transpose": (lambda a: _weighted_sum(T.transpose(a), w34), [t(4, 3)]),
        "reshape": (lambda a: _weighted_sum(T.reshape(a, (3, 4)), w34), [t(2, 6)]),
        "expand": (lambda a: _weighted_sum(T.expand(a, (3, 4)), w34), [t(4)]),
        "sum": (lambda a: _weighted_sum(T.tsum(a, axis=1), w3), [t(3, 4)]),
        "getitem": (lambda a: _weighted_sum(a[1:, ::2], w22), [t(3, 4)]),
        "concat": (lambda a, b: _weighted_sum(T.concat([a, b], axis=1), w34), [t(3, 1), t(3, 3)]),
        "stack": (lambda a, b: _weighted_sum(T.stack([a, b], axis=0), w23), [t(3), t(3)]),
        "softmax": (lambda a: _weighted_sum(T.softmax(a, axis=-1), w34), [t(3, 4)]),
        "log_softmax": (lambda a: _weighted_sum(T.log_softmax(a, axis=-1), w34), [t(3, 4)]),
    }
    return cases


def check_ops(seed: int = 0, step: float = STEP, tol: float = TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (f, xs) in _op_cases(rng).items():
        rep = finite_difference_check(f, xs, step=step, tol=tol)
        out.append(CheckResult(f"op:{name}", seed, rep.max_rel_error, rep.checked, tol))
    return out


def _all_tensors(*groups) -> list[Tensor]:
    return [t for g in groups for t in g.tensors().values()]


def check_layers(seed: int = 0, config: ModelConfig | None = None, samples: int | None = 24,
                 step: float = STEP, tol: float = TOL) -> list[CheckResult]:
    """Gradient checks of each layer at the dimensions of ``config``.

    ``samples`` bounds the number of randomly chosen coordinates per tensor.
    """
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    pick = np.random.default_rng([seed, 1])
    results = []

    def run(name, f, xs):
        rep = finite_difference_check(f, xs, step=step, tol=tol, samples=samples, rng=pick)
        results.append(CheckResult(name, seed, rep.max_rel_error, rep.checked, tol))

    n, d = cfg.n_tokens, cfg.fused_dim
    batch = 2

    lin = LinearParams.init(rng, cfg.d_a, d)
    x = Tensor(rng.standard_normal((batch, cfg.d_a)))
    w = rng.standard_normal((batch, d))
    run("linear", lambda x, W, b: _weighted_sum(linear_forward(LinearParams(W, b), x), w), [x, lin.W, lin.b])

    lstm = LstmParams.init(rng, cfg.d_u, cfg.d_c)
    seq = Tensor(rng.standard_normal((batch, n, cfg.d_u)))
    w = rng.standard_normal((batch, n, cfg.d_c))
    names = list(lstm.tensors())
    run("lstm", lambda s, *ps: _weighted_sum(lstm_forward(LstmParams(**dict(zip(names, ps))), s), w),
        [seq, *lstm.tensors().values()])

    att = AttentionParams.init(rng, cfg.d_u, cfg.d_k)
    toks = Tensor(rng.standard_normal((batch, n, cfg.d_u)))
    w = rng.standard_normal((batch, n, cfg.d_u))
    names = list(att.tensors())
    run("attention", lambda x, *ps: _weighted_sum(attention_forward(AttentionParams(**dict(zip(names, ps))), x), w),
        [toks, *att.tensors().values()])

    gbu = GbuParams.init(rng, d)
    for k in ("b_p", "b_1", "b_2"):  # exercise nonzero biases
        getattr(gbu, k).data = rng.uniform(-0.5, 0.5, d)
    e1 = Tensor(rng.standard_normal((batch, d)))
    e2 = Tensor(rng.standard_normal((batch, d)))
    w = rng.standard_normal((batch, d))
    names = list(gbu.tensors())
    run("gbu", lambda a, b, *ps: _weighted_sum(gbu_forward(GbuParams(**dict(zip(names, ps))), a, b).z, w),
        [e1, e2, *gbu.tensors().values()])

    logits = Tensor(rng.standard_normal((4, 2)))
    labels = rng.integers(0, 2, size=4)
    run("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, labels), [logits])
    return results


def composite_loss(config: ModelConfig, params: FavoaParams, context, voice, labels) -> Callable[..., Tensor]:
    """Loss as a function of (context, voice, *parameter tensors)."""
    names = list(params.named_tensors())

    def f(ctx, a, *tensors):
        by_name = dict(zip(names, tensors))
        grouped = {}
        for full, t in by_name.items():
            g, k = full.split(".", 1)
            grouped.setdefault(g, {})[k] = t
        p = FavoaParams(
            attention=AttentionParams(**grouped["attention"]),
            lstm=LstmParams(**grouped["lstm"]),
            fv_proj=LinearParams(**grouped["fv_proj"]),
            gbu=GbuParams(**grouped["gbu"]),
            head=LinearParams(**grouped["head"]),
        )
        tr = forward_batch(p, config, ctx, a)
        return softmax_cross_entropy(tr.logits, labels)

    return f


def check_model(seed: int = 0, config: ModelConfig | None = None, samples: int | None = 24, batch: int = 3,
                step: float = STEP, tol: float = TOL) -> CheckResult:
    cfg = config or ModelConfig()
    rng = np.random.default_rng([seed, 7])
    params = FavoaParams.init(cfg, seed)
    for k in ("b_p", "b_1", "b_2"):
        getattr(params.gbu, k).data = rng.uniform(-0.5, 0.5, cfg.fused_dim)
    ctx = Tensor(rng.standard_normal((batch, cfg.n_tokens, cfg.d_u)))
    voice = Tensor(rng.standard_normal((batch, cfg.d_a)))
    labels = rng.integers(0, 2, size=batch)
    f = composite_loss(cfg, params, ctx, voice, labels)
    rep = finite_difference_check(f, [ctx, voice, *params.named_tensors().values()], step=step, tol=tol,
                                  samples=samples, rng=np.random.default_rng([seed, 2]))
    return CheckResult("favoa", seed, rep.max_rel_error, rep.checked, tol)


def run_all(seeds=range(20), config: ModelConfig | None = None, samples: int | None = 24) -> list[CheckResult]:
    results = []
    for seed in seeds:
        results.extend(check_ops(seed))
        results.extend(check_layers(seed, config, samples))
        results.append(check_model(seed, config, samples))
    return results
