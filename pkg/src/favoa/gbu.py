"""Gated bimodal unit.

Two equal-width modality vectors ``e1`` and ``e2`` are squashed separately and
mixed elementwise by a sigmoid gate computed from both::

    h1 = tanh(W_1 e1 + b_1)
    h2 = tanh(W_2 e2 + b_2)
    p  = sigmoid(W_p [e1 ; e2] + b_p)
    z  = p * h1 + (1 - p) * h2

``p[i]`` is the share of modality 1 in ``z[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from favoa import tensor as T
from favoa.errors import DimensionError
from favoa.layers import ParamGroup, _add_bias, uniform_init
from favoa.tensor import Tensor


@dataclass
class GbuParams(ParamGroup):
    W_p: Tensor
    b_p: Tensor
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor
    trainable: bool = True

    def __post_init__(self):
        d = self.b_p.shape[0] if self.b_p.ndim == 1 else -1
        expected = {
            "W_p": (d, 2 * d),
            "b_p": (d,),
            "W_1": (d, d),
            "b_1": (d,),
            "W_2": (d, d),
            "b_2": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"gbu: {name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.b_p.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "GbuParams":
        zeros = lambda: Tensor(np.zeros(d), requires_grad=True)  # noqa: E731
        return cls(
            W_p=uniform_init(rng, (d, 2 * d), 2 * d),
            b_p=zeros(),
            W_1=uniform_init(rng, (d, d), d),
            b_1=zeros(),
            W_2=uniform_init(rng, (d, d), d),
            b_2=zeros(),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("W_p", "b_p", "W_1", "b_1", "W_2", "b_2")}


@dataclass
class GbuOutput:
    z: Tensor
    p: Tensor
    h1: Tensor
    h2: Tensor


def gbu_forward(params: GbuParams, e1: Tensor, e2: Tensor) -> GbuOutput:
    """Fuse ``e1`` and ``e2`` (``[d]`` or ``[B, d]``)."""
    if e1.shape != e2.shape:
        raise DimensionError(f"gbu: modality shapes differ, {e1.shape} vs {e2.shape}")
    if e1.ndim == 0 or e1.shape[-1] != params.d:
        raise DimensionError(f"gbu: inputs {e1.shape} do not match d={params.d}")
    h1 = T.tanh(_add_bias(T.matmul(e1, T.transpose(params.W_1)), params.b_1))
    h2 = T.tanh(_add_bias(T.matmul(e2, T.transpose(params.W_2)), params.b_2))
    joint = T.concat([e1, e2], axis=-1)
    p = T.sigmoid(_add_bias(T.matmul(joint, T.transpose(params.W_p)), params.b_p))
    z = p * h1 + (1.0 - p) * h2
    return GbuOutput(z=z, p=p, h1=h1, h2=h2)


def swap_params(params: GbuParams) -> GbuParams:
    """Parameters under which exchanging the two inputs leaves ``z`` unchanged.

    The per-modality transforms trade places, the gate's column blocks are
    exchanged and the whole gate is negated, so the swapped gate equals
    ``1 - p`` of the original.
    """
    d = params.d
    wp = params.W_p.data
    swapped = np.concatenate([wp[:, d:], wp[:, :d]], axis=1)
    flag = params.trainable
    return GbuParams(
        W_p=Tensor(-swapped, requires_grad=flag),
        b_p=Tensor(-params.b_p.data, requires_grad=flag),
        W_1=Tensor(params.W_2.data.copy(), requires_grad=flag),
        b_1=Tensor(params.b_2.data.copy(), requires_grad=flag),
        W_2=Tensor(params.W_1.data.copy(), requires_grad=flag),
        b_2=Tensor(params.b_1.data.copy(), requires_grad=flag),
        trainable=flag,
    )
