"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its inputs and a local gradient rule on
the output tensor.  ``backward`` linearises the recorded graph into a
:class:`Tape` (topological order) and replays the rules in reverse.

Shapes are never broadcast implicitly.  Binary elementwise operations require
identical shapes; adapting a bias to a batch goes through :func:`expand`.
The only exception is a plain Python/NumPy scalar operand, which is treated
as a constant.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from favoa.errors import ContractError, DimensionError, NumericError

GradRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

# Test hook: op names whose gradient rule is deliberately scaled.
_CORRUPTED: dict[str, float] = {}
_GRAD_ENABLED = True


class Tensor:
    """A float64 array that optionally tracks gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_rule", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._rule: GradRule | None = None
        self.name = name

    # construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    # basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._rule is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _record(name: str, data: np.ndarray, parents: Sequence[Tensor], rule: GradRule) -> Tensor:
    out = Tensor(data)
    out.op = name
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Operations reachable from an output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._rule is None:
                continue
            parent_grads = node._rule(g)
            scale = _CORRUPTED.get(node.op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if scale is not None:
                    pg = pg * scale
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every grad-requiring tensor that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad`` on
    parameters between independent passes.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that does not require grad")
    tape = Tape.from_output(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording gradient rules."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the recorded gradient rule of ``op`` (for exercising checkers)."""
    _CORRUPTED[op] = factor
    try:
        yield
    finally:
        _CORRUPTED.pop(op, None)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _record("add", a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _record("sub", a.data - c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Hadamard product, or scaling by a constant scalar."""
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _record("scale", a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _record("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


hadamard = mul


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log: non-positive input")
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: add, sub, hadamard, sigmoid, tanh, relu."""
    table = {
        "add": add,
        "sub": sub,
        "hadamard": mul,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "relu": relu,
    }
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` may be ``[k]``, ``[m, k]`` or carry leading batch axes ``[..., m, k]``
    with a shared ``[k, n]`` right operand.  Two 3-D operands with equal batch
    size multiply pairwise.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or b.ndim > 3:
        raise DimensionError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 3:
        if a.ndim != 3 or a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: batch mismatch for {a.shape} and {b.shape}")

        def rule(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

        return _record("matmul", ad @ bd, (a, b), rule)

    k = a.shape[-1]

    def rule(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got {x.shape}")
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _record("reshape", y, (x,), lambda g: (g.reshape(src),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly replicate ``x`` to ``shape`` by prepending axes or stretching size-1 axes."""
    shape = tuple(int(s) for s in shape)
    lead = len(shape) - x.ndim
    if lead < 0:
        raise DimensionError(f"expand: cannot shrink {x.shape} to {shape}")
    for have, want in zip(x.shape, shape[lead:]):
        if have != want and have != 1:
            raise DimensionError(f"expand: {x.shape} is not expandable to {shape}")
    src = x.shape
    stretched = tuple(i + lead for i, (h, w) in enumerate(zip(src, shape[lead:])) if h == 1 and w != 1)

    def rule(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if stretched:
            g = g.sum(axis=tuple(i - lead for i in stretched), keepdims=True)
        return (g.reshape(src),)

    return _record("expand", np.broadcast_to(x.data, shape).copy(), (x,), rule)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    src = x.shape
    if axis is None:
        return _record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),))
    ax = axis % x.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return _record("sum", x.data.sum(axis=ax), (x,), rule)


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    y = x.data[index]

    def rule(g):
        out = np.zeros(src)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", np.array(y, dtype=np.float64), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: no operands")
    ndim = tensors[0].ndim
    if ndim == 0:
        raise DimensionError("concat: scalars cannot be concatenated")
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack: no operands")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    ax = axis % (tensors[0].ndim + 1)

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _record("stack", np.stack([t.data for t in tensors], axis=ax), tensors, rule)


# ---------------------------------------------------------------------------
# normalisation


def _check_finite(op: str, x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    _check_finite("softmax", x.data)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ContractError(f"softmax: empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", x.data)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ContractError(f"log_softmax: empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def rule(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (x,), rule)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: float
    per_tensor: list[float]
    worst: tuple[int, tuple[int, ...]] | None
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(
    f: Callable[..., Tensor],
    xs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f(*xs)``.

    ``samples`` limits the check to that many randomly chosen coordinates per
    tensor; by default every coordinate is perturbed.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    xs = list(xs)
    for x in xs:
        x.data = np.array(x.data, dtype=np.float64, order="C")
        x.requires_grad = True
        x.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ContractError(f"finite_difference_check: f must be scalar, got {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros(x.shape) for x in xs]

    rng = rng if rng is not None else np.random.default_rng(0)
    per_tensor: list[float] = []
    worst: tuple[int, tuple[int, ...]] | None = None
    worst_err = 0.0
    checked = 0
    for ti, x in enumerate(xs):
        flat = x.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if samples is None or samples >= n else rng.choice(n, size=samples, replace=False)
        t_max = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = f(*xs).item()
                flat[i] = orig - step
                fm = f(*xs).item()
                flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = float(relative_error(np.float64(analytic[ti].reshape(-1)[i]), np.float64(numeric)))
            checked += 1
            if err > t_max:
                t_max = err
            if err > worst_err:
                worst_err = err
                worst = (ti, np.unravel_index(int(i), x.shape) if x.ndim else ())
        per_tensor.append(t_max)
    for x in xs:
        x.grad = None
    return GradCheckReport(max(per_tensor, default=0.0), per_tensor, worst, checked, tol)
