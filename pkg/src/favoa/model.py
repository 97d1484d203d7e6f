"""The fused detector: context branch (attention -> LSTM) and voice branch
(ReLU -> linear) joined by a gated bimodal unit, then a two-class head.

The voice branch is GBU input 1 and the context branch input 2, so the gate
``p`` measures the voice branch's share of the fused vector.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from favoa import tensor as T
from favoa.errors import ConfigError, FormatError
from favoa.gbu import GbuParams, gbu_forward
from favoa.layers import (
    AttentionParams,
    LinearParams,
    LstmParams,
    ParamGroup,
    attention_forward,
    linear_forward,
    lstm_forward,
    softmax_cross_entropy,
)
from favoa.tensor import Tensor


@dataclass
class ModelConfig:
    d_u: int = 32
    d_a: int = 16
    d_c: int = 16
    L: int = 3
    S: int = 2
    tau: int = 1
    d_k: int = 64
    ablate_fv: bool = False

    def validate(self) -> None:
        for f in ("d_u", "d_a", "d_c", "L", "S", "tau", "d_k"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{f} must be a positive integer, got {v!r}")
        if self.L % 2 == 0:
            raise ConfigError(f"L must be odd so the classified frame is central, got {self.L}")

    @property
    def n_tokens(self) -> int:
        return self.L * self.S

    @property
    def fused_dim(self) -> int:
        return self.L * self.S * self.d_c

    @property
    def target_token(self) -> int:
        return (self.L // 2) * self.S

    def dims(self) -> dict[str, int]:
        return {f.name: int(getattr(self, f.name)) for f in fields(self) if f.name != "ablate_fv"}

    @classmethod
    def paper(cls) -> "ModelConfig":
        """Full-size dimensions of the original system (context plan left at desk values)."""
        return cls(d_u=1024, d_a=128, d_c=128)


GROUP_NAMES = ("attention", "lstm", "fv_proj", "gbu", "head")


@dataclass
class FavoaParams:
    attention: AttentionParams
    lstm: LstmParams
    fv_proj: LinearParams
    gbu: GbuParams
    head: LinearParams

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "FavoaParams":
        config.validate()
        rng = np.random.default_rng(seed)
        return cls(
            attention=AttentionParams.init(rng, config.d_u, config.d_k),
            lstm=LstmParams.init(rng, config.d_u, config.d_c),
            fv_proj=LinearParams.init(rng, config.d_a, config.fused_dim),
            gbu=GbuParams.init(rng, config.fused_dim),
            head=LinearParams.init(rng, config.fused_dim, 2),
        )

    def groups(self) -> list[tuple[str, ParamGroup]]:
        return [(name, getattr(self, name)) for name in GROUP_NAMES]

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"{g}.{k}": t for g, grp in self.groups() for k, t in grp.tensors().items()}

    def zero_grad(self) -> None:
        for _, grp in self.groups():
            grp.zero_grad()

    def check(self, config: ModelConfig) -> None:
        """Raise ConfigError unless every group matches ``config``."""
        expected = {
            "attention.W_q": (config.d_k, config.d_u),
            "lstm.W_i": (config.d_c, config.d_u + config.d_c),
            "fv_proj.W": (config.fused_dim, config.d_a),
            "gbu.W_p": (config.fused_dim, 2 * config.fused_dim),
            "head.W": (2, config.fused_dim),
        }
        tensors = self.named_tensors()
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name} has shape {tensors[name].shape}, config requires {shape}")

    def copy(self) -> "FavoaParams":
        out = {}
        for name, grp in self.groups():
            kwargs = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in grp.tensors().items()}
            out[name] = type(grp)(**kwargs, trainable=grp.trainable)
        return FavoaParams(**out)


def trainable_parameters(params: FavoaParams) -> list[tuple[str, ParamGroup]]:
    """Parameter groups updated by training.

    Embedding providers are frozen and never appear here.
    """
    return [(name, grp) for name, grp in params.groups() if grp.trainable]


@dataclass
class ForwardTrace:
    q: np.ndarray
    p: Tensor
    z: Tensor
    s: Tensor
    a_prime: Tensor
    logits: Tensor


def forward_batch(params: FavoaParams, config: ModelConfig, context: Tensor, voice: Tensor) -> ForwardTrace:
    """Run the graph on ``context [B, L*S, d_u]`` and ``voice [B, d_a]``."""
    if context.ndim != 3 or context.shape[1:] != (config.n_tokens, config.d_u):
        raise ConfigError(f"context {context.shape} does not match (B, {config.n_tokens}, {config.d_u})")
    batch = context.shape[0]
    if voice.shape != (batch, config.d_a):
        raise ConfigError(f"voice {voice.shape} does not match ({batch}, {config.d_a})")
    refined = attention_forward(params.attention, context)
    seq = lstm_forward(params.lstm, refined)
    s = T.reshape(seq, (batch, config.fused_dim))
    if config.ablate_fv:
        voice = Tensor(np.zeros(voice.shape))
    a_prime = linear_forward(params.fv_proj, T.relu(voice))
    fused = gbu_forward(params.gbu, a_prime, s)
    logits = linear_forward(params.head, fused.z)
    probs = T.softmax(logits, axis=-1)
    return ForwardTrace(q=probs.data[:, 1].copy(), p=fused.p, z=fused.z, s=s, a_prime=a_prime, logits=logits)


def batch_loss(params: FavoaParams, config: ModelConfig, context: np.ndarray, voice: np.ndarray, labels) -> tuple[Tensor, ForwardTrace]:
    """Summed cross-entropy over a mini-batch."""
    trace = forward_batch(params, config, Tensor(context), Tensor(voice))
    return softmax_cross_entropy(trace.logits, np.asarray(labels)), trace


def forward(params: FavoaParams, config: ModelConfig, provider, entry, dataset) -> ForwardTrace:
    """Score one dataset entry, resolving its embeddings through ``provider``.

    The returned tensors drop the batch axis; ``q`` is a float.
    """
    from favoa.data import entry_context

    ctx, a = entry_context(dataset, provider, entry, {"L": config.L, "S": config.S, "tau": config.tau})
    context = T.reshape(ctx.data, (1, config.n_tokens, config.d_u))
    voice = T.reshape(a, (1, config.d_a))
    tr = forward_batch(params, config, context, voice)
    return ForwardTrace(
        q=float(tr.q[0]),
        p=tr.p[0],
        z=tr.z[0],
        s=tr.s[0],
        a_prime=tr.a_prime[0],
        logits=tr.logits[0],
    )


def predict(params: FavoaParams, config: ModelConfig, context: np.ndarray, voice: np.ndarray,
            batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Scores ``q`` and gate vectors ``p`` for arrays of entries, without gradients."""
    qs, ps = [], []
    with T.no_grad():
        for start in range(0, len(context), batch_size):
            sl = slice(start, start + batch_size)
            tr = forward_batch(params, config, Tensor(context[sl]), Tensor(voice[sl]))
            qs.append(tr.q)
            ps.append(tr.p.data)
    if not qs:
        return np.zeros(0), np.zeros((0, config.fused_dim))
    return np.concatenate(qs), np.concatenate(ps)


# ---------------------------------------------------------------------------
# binary parameter files
#
#   8 bytes  magic
#   uint32   version
#   uint32   number of dimension entries, then per entry:
#            uint16 name length, name (utf-8), int64 value
#   uint32   number of tensors, then per tensor:
#            uint16 name length, name, uint8 ndim, int64 * ndim shape, float64 data
# all little-endian.

PARAM_MAGIC = b"FAVOAPRM"
CHECKPOINT_MAGIC = b"FAVOACKP"
FORMAT_VERSION = 1


def write_tensor_file(path: str | Path, magic: bytes, dims: dict[str, int], tensors: dict[str, np.ndarray]) -> None:
    chunks = [magic, struct.pack("<II", FORMAT_VERSION, len(dims))]
    for name, value in dims.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<q", int(value)))
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(f"{self.path}: truncated file")
        out = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return out

    def name(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated file")
        s = self.raw[self.pos:self.pos + n]
        self.pos += n
        try:
            return s.decode()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: corrupt name field") from exc


def read_tensor_file(path: str | Path, magic: bytes) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic header {raw[:8]!r}, expected {magic!r}")
    r = _Reader(raw, path)
    r.pos = 8
    version, n_dims = r.take("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    dims = {}
    for _ in range(n_dims):
        name = r.name()
        (dims[name],) = r.take("<q")
    (n_tensors,) = r.take("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.name()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}q")
        count = int(np.prod(shape)) if ndim else 1
        if r.pos + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated data for {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=r.pos).reshape(shape).astype(np.float64)
        r.pos += 8 * count
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return dims, tensors


def save_params(params: FavoaParams, path: str | Path, config: ModelConfig) -> None:
    write_tensor_file(path, PARAM_MAGIC, config.dims(), {k: t.data for k, t in params.named_tensors().items()})


def params_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig) -> FavoaParams:
    template = FavoaParams.init(config, seed=0)
    missing = set(template.named_tensors()) - set(arrays)
    if missing:
        raise FormatError(f"parameter file lacks tensors {sorted(missing)}")
    for name, t in template.named_tensors().items():
        if arrays[name].shape != t.shape:
            raise FormatError(f"tensor {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    return template


def read_config(path: str | Path, magic: bytes = PARAM_MAGIC) -> ModelConfig:
    dims, _ = read_tensor_file(path, magic)
    return ModelConfig(**{k: int(dims[k]) for k in ModelConfig().dims() if k in dims})


def load_params(path: str | Path, config: ModelConfig | None = None) -> FavoaParams:
    """Read a parameter file; if ``config`` is given every stored dimension must match it."""
    dims, arrays = read_tensor_file(path, PARAM_MAGIC)
    stored = ModelConfig()
    for key in stored.dims():
        if key not in dims:
            raise FormatError(f"{path}: dimension table lacks {key}")
        setattr(stored, key, int(dims[key]))
    if config is not None:
        for key, want in config.dims().items():
            if dims[key] != want:
                raise FormatError(f"{path}: dimension {key}={dims[key]} does not match configured {key}={want}")
    return params_from_arrays(arrays, stored)


def config_snapshot(config: ModelConfig) -> dict:
    return asdict(config)
