"""Dataset manifests, binary feature files, and the file-backed embedding provider.

Feature file layout (little-endian)::

    8 bytes   magic  b"FVFEAT01"
    uint32    dim
    uint32    count
    float64   count * dim values, row-major

The manifest is JSON; see ``README.md`` for the schema.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable

import numpy as np

from favoa.context import ContextPlan, SpeakerTrack, assemble_context
from favoa.errors import ContractError, FormatError
from favoa.layers import LinearParams
from favoa.tensor import Tensor, no_grad
from favoa import layers

FEATURE_MAGIC = b"FVFEAT01"
MANIFEST_FORMAT = "favoa-dataset"
MANIFEST_VERSION = 1
RAW_LABELS = ("not_speaking", "speaking_audible", "speaking_not_audible")


def write_features(path: str | Path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f8")
    if rows.ndim != 2:
        raise ContractError(f"feature rows must be 2-D, got {rows.shape}")
    count, dim = rows.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", dim, count))
        fh.write(rows.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    dim, count = struct.unpack("<II", raw[8:16])
    expected = 16 + 8 * dim * count
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count}x{dim}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(count, dim).astype(np.float64)


@dataclass(frozen=True)
class DatasetEntry:
    """One (frame, speaker) classification instance."""

    entry_id: str
    scene_id: str
    track_id: int
    frame: int
    raw_label: str
    split: str
    ambiguity: str


@dataclass
class Scene:
    scene_id: str
    split: str
    ambiguity: str
    first_frame: int
    last_frame: int
    tracks: list[SpeakerTrack]
    labels: dict[tuple[int, int], str]
    u_file: str
    a_file: str


@dataclass
class Dataset:
    root: Path
    manifest: dict
    scenes: dict[str, Scene]
    entries: list[DatasetEntry]
    dims: dict[str, int] = field(default_factory=dict)

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]


def entry_id(scene_id: str, track_id: int, frame: int) -> str:
    return f"{scene_id}:{track_id}:{frame}"


def load_dataset(path: str | Path) -> Dataset:
    """Load a manifest (or a directory containing ``manifest.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')!r}")

    scenes: dict[str, Scene] = {}
    entries: list[DatasetEntry] = []
    for rec in manifest["scenes"]:
        sid = rec["scene_id"]
        tracks = []
        labels: dict[tuple[int, int], str] = {}
        for tr in rec["tracks"]:
            tid = int(tr["track_id"])
            frames = [int(f) for f in tr["frames"]]
            refs = tuple((sid, tid, f) for f in frames)
            tracks.append(SpeakerTrack(tid, tuple(frames), refs))
            for f, lab in zip(frames, tr["labels"]):
                if lab not in RAW_LABELS:
                    raise FormatError(f"{path}: unknown label {lab!r} in scene {sid}")
                labels[(tid, f)] = lab
        scene = Scene(
            sid, rec["split"], rec["ambiguity"], int(rec["first_frame"]), int(rec["last_frame"]),
            tracks, labels, rec["u_file"], rec["a_file"],
        )
        scenes[sid] = scene
        for tr in sorted(tracks, key=lambda t: t.track_id):
            for f in tr.frames:
                entries.append(
                    DatasetEntry(entry_id(sid, tr.track_id, f), sid, tr.track_id, f,
                                 labels[(tr.track_id, f)], scene.split, scene.ambiguity)
                )
    return Dataset(path.parent, manifest, scenes, entries, dict(manifest.get("dims", {})))


class EmbeddingProvider:
    """Source of short-term (face+audio) and voice embeddings.

    Implementations must be deterministic per reference.
    """

    frozen: bool = True
    d_u: int
    d_a: int

    def ste(self, face_ref: Hashable, audio_ref: Hashable) -> Tensor:
        raise NotImplementedError

    def fv(self, audio_ref: Hashable) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}


class FeatureStoreProvider(EmbeddingProvider):
    """Serves precomputed features from a dataset's feature files.

    Each stream passes through a frozen linear adapter standing in for the
    last layer of a pretrained encoder; it is the identity unless replaced.
    """

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.frozen = True
        self._u: dict[str, np.ndarray] = {}
        self._a: dict[str, np.ndarray] = {}
        self._rows: dict[str, dict[tuple[int, int], int]] = {}
        self.d_u = int(dataset.dims["u"])
        self.d_a = int(dataset.dims["a"])
        self.ste_adapter = _identity(self.d_u)
        self.fv_adapter = _identity(self.d_a)

    def _scene_arrays(self, scene_id: str) -> tuple[np.ndarray, np.ndarray, dict[tuple[int, int], int]]:
        if scene_id not in self._u:
            scene = self.dataset.scenes[scene_id]
            self._u[scene_id] = read_features(self.dataset.root / scene.u_file)
            self._a[scene_id] = read_features(self.dataset.root / scene.a_file)
            rec = next(s for s in self.dataset.manifest["scenes"] if s["scene_id"] == scene_id)
            rows = {}
            for tr in rec["tracks"]:
                for f, r in zip(tr["frames"], tr["u_rows"]):
                    rows[(int(tr["track_id"]), int(f))] = int(r)
            self._rows[scene_id] = rows
        return self._u[scene_id], self._a[scene_id], self._rows[scene_id]

    def raw_u(self, face_ref) -> np.ndarray:
        sid, tid, frame = face_ref
        u, _, rows = self._scene_arrays(sid)
        return u[rows[(tid, frame)]]

    def raw_a(self, audio_ref) -> np.ndarray:
        sid, frame = audio_ref
        _, a, _ = self._scene_arrays(sid)
        return a[frame - self.dataset.scenes[sid].first_frame]

    def ste(self, face_ref, audio_ref=None) -> Tensor:
        return layers.linear_forward(self.ste_adapter, Tensor(self.raw_u(face_ref)))

    def fv(self, audio_ref) -> Tensor:
        return layers.linear_forward(self.fv_adapter, Tensor(self.raw_a(audio_ref)))

    def parameters(self) -> dict[str, Tensor]:
        return {
            "ste.W": self.ste_adapter.W, "ste.b": self.ste_adapter.b,
            "fv.W": self.fv_adapter.W, "fv.b": self.fv_adapter.b,
        }


def _identity(d: int) -> LinearParams:
    return LinearParams(Tensor(np.eye(d)), Tensor(np.zeros(d)), trainable=False)


def entry_context(dataset: Dataset, provider: EmbeddingProvider, entry: DatasetEntry, plan_args: dict):
    """Context tensor ``[L, S, d_u]`` and voice embedding ``[d_a]`` for one entry."""
    scene = dataset.scenes[entry.scene_id]
    plan = ContextPlan(entry.frame, plan_args["L"], plan_args["S"], plan_args["tau"])

    def feature(ref):
        sid, _, frame = ref
        return provider.ste(ref, (sid, frame)).data

    ctx = assemble_context(plan, scene.tracks, feature, entry.track_id, clip=(scene.first_frame, scene.last_frame))
    a = provider.fv((entry.scene_id, entry.frame))
    return ctx, a


@dataclass
class FeaturizedSet:
    """Model-ready arrays for a list of entries."""

    entries: list[DatasetEntry]
    context: np.ndarray  # [N, L*S, d_u], time-major tokens
    voice: np.ndarray  # [N, d_a]
    labels: np.ndarray  # [N] in {0, 1}

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, mask) -> "FeaturizedSet":
        idx = np.flatnonzero(np.asarray(mask))
        return FeaturizedSet([self.entries[i] for i in idx], self.context[idx], self.voice[idx], self.labels[idx])

    @property
    def ids(self) -> list[str]:
        return [e.entry_id for e in self.entries]


def featurize(dataset: Dataset, provider: EmbeddingProvider, entries: list[DatasetEntry], L: int, S: int, tau: int) -> FeaturizedSet:
    from favoa.metrics import map_label

    plan_args = {"L": L, "S": S, "tau": tau}
    ctxs, voices = [], []
    with no_grad():
        for e in entries:
            ctx, a = entry_context(dataset, provider, e, plan_args)
            ctxs.append(ctx.data.data.reshape(L * S, -1))
            voices.append(a.data)
    d_u = provider.d_u
    context = np.array(ctxs).reshape(len(entries), L * S, d_u) if entries else np.zeros((0, L * S, d_u))
    voice = np.array(voices).reshape(len(entries), provider.d_a) if entries else np.zeros((0, provider.d_a))
    labels = np.array([map_label(e.raw_label) for e in entries], dtype=np.int64)
    return FeaturizedSet(list(entries), context, voice, labels)
