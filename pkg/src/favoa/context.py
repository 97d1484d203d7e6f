"""Assembly of the L x S context tensor from per-(frame, speaker) embeddings,
and audio tiling for the voice branch.

Rules:

* frames run from ``t - (L//2)*tau`` to ``t + (L//2)*tau`` in steps of ``tau``
  and are clamped to the clip;
* the classified track takes speaker slot 0, the remaining tracks visible at
  ``t`` follow in ascending ``track_id``; with fewer than ``S`` visible tracks
  the list is cycled;
* a track missing at a selected frame contributes its first feature before its
  first appearance, its last feature after its last appearance, and the
  nearest preceding feature inside a gap.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from favoa.errors import ContractError
from favoa.tensor import Tensor


@dataclass(frozen=True)
class SpeakerTrack:
    track_id: int
    frames: tuple[int, ...]
    refs: tuple[Hashable, ...]

    def __post_init__(self):
        if not self.frames:
            raise ContractError(f"track {self.track_id} is empty")
        if len(self.frames) != len(self.refs):
            raise ContractError(f"track {self.track_id}: {len(self.frames)} frames but {len(self.refs)} refs")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ContractError(f"track {self.track_id}: frame indices must be strictly increasing")

    @classmethod
    def from_mapping(cls, track_id: int, frames: Mapping[int, Hashable]) -> "SpeakerTrack":
        keys = sorted(frames)
        return cls(track_id, tuple(keys), tuple(frames[k] for k in keys))

    def __contains__(self, frame: int) -> bool:
        i = bisect.bisect_left(self.frames, frame)
        return i < len(self.frames) and self.frames[i] == frame

    @property
    def first(self) -> int:
        return self.frames[0]

    @property
    def last(self) -> int:
        return self.frames[-1]


@dataclass(frozen=True)
class ContextPlan:
    center_t: int
    L: int
    S: int
    tau: int

    def __post_init__(self):
        if self.L < 1 or self.L % 2 == 0:
            raise ContractError(f"L must be a positive odd integer, got {self.L}")
        if self.S < 1:
            raise ContractError(f"S must be positive, got {self.S}")
        if self.tau < 1:
            raise ContractError(f"tau must be positive, got {self.tau}")


@dataclass
class ContextTensor:
    data: Tensor
    plan: ContextPlan
    speaker_order: list[int]
    frames: list[int] = field(default_factory=list)


def select_frames(plan: ContextPlan, clip_first: int, clip_last: int) -> list[int]:
    if not clip_first <= plan.center_t <= clip_last:
        raise ContractError(f"center frame {plan.center_t} outside clip [{clip_first}, {clip_last}]")
    half = plan.L // 2
    raw = [plan.center_t + (k - half) * plan.tau for k in range(plan.L)]
    return [min(max(f, clip_first), clip_last) for f in raw]


def select_speakers(tracks_in_frame: Iterable[SpeakerTrack], S: int, target_id: int | None = None) -> list[int]:
    ids = sorted({t.track_id for t in tracks_in_frame})
    if not ids:
        raise ContractError("no speakers visible in the frame of interest")
    if S < 1:
        raise ContractError(f"S must be positive, got {S}")
    if target_id is None:
        target_id = ids[0]
    if target_id not in ids:
        raise ContractError(f"target track {target_id} is not visible in the frame of interest")
    ordered = [target_id] + [i for i in ids if i != target_id]
    return [ordered[k % len(ordered)] for k in range(S)]


def track_feature_at(track: SpeakerTrack, frame: int) -> Hashable:
    i = bisect.bisect_right(track.frames, frame)
    return track.refs[0] if i == 0 else track.refs[i - 1]


def assemble_context(
    plan: ContextPlan,
    tracks: Sequence[SpeakerTrack],
    features: Callable[[Hashable], Any] | Mapping[Hashable, Any],
    target_id: int,
    clip: tuple[int, int] | None = None,
) -> ContextTensor:
    """Fill ``C[l, s]`` with the feature of speaker ``s`` at selected frame ``l``.

    ``clip`` defaults to the span covered by all tracks.
    """
    lookup = features if callable(features) else features.__getitem__
    by_id = {t.track_id: t for t in tracks}
    target = by_id.get(target_id)
    if target is None or plan.center_t not in target:
        raise ContractError(f"target track {target_id} is not present at frame {plan.center_t}")
    if clip is None:
        clip = (min(t.first for t in tracks), max(t.last for t in tracks))
    frames = select_frames(plan, *clip)
    visible = [t for t in tracks if plan.center_t in t]
    order = select_speakers(visible, plan.S, target_id)

    rows = []
    for f in frames:
        rows.append([np.asarray(lookup(track_feature_at(by_id[s], f)), dtype=np.float64) for s in order])
    data = np.array(rows, dtype=np.float64)
    return ContextTensor(Tensor(data), plan, order, frames)


def tile_audio(samples: np.ndarray, sample_rate: int, target_seconds: float = 10.0) -> np.ndarray:
    """Repeat ``samples`` end to end and cut to exactly ``target_seconds``."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ContractError("cannot tile empty audio")
    n = int(round(target_seconds * sample_rate))
    return np.resize(samples.reshape(-1), n)
