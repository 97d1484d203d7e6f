"""Deterministic synthetic scenes with controllable face-voice correspondence.

Each person carries a unit-norm attribute code ``c``: by default one binary
attribute per axis (think gender, age group, ...) plus a small individual jitter.  Per (person, frame) the
short-term feature is ``u = [F c + noise ; mouth]`` where the mouth channel
tracks speaking in ``clear`` scenes and is label-independent noise in
``ambiguous`` scenes.  Per frame the voice feature is ``a = sum_k V c_k + noise``
over the audible speakers ``k``, whether or not they are visible.  Only
matching ``a`` against the target's face part identifies the speaker in an
ambiguous scene.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from favoa.data import MANIFEST_FORMAT, MANIFEST_VERSION, write_features
from favoa.errors import ConfigError, ContractError

CLEAR = "clear"
AMBIGUOUS = "ambiguous"
SPEAKING = "speaking_audible"
MUTED = "speaking_not_audible"
SILENT = "not_speaking"


@dataclass
class GeneratorConfig:
    seed: int = 0
    scenes: int = 100
    persons_per_scene: int = 2
    frames_per_scene: int = 12
    noise: float = 0.1
    ambiguous_fraction: float = 0.5
    val_fraction: float = 0.4
    prevalence: float = 0.4
    not_audible_rate: float = 0.05
    overlap_rate: float = 0.0
    gap_rate: float = 0.2
    segment_min: int = 2
    segment_max: int = 5
    code_dim: int = 3
    categorical_codes: bool = True
    code_jitter: float = 0.1
    d_u: int = 32
    d_a: int = 16
    mouth_amplitude: float = 1.0

    def validate(self) -> None:
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        for name in ("ambiguous_fraction", "val_fraction", "prevalence", "not_audible_rate", "overlap_rate", "gap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.scenes < 1 or self.persons_per_scene < 1 or self.frames_per_scene < 1:
            raise ConfigError("scenes, persons_per_scene and frames_per_scene must be positive")
        if not 1 <= self.segment_min <= self.segment_max:
            raise ConfigError("need 1 <= segment_min <= segment_max")
        if self.d_u < 2 or self.d_a < 1 or self.code_dim < 1:
            raise ConfigError("feature dimensions too small")
        if self.prevalence * self.persons_per_scene / max(1e-12, 1.0 - self.not_audible_rate) > 1.0 + 1e-12:
            raise ConfigError("prevalence too high for the number of persons per scene")

    @property
    def face_dims(self) -> int:
        return self.d_u // 2

    @property
    def mouth_dims(self) -> int:
        return self.d_u - self.face_dims


@dataclass
class World:
    """Fixed maps from attribute codes to face and voice features."""

    face_map: np.ndarray  # [face_dims, code_dim]
    voice_map: np.ndarray  # [d_a, code_dim]
    mouth_pattern: np.ndarray  # [mouth_dims], unit norm

    @classmethod
    def from_config(cls, cfg: GeneratorConfig) -> "World":
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        face = rng.standard_normal((cfg.face_dims, cfg.code_dim)) * np.sqrt(cfg.code_dim / cfg.face_dims)
        voice = rng.standard_normal((cfg.d_a, cfg.code_dim)) * np.sqrt(cfg.code_dim / cfg.d_a)
        m = rng.standard_normal(cfg.mouth_dims)
        return cls(face, voice, m / np.linalg.norm(m))


@dataclass
class PersonLatent:
    track_id: int
    code: np.ndarray


@dataclass
class SyntheticScene:
    scene_id: str
    persons: list[PersonLatent]
    frames: range
    present: dict[int, list[int]]  # track_id -> frames where visible
    speaking: dict[tuple[int, int], str]  # (track_id, frame) -> raw label, visible cells only
    ambiguity_mode: str
    u: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    a: dict[int, np.ndarray] = field(default_factory=dict)
    split: str = "train"

    def positives_at(self, frame: int) -> int:
        return sum(1 for (_, f), lab in self.speaking.items() if f == frame and lab == SPEAKING)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _person_codes(rng: np.random.Generator, cfg: GeneratorConfig, n: int) -> list[np.ndarray]:
    if not cfg.categorical_codes:
        return [_unit(rng.standard_normal(cfg.code_dim)) for _ in range(n)]
    # sign patterns (one binary attribute per axis), distinct within the scene
    n_types = 2 ** cfg.code_dim
    if n > n_types:
        raise ConfigError(f"{n} persons cannot have distinct types with code_dim={cfg.code_dim}")
    types = rng.choice(n_types, size=n, replace=False)
    codes = []
    for t in types:
        signs = np.array([1.0 if (int(t) >> k) & 1 else -1.0 for k in range(cfg.code_dim)])
        codes.append(_unit(signs + cfg.code_jitter * rng.standard_normal(cfg.code_dim)))
    return codes


def _presence(rng: np.random.Generator, n_frames: int, gap_rate: float) -> list[int]:
    frames = list(range(n_frames))
    if n_frames < 3 or rng.random() >= gap_rate:
        return frames
    kind = rng.integers(3)
    width = int(rng.integers(1, max(2, n_frames // 3)))
    if kind == 0:
        return frames[width:]
    if kind == 1:
        return frames[: n_frames - width]
    start = int(rng.integers(1, n_frames - width))
    return frames[:start] + frames[start + width:]


def _speech_segments(rng: np.random.Generator, cfg: GeneratorConfig, persons: list[PersonLatent]):
    """Per frame: list of (track_id, audible) speaking at that frame."""
    p_any = min(1.0, cfg.prevalence * len(persons) / max(1e-12, 1.0 - cfg.not_audible_rate))
    out: list[list[tuple[int, bool]]] = []
    while len(out) < cfg.frames_per_scene:
        length = int(rng.integers(cfg.segment_min, cfg.segment_max + 1))
        speakers: list[tuple[int, bool]] = []
        if rng.random() < p_any:
            count = 2 if len(persons) > 1 and rng.random() < cfg.overlap_rate else 1
            chosen = rng.choice(len(persons), size=count, replace=False)
            audible = rng.random() >= cfg.not_audible_rate
            speakers = [(persons[int(k)].track_id, audible) for k in sorted(chosen)]
        out.extend([speakers] * length)
    return out[: cfg.frames_per_scene]


def _render(scene: SyntheticScene, world: World, cfg: GeneratorConfig, rng: np.random.Generator,
            active: list[list[tuple[int, bool]]], mouth_override=None) -> None:
    codes = {p.track_id: p.code for p in scene.persons}
    sigma = cfg.noise
    amp = cfg.mouth_amplitude
    for f in scene.frames:
        voice = np.zeros(cfg.d_a)
        for tid, audible in active[f]:
            if audible:
                voice += world.voice_map @ codes[tid]
        scene.a[f] = voice + sigma * rng.standard_normal(cfg.d_a)
    for p in scene.persons:
        for f in scene.present[p.track_id]:
            face = world.face_map @ p.code + sigma * rng.standard_normal(cfg.face_dims)
            label = scene.speaking[(p.track_id, f)]
            if mouth_override is not None:
                mouth = mouth_override(p.track_id, f, label)
            elif scene.ambiguity_mode == AMBIGUOUS:
                mouth = amp * rng.standard_normal(cfg.mouth_dims) / np.sqrt(cfg.mouth_dims)
            else:
                if label == SPEAKING:
                    level = rng.uniform(0.8, 1.2)
                elif label == MUTED:
                    level = rng.uniform(0.2, 0.4)
                else:
                    level = 0.0
                mouth = amp * level * world.mouth_pattern + sigma * rng.standard_normal(cfg.mouth_dims)
            scene.u[(p.track_id, f)] = np.concatenate([face, mouth])


def _labels(present: dict[int, list[int]], active: list[list[tuple[int, bool]]]) -> dict[tuple[int, int], str]:
    labels = {}
    for tid, frames in present.items():
        for f in frames:
            status = dict(active[f]).get(tid)
            labels[(tid, f)] = SILENT if status is None else (SPEAKING if status else MUTED)
    return labels


def ambiguous_scenes(cfg: GeneratorConfig) -> frozenset[int]:
    """Indices of the ``round(ambiguous_fraction * scenes)`` ambiguous scenes."""
    count = int(round(cfg.ambiguous_fraction * cfg.scenes))
    order = np.random.default_rng([cfg.seed, 0xA3B]).permutation(cfg.scenes)
    return frozenset(int(i) for i in order[:count])


def generate_scene(cfg: GeneratorConfig, world: World, index: int, ambiguous: bool | None = None) -> SyntheticScene:
    rng = np.random.default_rng([cfg.seed, index])
    split = "val" if rng.random() < cfg.val_fraction else "train"
    if ambiguous is None:
        ambiguous = index in ambiguous_scenes(cfg)
    mode = AMBIGUOUS if ambiguous else CLEAR
    ids = sorted(int(i) for i in rng.choice(10 * cfg.persons_per_scene, size=cfg.persons_per_scene, replace=False))
    persons = [PersonLatent(tid, c) for tid, c in zip(ids, _person_codes(rng, cfg, len(ids)))]
    present = {p.track_id: _presence(rng, cfg.frames_per_scene, cfg.gap_rate) for p in persons}
    active = _speech_segments(rng, cfg, persons)
    scene = SyntheticScene(f"scene{index:05d}", persons, range(cfg.frames_per_scene), present,
                           _labels(present, active), mode, split=split)
    _render(scene, world, cfg, rng, active)
    return scene


def generate_scenes(cfg: GeneratorConfig) -> list[SyntheticScene]:
    cfg.validate()
    world = World.from_config(cfg)
    amb = ambiguous_scenes(cfg)
    return [generate_scene(cfg, world, i, i in amb) for i in range(cfg.scenes)]


def write_dataset(scenes: list[SyntheticScene], out_dir: str | Path, cfg: GeneratorConfig) -> Path:
    """Write feature files and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        u_rows, tracks = [], []
        for p in scene.persons:
            frames = scene.present[p.track_id]
            rows = list(range(len(u_rows), len(u_rows) + len(frames)))
            u_rows.extend(scene.u[(p.track_id, f)] for f in frames)
            tracks.append({
                "track_id": p.track_id,
                "frames": frames,
                "labels": [scene.speaking[(p.track_id, f)] for f in frames],
                "u_rows": rows,
            })
        u_file = f"features/{scene.scene_id}_u.bin"
        a_file = f"features/{scene.scene_id}_a.bin"
        write_features(out / u_file, np.array(u_rows))
        write_features(out / a_file, np.array([scene.a[f] for f in scene.frames]))
        records.append({
            "scene_id": scene.scene_id,
            "split": scene.split,
            "ambiguity": scene.ambiguity_mode,
            "first_frame": scene.frames.start,
            "last_frame": scene.frames.stop - 1,
            "u_file": u_file,
            "a_file": a_file,
            "tracks": tracks,
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "generator": asdict(cfg),
        "dims": {"u": cfg.d_u, "a": cfg.d_a},
        "scenes": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def generate(cfg: GeneratorConfig, out_dir: str | Path) -> Path:
    """Generate ``cfg.scenes`` scenes into ``out_dir``; returns the manifest path."""
    return write_dataset(generate_scenes(cfg), out_dir, cfg)


# ---------------------------------------------------------------------------
# hand-built failure cases for context-only detection


SCENARIOS = ("wrong_gender", "low_resolution", "multiple_speakers")


def scenario_fixture(kind: str, cfg: GeneratorConfig | None = None, noise_floor: float = 0.01,
                     index: int = 0) -> SyntheticScene:
    """A scene where visual context alone cannot identify the speaker.

    * ``wrong_gender``: two persons with opposite codes; only the first speaks
      but both mouths move;
    * ``low_resolution``: mouth channels reduced to a noise floor of
      ``noise_floor`` standard deviation, one speaker;
    * ``multiple_speakers``: three persons, the first two speaking at once.
    """
    if kind not in SCENARIOS:
        raise ContractError(f"unknown scenario {kind!r}; expected one of {SCENARIOS}")
    cfg = cfg or GeneratorConfig()
    world = World.from_config(cfg)
    rng = np.random.default_rng([cfg.seed, 0xF1C, SCENARIOS.index(kind), index])
    n_frames = cfg.frames_per_scene
    codes = _person_codes(rng, cfg, 3)
    if kind == "wrong_gender":
        persons = [PersonLatent(1, codes[0]), PersonLatent(2, -codes[0])]
        speakers = [1]
    elif kind == "low_resolution":
        persons = [PersonLatent(1, codes[0]), PersonLatent(2, codes[1])]
        speakers = [1]
    else:
        persons = [PersonLatent(k, codes[k - 1]) for k in (1, 2, 3)]
        speakers = [1, 2]
    present = {p.track_id: list(range(n_frames)) for p in persons}
    active = [[(tid, True) for tid in speakers] for _ in range(n_frames)]
    scene = SyntheticScene(f"{kind}{index:03d}", persons, range(n_frames), present, _labels(present, active),
                           AMBIGUOUS, split="val")
    amp = cfg.mouth_amplitude

    def mouth(tid, f, label):
        if kind == "low_resolution":
            return noise_floor * rng.standard_normal(cfg.mouth_dims)
        moving = kind == "wrong_gender" or label == SPEAKING
        level = rng.uniform(0.8, 1.2) if moving else 0.0
        return amp * level * world.mouth_pattern + cfg.noise * rng.standard_normal(cfg.mouth_dims)

    _render(scene, world, cfg, rng, active, mouth_override=mouth)
    return scene
