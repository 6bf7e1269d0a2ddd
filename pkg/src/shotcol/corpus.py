"""Synthetic long-form video corpora and their on-disk format.

Each title is a run of scenes; each scene owns a latent vector that is rendered
into pixels through a fixed random projection followed by a sigmoid. Shots add
their own within-scene jitter plus a strong per-shot "nuisance" component
(camera/lighting stand-in) that lives in a separate latent subspace, so raw
pixel similarity is only a weak cue for scene membership. A small fraction of
shots reuse the latent of an earlier scene (flashbacks).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numkernel import atomic_write_bytes, atomic_write_text

CORPUS_VERSION = 1


class CorpusFormatError(ValueError):
    """Corpus directory is unreadable: wrong version, truncated or corrupted blob."""


@dataclass(frozen=True)
class GeneratorConfig:
    titles: int = 20
    scenes_per_title: Tuple[int, int] = (36, 44)
    shots_per_scene: Tuple[int, int] = (4, 12)
    shot_duration: Tuple[float, float] = (2.0, 8.0)
    latent_dim: int = 16
    nuisance_dim: int = 16
    sigma_within: float = 0.35
    sigma_nuisance: float = 1.6
    sigma_frame: float = 0.05
    flashback_prob: float = 0.05
    cuepoint_threshold: float = 6.0
    cuepoint_min_gap: float = 90.0
    width: int = 16
    height: int = 16
    channels: int = 3
    keyframes: int = 3
    source_fps: float = 1.0
    modality2_dim: int = 32
    seed: int = 1

    def __post_init__(self):
        for name in ("scenes_per_title", "shots_per_scene", "shot_duration"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} > max {hi}")
            if lo <= 0:
                raise ValueError(f"{name}: values must be positive")
            object.__setattr__(self, name, (type(lo)(lo), type(hi)(hi)))
        if self.titles < 1:
            raise ValueError("need at least one title")
        for name in ("latent_dim", "width", "height", "channels", "keyframes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sigma_within", "sigma_nuisance", "sigma_frame", "nuisance_dim",
                     "modality2_dim", "cuepoint_min_gap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.flashback_prob <= 1.0:
            raise ValueError("flashback_prob must be a probability")
        if self.source_fps <= 0:
            raise ValueError("source_fps must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ShotTensor:
    """Keyframe stack of one shot, laid out ``(w, h, c, k)``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"shot tensor must be (w, h, c, k), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Shot:
    tensor: ShotTensor
    start_time: float
    end_time: float
    modality2: Optional[np.ndarray] = None


@dataclass
class Title:
    title_id: str
    pixels: np.ndarray              # (n_shots, w, h, c, k) float32
    start_times: np.ndarray         # float64 seconds
    end_times: np.ndarray
    scene_ids: np.ndarray           # int64, contiguous runs
    cuepoint_flags: np.ndarray      # bool, one per shot boundary
    modality2: Optional[np.ndarray] = None

    @property
    def n_shots(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def boundary_times(self) -> np.ndarray:
        """Time of boundary ``b`` (between shots ``b`` and ``b+1``)."""
        return self.end_times[:-1]

    @property
    def scene_boundaries(self) -> np.ndarray:
        return self.scene_ids[1:] != self.scene_ids[:-1]

    def shot(self, i: int) -> Shot:
        m2 = None if self.modality2 is None else self.modality2[i]
        return Shot(ShotTensor(self.pixels[i]), float(self.start_times[i]),
                    float(self.end_times[i]), m2)

    def validate(self) -> None:
        n = self.n_shots
        if n < 1:
            raise ValueError(f"{self.title_id}: empty title")
        if not (len(self.start_times) == len(self.end_times) == len(self.scene_ids) == n):
            raise ValueError(f"{self.title_id}: per-shot arrays disagree in length")
        if len(self.cuepoint_flags) != n - 1:
            raise ValueError(f"{self.title_id}: need {n - 1} cue-point flags")
        if np.any(self.end_times <= self.start_times):
            raise ValueError(f"{self.title_id}: non-positive shot duration")
        if np.any(self.start_times[1:] != self.end_times[:-1]):
            raise ValueError(f"{self.title_id}: shot times are not contiguous")
        seen = set()
        for i, s in enumerate(self.scene_ids):
            if i and s != self.scene_ids[i - 1] and s in seen:
                raise ValueError(f"{self.title_id}: scene {s} is not one contiguous run")
            seen.add(int(s))
        if np.any(self.cuepoint_flags & ~self.scene_boundaries):
            raise ValueError(f"{self.title_id}: cue-point flagged off a scene boundary")
        if self.modality2 is not None and self.modality2.shape[0] != n:
            raise ValueError(f"{self.title_id}: modality2 rows != shots")


@dataclass
class Corpus:
    titles: List[Title]
    config: dict = field(default_factory=dict)

    @property
    def shot_shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.titles[0].pixels.shape[1:])

    @property
    def n_shots(self) -> int:
        return sum(t.n_shots for t in self.titles)

    def title(self, title_id: str) -> Title:
        for t in self.titles:
            if t.title_id == title_id:
                return t
        raise KeyError(title_id)

    def subset(self, title_ids: Sequence[str]) -> "Corpus":
        wanted = set(title_ids)
        return Corpus([t for t in self.titles if t.title_id in wanted], self.config)


# --- shot tensor ops ---------------------------------------------------------

def reshape_shot(t) -> np.ndarray:
    """``(w, h, c, k)`` -> ``(w, h, c*k)``; output channel ``f*c + ch`` is frame f, channel ch."""
    data = t.data if isinstance(t, ShotTensor) else np.asarray(t)
    w, h, c, k = data.shape
    return np.ascontiguousarray(data.transpose(0, 1, 3, 2)).reshape(w, h, k * c)


def unreshape_shot(x, channels: int) -> ShotTensor:
    """Inverse of :func:`reshape_shot`."""
    x = np.asarray(x)
    w, h, ck = x.shape
    if ck % channels:
        raise ValueError(f"{ck} stacked channels is not a multiple of {channels}")
    k = ck // channels
    return ShotTensor(np.ascontiguousarray(x.reshape(w, h, k, channels).transpose(0, 1, 3, 2)))


def shot_matrix(title: Title) -> np.ndarray:
    """All shots of ``title`` channel-stacked and flattened, one row per shot."""
    n, w, h, c, k = title.pixels.shape
    return np.ascontiguousarray(title.pixels.transpose(0, 1, 2, 4, 3)).reshape(n, w * h * k * c)


def modality_matrix(title: Title, modality: int = 1) -> np.ndarray:
    if modality == 1:
        return shot_matrix(title)
    if modality == 2:
        if title.modality2 is None:
            raise ValueError(f"{title.title_id} has no second modality")
        return title.modality2
    raise ValueError(f"unknown modality {modality}")


def keyframe_indices(n: int, k: int) -> List[int]:
    if n < 1:
        raise ValueError("cannot sample keyframes from an empty shot")
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        return list(range(n)) + [n - 1] * (k - n)
    return [int((i + 0.5) * n / k) for i in range(k)]


def sample_keyframes(frames: Sequence, k: int) -> list:
    """Pick ``k`` uniformly spaced frames; short shots repeat their last frame."""
    return [frames[i] for i in keyframe_indices(len(frames), k)]


# --- generation --------------------------------------------------------------

def _render_bank(cfg: GeneratorConfig, rng: np.random.Generator):
    n_pix = cfg.width * cfg.height * cfg.channels
    scene_proj = rng.standard_normal((cfg.latent_dim, n_pix)) * (2.0 / np.sqrt(cfg.latent_dim))
    nuis_proj = rng.standard_normal((max(cfg.nuisance_dim, 1), n_pix)) * (2.0 / np.sqrt(max(cfg.nuisance_dim, 1)))
    bias = rng.standard_normal(n_pix) * 0.5
    m2 = None
    if cfg.modality2_dim:
        m2 = (rng.standard_normal((cfg.latent_dim, cfg.modality2_dim)) / np.sqrt(cfg.latent_dim),
              rng.standard_normal((max(cfg.nuisance_dim, 1), cfg.modality2_dim)) / np.sqrt(max(cfg.nuisance_dim, 1)))
    return scene_proj, nuis_proj, bias, m2


def _generate_title(cfg: GeneratorConfig, index: int, bank, rng: np.random.Generator) -> Title:
    scene_proj, nuis_proj, bias, m2_proj = bank
    n_scenes = int(rng.integers(cfg.scenes_per_title[0], cfg.scenes_per_title[1] + 1))
    scene_latents = rng.standard_normal((n_scenes, cfg.latent_dim))
    sizes = rng.integers(cfg.shots_per_scene[0], cfg.shots_per_scene[1] + 1, size=n_scenes)
    scene_ids = np.repeat(np.arange(n_scenes), sizes)
    n = len(scene_ids)

    source = scene_ids.copy()
    flash = rng.random(n) < cfg.flashback_prob
    for i in np.flatnonzero(flash):
        if scene_ids[i] > 0:
            source[i] = rng.integers(0, scene_ids[i])
    shot_latents = scene_latents[source] + cfg.sigma_within * rng.standard_normal((n, cfg.latent_dim))
    nuisance = cfg.sigma_nuisance * rng.standard_normal((n, max(cfg.nuisance_dim, 1)))
    if cfg.nuisance_dim == 0:
        nuisance[:] = 0.0

    logits = shot_latents @ scene_proj + nuisance @ nuis_proj + bias
    base = 1.0 / (1.0 + np.exp(-logits))

    durations = rng.uniform(cfg.shot_duration[0], cfg.shot_duration[1], size=n)
    ends = np.cumsum(durations)
    starts = np.concatenate([[0.0], ends[:-1]])

    w, h, c, k = cfg.width, cfg.height, cfg.channels, cfg.keyframes
    pixels = np.empty((n, w, h, c, k), dtype=np.float32)
    for i in range(n):
        n_src = max(1, int(round(durations[i] * cfg.source_fps)))
        frames = base[i] + cfg.sigma_frame * rng.standard_normal((n_src, base.shape[1]))
        keys = np.stack(sample_keyframes(frames, k), axis=-1)          # (w*h*c, k)
        pixels[i] = np.clip(keys, 0.0, 1.0).reshape(w, h, c, k)

    modality2 = None
    if m2_proj is not None:
        modality2 = np.tanh(shot_latents @ m2_proj[0] + 0.5 * nuisance @ m2_proj[1])
        modality2 = (modality2 + 0.05 * rng.standard_normal(modality2.shape)).astype(np.float32)

    boundaries = scene_ids[1:] != scene_ids[:-1]
    flags = np.zeros(n - 1, dtype=bool)
    last = -np.inf
    for b in np.flatnonzero(boundaries):
        jump = np.linalg.norm(scene_latents[scene_ids[b]] - scene_latents[scene_ids[b + 1]])
        if jump > cfg.cuepoint_threshold and ends[b] - last >= cfg.cuepoint_min_gap:
            flags[b] = True
            last = ends[b]

    return Title(f"title{index:04d}", pixels, starts, ends, scene_ids.astype(np.int64), flags, modality2)


def generate_corpus(cfg: GeneratorConfig = GeneratorConfig()) -> Corpus:
    """Deterministically generate a corpus; every title draws from its own spawned seed."""
    root = np.random.SeedSequence(cfg.seed)
    bank_seq, *title_seqs = root.spawn(cfg.titles + 1)
    bank = _render_bank(cfg, np.random.default_rng(bank_seq))
    titles = [_generate_title(cfg, i, bank, np.random.default_rng(s)) for i, s in enumerate(title_seqs)]
    return Corpus(titles, cfg.to_dict())


# --- persistence -------------------------------------------------------------

def save_corpus(corpus: Corpus, path) -> Path:
    """Write ``manifest.json`` + ``shots.bin`` (+ ``modality2.bin``) into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    shots, m2_chunks, entries = [], [], []
    offset = m2_offset = 0
    has_m2 = all(t.modality2 is not None for t in corpus.titles)
    for t in corpus.titles:
        t.validate()
        raw = np.ascontiguousarray(t.pixels, dtype="<f4").tobytes()
        entry = {"title_id": t.title_id, "n_shots": t.n_shots,
                 "scene_ids": t.scene_ids.tolist(),
                 "start_times": t.start_times.tolist(), "end_times": t.end_times.tolist(),
                 "cuepoint_flags": [bool(f) for f in t.cuepoint_flags],
                 "offset": offset, "nbytes": len(raw)}
        shots.append(raw)
        offset += len(raw)
        if has_m2:
            raw2 = np.ascontiguousarray(t.modality2, dtype="<f4").tobytes()
            entry.update(m2_offset=m2_offset, m2_nbytes=len(raw2), m2_dim=int(t.modality2.shape[1]))
            m2_chunks.append(raw2)
            m2_offset += len(raw2)
        entries.append(entry)
    blob = b"".join(shots)
    manifest = {"version": CORPUS_VERSION, "generator": corpus.config,
                "shot_shape": list(corpus.shot_shape), "dtype": "<f4",
                "shots_sha256": hashlib.sha256(blob).hexdigest(), "titles": entries}
    atomic_write_bytes(root / "shots.bin", blob)
    if has_m2:
        blob2 = b"".join(m2_chunks)
        manifest["modality2_sha256"] = hashlib.sha256(blob2).hexdigest()
        atomic_write_bytes(root / "modality2.bin", blob2)
    atomic_write_text(root / "manifest.json", json.dumps(manifest, sort_keys=True))
    return root


def _read_blob(path: Path, expected_sha: str, last_end: int) -> bytes:
    blob = path.read_bytes()
    if len(blob) < last_end:
        raise CorpusFormatError(
            f"{path.name} truncated: data must extend to byte offset {last_end}, "
            f"file ends at offset {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != expected_sha:
        raise CorpusFormatError(f"{path.name}: checksum mismatch")
    return blob


def load_corpus(path) -> Corpus:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {manifest.get('version')!r}")
    shape = tuple(manifest["shot_shape"])
    entries = manifest["titles"]
    end = max((e["offset"] + e["nbytes"] for e in entries), default=0)
    blob = _read_blob(root / "shots.bin", manifest["shots_sha256"], end)
    blob2 = None
    if "modality2_sha256" in manifest:
        end2 = max((e["m2_offset"] + e["m2_nbytes"] for e in entries), default=0)
        blob2 = _read_blob(root / "modality2.bin", manifest["modality2_sha256"], end2)
    titles = []
    for e in entries:
        n = e["n_shots"]
        pixels = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        pixels = pixels.reshape((n,) + shape).astype(np.float32)
        m2 = None
        if blob2 is not None:
            m2 = np.frombuffer(blob2, dtype="<f4", count=e["m2_nbytes"] // 4, offset=e["m2_offset"])
            m2 = m2.reshape(n, e["m2_dim"]).astype(np.float32)
        t = Title(e["title_id"], pixels, np.array(e["start_times"], dtype=np.float64),
                  np.array(e["end_times"], dtype=np.float64),
                  np.array(e["scene_ids"], dtype=np.int64),
                  np.array(e["cuepoint_flags"], dtype=bool).reshape(-1), m2)
        t.validate()
        titles.append(t)
    return Corpus(titles, manifest.get("generator", {}))


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    if len(a.titles) != len(b.titles) or a.config != b.config:
        return False
    for x, y in zip(a.titles, b.titles):
        if x.title_id != y.title_id:
            return False
        for name in ("pixels", "start_times", "end_times", "scene_ids", "cuepoint_flags"):
            u, v = getattr(x, name), getattr(y, name)
            if u.dtype != v.dtype or u.shape != v.shape or u.tobytes() != v.tobytes():
                return False
        if (x.modality2 is None) != (y.modality2 is None):
            return False
        if x.modality2 is not None and x.modality2.tobytes() != y.modality2.tobytes():
            return False
    return True


def split_corpus(title_ids: Sequence[str], ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffle whole titles into train/val/test by largest-remainder allocation."""
    ids = list(title_ids.titles if isinstance(title_ids, Corpus) else title_ids)
    ids = [t.title_id if isinstance(t, Title) else t for t in ids]
    ratios = np.asarray(ratios, dtype=np.float64)
    if abs(ratios.sum() - 1.0) > 1e-9 or np.any(ratios < 0):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    nonzero = int(np.count_nonzero(ratios))
    if len(ids) < nonzero:
        raise ValueError(f"{len(ids)} titles cannot fill {nonzero} non-empty splits")
    exact = ratios * len(ids)
    sizes = np.floor(exact).astype(int)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: len(ids) - sizes.sum()]:
        sizes[i] += 1
    for i in range(len(ratios)):
        if ratios[i] > 0 and sizes[i] == 0:
            sizes[i] = 1
            sizes[int(np.argmax(sizes))] -= 1
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[j] for j in perm]
    out, start = [], 0
    for s in sizes:
        out.append(shuffled[start:start + s])
        start += s
    return tuple(out)
