"""Scene-boundary and ad cue-point detection on top of frozen shot embeddings."""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .corpus import Title, modality_matrix
from .pretrain import embed

ALL_BOUNDARIES = "all-boundaries"
WINDOWED_NEGATIVES = "windowed-negatives"


@dataclass
class BoundarySample:
    feature: np.ndarray
    label: int
    boundary_time: float
    title_id: str
    boundary_index: int


@dataclass
class BoundarySamples:
    """Column-wise storage for many :class:`BoundarySample` rows."""

    features: np.ndarray
    labels: np.ndarray
    times: np.ndarray
    title_ids: List[str]
    boundary_index: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> BoundarySample:
        return BoundarySample(self.features[i], int(self.labels[i]), float(self.times[i]),
                              self.title_ids[i], int(self.boundary_index[i]))

    @classmethod
    def concat(cls, parts: Sequence["BoundarySamples"]) -> "BoundarySamples":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("no samples to concatenate")
        return cls(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.times for p in parts]),
                   [t for p in parts for t in p.title_ids],
                   np.concatenate([p.boundary_index for p in parts]))


@dataclass(frozen=True)
class ClassifierSpec:
    context: int = 2                       # N shots on each side of a boundary
    hidden: Tuple[int, ...] = (256, 64)
    dropout: Tuple[float, ...] = (0.5, 0.5)
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 1024
    epochs: int = 40
    class_weighting: bool = True

    def __post_init__(self):
        if self.context < 1:
            raise ValueError("context N must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))

    @classmethod
    def for_embedding_dim(cls, dim: int, **overrides) -> "ClassifierSpec":
        """Widths 2N*D -> 4D -> D -> 2."""
        return dataclasses.replace(cls(hidden=(4 * dim, dim)), **overrides)

    def mlp(self, feature_width: int) -> nk.MlpSpec:
        return nk.MlpSpec((feature_width, *self.hidden, 2), self.dropout)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown classifier keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class CuePointConstraints:
    min_gap_seconds: float
    max_count: int
    score_threshold: float = 0.5

    def __post_init__(self):
        if self.min_gap_seconds <= 0:
            raise ValueError("min_gap_seconds must be positive")
        if self.max_count < 1:
            raise ValueError("max_count must be positive")


def extract_title_embeddings(spec: nk.MlpSpec, params: nk.ParamSet, title: Title,
                             normalize: bool = True, modality: int = 1) -> np.ndarray:
    """One embedding per shot from a frozen encoder."""
    return embed(spec, params, modality_matrix(title, modality), normalize)


def fuse_modalities(f1, f2) -> np.ndarray:
    """Concatenate per-shot features, first modality first."""
    if f2 is None:
        raise ValueError("fusion requested but the second modality is missing")
    f1, f2 = np.asarray(f1), np.asarray(f2)
    if f1.size == 0 or f2.size == 0 or f1.shape[-1] == 0 or f2.shape[-1] == 0:
        raise ValueError("fusion requested but one modality is empty")
    if f1.shape[:-1] != f2.shape[:-1]:
        raise nk.ShapeError(f"cannot fuse features of shapes {f1.shape} and {f2.shape}")
    return np.concatenate([f1, f2], axis=-1)


def window_indices(boundary: int, n_shots: int, context: int) -> np.ndarray:
    """Shots ``b-N+1 .. b+N`` around boundary ``b``, clamped by repeating the end shots."""
    idx = np.arange(boundary - context + 1, boundary + context + 1)
    return np.clip(idx, 0, n_shots - 1)


def windowed_boundaries(positives: Iterable[int], n_boundaries: int, radius: int) -> np.ndarray:
    """Positives plus unit-stride neighbours up to ``radius`` on each side, deduplicated."""
    chosen = set()
    for p in positives:
        for d in range(-radius, radius + 1):
            b = p + d
            if 0 <= b < n_boundaries:
                chosen.add(b)
    return np.array(sorted(chosen), dtype=np.int64)


def build_boundary_samples(title: Title, embeddings, context: int = 2,
                           mode: str = ALL_BOUNDARIES, radius: int = 2) -> BoundarySamples:
    """Concatenate the 2N shot embeddings around each selected shot boundary.

    ``all-boundaries`` labels every interior boundary by scene change;
    ``windowed-negatives`` keeps cue-points plus their unit-stride neighbours
    within ``radius`` and labels by cue-point flag.
    """
    if context < 1:
        raise ValueError("context N must be >= 1")
    emb = np.asarray(embeddings, dtype=np.float32)
    n = title.n_shots
    if n < 2:
        raise ValueError(f"{title.title_id}: need at least two shots to have a boundary")
    if len(emb) != n:
        raise nk.ShapeError(f"{len(emb)} embeddings for {n} shots")
    if mode == ALL_BOUNDARIES:
        bounds = np.arange(n - 1)
        labels = title.scene_boundaries[bounds]
    elif mode == WINDOWED_NEGATIVES:
        flags = np.asarray(title.cuepoint_flags, dtype=bool)
        bounds = windowed_boundaries(np.flatnonzero(flags), n - 1, radius)
        labels = flags[bounds]
    else:
        raise ValueError(f"unknown sample mode {mode!r}")
    windows = np.clip(bounds[:, None] + np.arange(-context + 1, context + 1)[None, :], 0, n - 1)
    features = emb[windows].reshape(len(bounds), -1)
    return BoundarySamples(features, labels.astype(np.int64), title.end_times[bounds].copy(),
                           [title.title_id] * len(bounds), bounds.astype(np.int64))


@dataclass
class Classifier:
    mlp: nk.MlpSpec
    params: nk.ParamSet
    spec: ClassifierSpec
    loss_curve: List[float] = field(default_factory=list)
    accuracy_curve: List[float] = field(default_factory=list)


def class_weights(labels) -> np.ndarray:
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    return len(labels) / (2.0 * counts)


def train_classifier(samples: BoundarySamples, spec: ClassifierSpec = ClassifierSpec(),
                     seed: int = 0) -> Classifier:
    """Minimise (optionally class-weighted) softmax cross-entropy with fixed-lr SGD."""
    labels = np.asarray(samples.labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training set needs both boundary and non-boundary samples")
    x = nk.as_tensor(samples.features)
    mlp = spec.mlp(x.shape[1])
    init_seq, order_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    params = nk.init_params(mlp, int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(order_seq)
    drop_seeds = np.random.default_rng(drop_seq)
    state = nk.SgdState(spec.learning_rate, spec.momentum)
    weights = class_weights(labels)[labels] if spec.class_weighting else np.ones(len(labels))
    clf = Classifier(mlp, params, spec)
    for epoch in range(spec.epochs):
        order = rng.permutation(len(labels))
        total, denom, correct = 0.0, 0.0, 0
        for s in range(0, len(order), spec.batch_size):
            b = order[s:s + spec.batch_size]
            logits, cache = nk.forward(mlp, clf.params, x[b], train=True,
                                       seed=int(drop_seeds.integers(2**63)))
            loss, grad = nk.softmax_cross_entropy(logits, labels[b], weights[b])
            if not np.isfinite(loss):
                raise nk.NonFiniteError(f"classifier loss became non-finite at epoch {epoch}")
            grads, _ = nk.backward(cache, grad)
            clf.params, state = nk.sgd_step(clf.params, grads, state, epoch)
            total += loss * weights[b].sum()
            denom += weights[b].sum()
            correct += int(np.count_nonzero(np.argmax(logits, axis=1) == labels[b]))
        clf.loss_curve.append(total / denom)
        clf.accuracy_curve.append(correct / len(labels))
    return clf


def predict_proba(clf: Classifier, samples) -> np.ndarray:
    x = samples.features if isinstance(samples, BoundarySamples) else np.asarray(samples)
    if x.shape[-1] != clf.mlp.input_width:
        raise nk.ShapeError(f"features are {x.shape[-1]} wide, classifier expects {clf.mlp.input_width}")
    logits, _ = nk.forward(clf.mlp, clf.params, x)
    return nk.softmax(logits, axis=1)


def predict_boundaries(clf: Classifier, samples) -> np.ndarray:
    """Probability that each sample's shot boundary is a scene boundary."""
    return predict_proba(clf, samples)[:, 1]


def select_cue_points(scores, times, constraints: CuePointConstraints) -> List[int]:
    """Greedy by descending score under a spacing and a count budget; result sorted by time."""
    scores = np.asarray(scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], times[i]))
    chosen: List[int] = []
    for i in order:
        if len(chosen) >= constraints.max_count or scores[i] < constraints.score_threshold:
            break
        if all(abs(times[i] - times[j]) >= constraints.min_gap_seconds for j in chosen):
            chosen.append(i)
    return sorted(chosen, key=lambda i: (times[i], i))


def is_feasible(times, subset, constraints: CuePointConstraints) -> bool:
    if len(subset) > constraints.max_count:
        return False
    return all(abs(times[a] - times[b]) >= constraints.min_gap_seconds
               for a, b in itertools.combinations(subset, 2))


def prediction_records(samples: BoundarySamples, scores) -> List[dict]:
    return [{"title_id": samples.title_ids[i], "boundary_index": int(samples.boundary_index[i]),
             "boundary_time_s": float(samples.times[i]), "score": float(scores[i]),
             "label_if_known": int(samples.labels[i])} for i in range(len(samples))]


def write_jsonl(path, records: Iterable[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    nk.atomic_write_text(path, text)


def save_classifier(clf: Classifier, path) -> None:
    nk.check_params(clf.mlp, clf.params)
    nk.save_arrays(clf.params, path, extra={"layer_widths": list(clf.mlp.layer_widths),
                                            "dropout_rates": list(clf.mlp.dropout_rates),
                                            "classifier": clf.spec.to_dict(),
                                            "loss_curve": clf.loss_curve})


def load_classifier(path) -> Classifier:
    arrays, extra = nk.load_arrays(path)
    mlp = nk.MlpSpec(tuple(extra["layer_widths"]), tuple(extra["dropout_rates"]))
    nk.check_params(mlp, arrays)
    return Classifier(mlp, arrays, ClassifierSpec.from_dict(extra["classifier"]),
                      list(extra.get("loss_curve", [])))
