"""Shot-contrastive pretraining with a momentum key encoder and a key queue.

For every query shot the positive key is the most similar shot among its
``m`` neighbours on each side (scored with the query encoder); negatives are
keys of earlier mini-batches held in a FIFO queue. The query encoder is
trained with InfoNCE, the key encoder follows it as an exponential moving
average.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .corpus import Corpus, ShotTensor, modality_matrix, reshape_shot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    neighborhood: int = 4               # m: shots on each side of the query
    queue_size: int = 1024
    momentum: float = 0.999             # key-encoder EMA coefficient
    temperature: float = 0.07
    batch_size: int = 64
    epochs: int = 10
    refresh_epochs: Tuple[int, ...] = (20, 50)
    normalize: bool = True
    embed_dim: int = 64
    hidden: Tuple[int, ...] = (256,)
    learning_rate: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: Tuple[Tuple[int, float], ...] = ()
    per_step_keys: bool = False

    def __post_init__(self):
        object.__setattr__(self, "refresh_epochs", tuple(int(e) for e in self.refresh_epochs))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "lr_schedule", tuple((int(e), float(m)) for e, m in self.lr_schedule))
        if self.neighborhood < 1:
            raise ValueError("neighborhood half-width must be >= 1")
        if self.batch_size < 1 or self.queue_size < self.batch_size:
            raise ValueError("queue size must be at least the batch size")
        if self.queue_size % self.batch_size:
            raise ValueError("queue size must be a multiple of the batch size")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("key-encoder momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.embed_dim < 1:
            raise ValueError("embedding dimension must be positive")

    @classmethod
    def desk(cls, **overrides) -> "PretrainConfig":
        return dataclasses.replace(cls(), **overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "PretrainConfig":
        base = cls(neighborhood=4, queue_size=65536, momentum=0.999, temperature=0.07,
                   batch_size=256, epochs=120, refresh_epochs=(20, 50), embed_dim=2048,
                   hidden=(2048,), learning_rate=0.03, sgd_momentum=0.9, weight_decay=1e-4,
                   lr_schedule=((60, 0.1), (90, 0.1)))
        return dataclasses.replace(base, **overrides)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pretrain keys: {sorted(unknown)}")
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(x) for x in d["lr_schedule"])
        for key in ("refresh_epochs", "hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def encoder_spec(self, input_width: int) -> nk.MlpSpec:
        return nk.MlpSpec((input_width, *self.hidden, self.embed_dim))

    def sgd_state(self) -> nk.SgdState:
        return nk.SgdState(self.learning_rate, self.sgd_momentum, self.weight_decay,
                           list(self.lr_schedule))


@dataclass
class EncoderPair:
    spec: nk.MlpSpec
    query: nk.ParamSet
    key: nk.ParamSet

    @classmethod
    def initialize(cls, spec: nk.MlpSpec, seed: int) -> "EncoderPair":
        q = nk.init_params(spec, seed)
        return cls(spec, q, nk.copy_params(q))


class KeyQueue:
    """Fixed-capacity FIFO of key embeddings (ring buffer)."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def enqueue(self, keys) -> "KeyQueue":
        keys = np.asarray(keys, dtype=np.float32).reshape(-1, self.dim)
        n = len(keys)
        if n > self.capacity:
            raise ValueError(f"batch of {n} keys exceeds queue capacity {self.capacity}")
        if self.capacity % n:
            raise ValueError(f"batch size {n} does not divide queue capacity {self.capacity}")
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.buffer[idx] = keys
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.size + n, self.capacity)
        return self

    def contents(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self.buffer[: self.size].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def negatives(self) -> np.ndarray:
        """Stored keys in storage order (order does not matter for the loss)."""
        return self.buffer[: self.size] if self.size < self.capacity else self.buffer


def enqueue_keys(queue: KeyQueue, keys) -> KeyQueue:
    return queue.enqueue(keys)


def embed(spec: nk.MlpSpec, params: nk.ParamSet, x, normalize: bool = True,
          chunk: int = 4096) -> np.ndarray:
    """Embed the rows of ``x`` in chunks (no dropout, no gradient)."""
    x = np.asarray(x)
    out = np.empty((len(x), spec.output_width), dtype=np.float32)
    for s in range(0, len(x), chunk):
        y, _ = nk.forward(spec, params, x[s:s + chunk])
        out[s:s + chunk] = nk.l2_normalize(y) if normalize else y
    return out


def embed_shot(spec: nk.MlpSpec, params: nk.ParamSet, shot, normalize: bool = True) -> np.ndarray:
    """Channel-stack a shot, flatten it and run it through the encoder."""
    tensor = shot.tensor if hasattr(shot, "tensor") else shot
    if not isinstance(tensor, ShotTensor):
        tensor = ShotTensor(tensor)
    flat = reshape_shot(tensor).reshape(-1)
    if flat.size != spec.input_width:
        raise nk.ShapeError(f"shot flattens to {flat.size} values, encoder expects {spec.input_width}")
    y, _ = nk.forward(spec, params, flat)
    return nk.l2_normalize(y) if normalize else y


def _neighbor_offsets(m: int) -> np.ndarray:
    # nearest first, earlier first: -1, +1, -2, +2, ...
    return np.array([s * d for d in range(1, m + 1) for s in (-1, 1)])


def select_positive_key(embeddings, t: int, m: int) -> int:
    """Index of the neighbour within ``m`` shots of ``t`` with the largest dot product.

    The window is clamped to the title; ties go to the nearest shot, then the earlier one.
    """
    emb = np.asarray(embeddings)
    n = len(emb)
    if n < 2:
        raise ValueError("positive-key selection needs a title with at least two shots")
    if not 0 <= t < n:
        raise IndexError(t)
    cands = t + _neighbor_offsets(m)
    cands = cands[(cands >= 0) & (cands < n)]
    sims = np.sum(emb[cands].astype(np.float64) * emb[t].astype(np.float64), axis=1)
    return int(cands[int(np.argmax(sims))])


def select_positive_keys(embeddings, m: int) -> np.ndarray:
    """Vectorised :func:`select_positive_key` for every shot of a title."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = len(emb)
    if n < 2:
        raise ValueError("positive-key selection needs a title with at least two shots")
    offsets = _neighbor_offsets(m)
    t = np.arange(n)
    cands = t[:, None] + offsets[None, :]
    valid = (cands >= 0) & (cands < n)
    safe = np.clip(cands, 0, n - 1)
    sims = np.sum(emb[safe] * emb[:, None, :], axis=2)
    sims[~valid] = -np.inf
    return cands[t, np.argmax(sims, axis=1)]


@dataclass
class PositiveKeyMap:
    keys: List[np.ndarray]          # per title: positive-key shot index for every shot
    epoch: int = 0

    def global_index(self, offsets: np.ndarray) -> np.ndarray:
        return np.concatenate([k + off for k, off in zip(self.keys, offsets)])


def refresh_positive_keys(title_inputs: Sequence[np.ndarray], spec: nk.MlpSpec,
                          query_params: nk.ParamSet, cfg: PretrainConfig,
                          epoch: int = 0) -> PositiveKeyMap:
    """Re-embed every shot with the query encoder and reselect all positive keys."""
    keys = []
    for x in title_inputs:
        e = embed(spec, query_params, x, cfg.normalize)
        keys.append(select_positive_keys(e, cfg.neighborhood))
    return PositiveKeyMap(keys, epoch)


def info_nce(q, k_pos, negatives, temperature: float):
    """InfoNCE loss of queries against their positive key and shared negatives.

    ``q``/``k_pos`` are one D-vector or a batch ``(B, D)``; ``negatives`` is
    ``(K, D)`` and may be empty. Returns ``(loss, grad_q, grad_k_pos)``, the
    loss being averaged over the batch. Logit 0 is always the positive.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q)
    single = q.ndim == 1
    q2 = np.atleast_2d(q).astype(np.float64)
    k2 = np.atleast_2d(np.asarray(k_pos)).astype(np.float64)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, q2.shape[1])
    b = len(q2)
    pos_logit = np.sum(q2 * k2, axis=1, keepdims=True) / temperature
    logits = np.concatenate([pos_logit, q2 @ neg.T / temperature], axis=1)
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    lse = top[:, 0] + np.log(e.sum(axis=1))
    loss = float(np.mean(lse - logits[:, 0]))
    p = e / e.sum(axis=1, keepdims=True)
    coef = p.copy()
    coef[:, 0] -= 1.0
    grad_q = (coef[:, :1] * k2 + coef[:, 1:] @ neg) / (temperature * b)
    grad_k = coef[:, :1] * q2 / (temperature * b)
    out_dtype = q.dtype if q.dtype == np.float64 else np.float32
    grad_q, grad_k = grad_q.astype(out_dtype), grad_k.astype(out_dtype)
    if single:
        return loss, grad_q[0], grad_k[0]
    return loss, grad_q, grad_k


def momentum_update(key: nk.ParamSet, query: nk.ParamSet, alpha: float) -> nk.ParamSet:
    """``key <- alpha * key + (1 - alpha) * query`` for every tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"momentum coefficient {alpha} outside [0, 1]")
    if set(key) != set(query):
        raise nk.ShapeError("key and query encoders hold different parameters")
    out = {}
    for name, k in key.items():
        q = query[name]
        if q.shape != k.shape:
            raise nk.ShapeError(f"{name}: key {k.shape} vs query {q.shape}")
        if alpha == 1.0:
            out[name] = k.copy()
        elif alpha == 0.0:
            out[name] = q.copy()
        else:
            out[name] = (k.dtype.type(alpha) * k + k.dtype.type(1.0 - alpha) * q).astype(k.dtype)
    return out


@dataclass
class PretrainResult:
    encoders: EncoderPair
    config: PretrainConfig
    seed: int
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    key_maps: Dict[int, PositiveKeyMap] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


class ContrastiveTrainer:
    """Owns both encoders, the optimizer state and the key queue for one run."""

    def __init__(self, title_inputs: Sequence[np.ndarray], cfg: PretrainConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.title_inputs = [np.asarray(x, dtype=np.float32) for x in title_inputs]
        if not self.title_inputs:
            raise ValueError("no titles to train on")
        if any(len(x) < 2 for x in self.title_inputs):
            raise ValueError("every title needs at least two shots")
        self.inputs = np.concatenate(self.title_inputs)
        sizes = [len(x) for x in self.title_inputs]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.title_of = np.repeat(np.arange(len(sizes)), sizes)
        self.spec = cfg.encoder_spec(self.inputs.shape[1])
        init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
        self.encoders = EncoderPair.initialize(self.spec, int(init_seq.generate_state(1)[0]))
        self.rng = np.random.default_rng(shuffle_seq)
        self.opt = cfg.sgd_state()
        self.queue = KeyQueue(cfg.queue_size, cfg.embed_dim)
        self.key_map: Optional[PositiveKeyMap] = None
        self.positives: Optional[np.ndarray] = None
        self.epoch = 0
        self.steps = 0

    def refresh(self) -> PositiveKeyMap:
        self.key_map = refresh_positive_keys(self.title_inputs, self.spec, self.encoders.query,
                                             self.cfg, self.epoch)
        self.positives = self.key_map.global_index(self.offsets)
        return self.key_map

    def _per_step_positives(self, batch: np.ndarray) -> np.ndarray:
        out = np.empty_like(batch)
        m = self.cfg.neighborhood
        for j, g in enumerate(batch):
            ti = self.title_of[g]
            off = self.offsets[ti]
            n = len(self.title_inputs[ti])
            lo, hi = max(0, g - off - m), min(n, g - off + m + 1)
            e = embed(self.spec, self.encoders.query, self.inputs[off + lo: off + hi], self.cfg.normalize)
            out[j] = off + lo + select_positive_key(e, g - off - lo, m)
        return out

    def step(self, batch: np.ndarray) -> float:
        """One optimizer step on the query shots with global indices ``batch``."""
        cfg, spec = self.cfg, self.spec
        pos = self._per_step_positives(batch) if cfg.per_step_keys else self.positives[batch]
        q_raw, cache = nk.forward(spec, self.encoders.query, self.inputs[batch])
        q = nk.l2_normalize(q_raw) if cfg.normalize else q_raw
        k_raw, _ = nk.forward(spec, self.encoders.key, self.inputs[pos])
        k = nk.l2_normalize(k_raw) if cfg.normalize else k_raw
        loss, grad_q, _ = info_nce(q, k, self.queue.negatives(), cfg.temperature)
        if not np.isfinite(loss):
            raise nk.NonFiniteError(f"non-finite InfoNCE loss at epoch {self.epoch}, step {self.steps}")
        if cfg.normalize:
            grad_q = nk.l2_normalize_backward(q_raw, grad_q)
        grads, _ = nk.backward(cache, grad_q)
        self.encoders.query, self.opt = nk.sgd_step(self.encoders.query, grads, self.opt, self.epoch)
        self.encoders.key = momentum_update(self.encoders.key, self.encoders.query, cfg.momentum)
        self.queue.enqueue(k)
        self.steps += 1
        return loss

    def run_epoch(self) -> float:
        cfg = self.cfg
        if self.key_map is None or self.epoch in cfg.refresh_epochs:
            self.refresh()
        order = self.rng.permutation(len(self.inputs))
        n_batches = len(order) // cfg.batch_size
        if n_batches == 0:
            raise ValueError(f"{len(order)} shots cannot fill one batch of {cfg.batch_size}")
        losses = []
        for b in range(n_batches):
            losses.append(self.step(order[b * cfg.batch_size:(b + 1) * cfg.batch_size]))
        self.epoch += 1
        return losses


def pretrain(data, cfg: PretrainConfig = PretrainConfig(), seed: int = 0, modality: int = 1,
             epochs: Optional[int] = None) -> PretrainResult:
    """Train a query/key encoder pair on a corpus (or on per-title input matrices)."""
    if isinstance(data, Corpus):
        title_inputs = [modality_matrix(t, modality) for t in data.titles]
    else:
        title_inputs = list(data)
    trainer = ContrastiveTrainer(title_inputs, cfg, seed)
    result = PretrainResult(trainer.encoders, cfg, seed)
    for _ in range(cfg.epochs if epochs is None else epochs):
        refreshing = trainer.key_map is None or trainer.epoch in cfg.refresh_epochs
        losses = trainer.run_epoch()
        if refreshing:
            result.key_maps[trainer.key_map.epoch] = trainer.key_map
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d: mean InfoNCE %.4f", trainer.epoch, result.epoch_losses[-1])
    result.encoders = trainer.encoders
    result.rng_state = trainer.rng.bit_generator.state
    result.metadata = {"epochs_run": trainer.epoch, "steps": trainer.steps,
                       "queue_start": "partial", "modality": modality,
                       "n_titles": len(title_inputs), "n_shots": int(len(trainer.inputs))}
    return result


def save_pretrain_run(result: PretrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nk.save_checkpoint(result.encoders.spec, result.encoders.query, out / "query_encoder")
    nk.save_checkpoint(result.encoders.spec, result.encoders.key, out / "key_encoder")
    meta = {"config": result.config.to_dict(), "seed": result.seed,
            "epoch": result.metadata.get("epochs_run", len(result.epoch_losses)),
            "epoch_losses": result.epoch_losses, "step_losses": result.step_losses,
            "rng_state": result.rng_state, "metadata": result.metadata}
    nk.atomic_write_text(out / "run.json", json.dumps(meta, indent=1, sort_keys=True))
    return out


def load_pretrain_run(out_dir) -> Tuple[EncoderPair, dict]:
    out = Path(out_dir)
    spec, query = nk.load_checkpoint(out / "query_encoder")
    _, key = nk.load_checkpoint(out / "key_encoder")
    meta = json.loads((out / "run.json").read_text())
    return EncoderPair(spec, query, key), meta
