"""Small dense MLP kernel: forward/backward, SGD with momentum, gradient checks.

Parameters live in plain dicts of float32 numpy arrays (``W0``, ``b0``, ...).
A layer computes ``y = x @ W + b``, so ``W`` has shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

ParamSet = Dict[str, np.ndarray]

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf shows up in data, gradients or losses."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Convert ``x`` to a contiguous float array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.size and not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"tensor of shape {arr.shape} holds {bad} non-finite values")
    return arr


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) plus per-hidden-layer dropout."""

    layer_widths: Tuple[int, ...]
    dropout_rates: Tuple[float, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        rates = tuple(float(r) for r in self.dropout_rates)
        if not rates:
            rates = (0.0,) * self.n_hidden
        if len(rates) != self.n_hidden:
            raise ValueError(
                f"{self.n_hidden} hidden layers but {len(rates)} dropout rates")
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ValueError(f"dropout rates must lie in [0, 1), got {rates}")
        object.__setattr__(self, "dropout_rates", rates)
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"W{i}"] = (self.layer_widths[i], self.layer_widths[i + 1])
            shapes[f"b{i}"] = (self.layer_widths[i + 1],)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def init_params(spec: MlpSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        params[f"b{i}"] = np.zeros(fan_out, dtype=np.float32)
    return params


def check_params(spec: MlpSpec, params: ParamSet) -> None:
    expected = spec.param_shapes()
    if set(params) != set(expected):
        raise ShapeError(f"parameter names {sorted(params)} != {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape}, expected {shape}")


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class ForwardCache:
    spec: MlpSpec
    params: ParamSet
    inputs: List[np.ndarray]      # input to each layer (post-dropout)
    pre_acts: List[np.ndarray]    # pre-activation of each hidden layer
    masks: List[Optional[np.ndarray]]
    output_shape: Tuple[int, ...]
    consumed: bool = False


def forward(spec: MlpSpec, params: ParamSet, x, train: bool = False,
            seed: Optional[int] = None) -> Tuple[np.ndarray, ForwardCache]:
    """Run the MLP on ``x`` of shape ``(..., input_width)``.

    Dropout is inverted (kept units scaled by ``1/(1-p)``) and only active when
    ``train`` is set; the masks come from ``seed``, so repeated calls agree.
    The compute dtype follows the inputs: float64 params/inputs stay float64,
    which the gradient checker relies on.
    """
    check_params(spec, params)
    dtype = np.result_type(*params.values(), np.asarray(x).dtype)
    dtype = np.dtype(np.float64 if dtype == np.float64 else np.float32)
    x = as_tensor(x, dtype)
    if x.ndim == 0 or x.shape[-1] != spec.input_width:
        raise ShapeError(
            f"input last axis is {x.shape[-1] if x.ndim else 'scalar'}, "
            f"network expects {spec.input_width}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.input_width)
    rng = np.random.default_rng(seed) if train else None
    inputs, pre_acts, masks = [], [], []
    for i in range(spec.n_layers):
        inputs.append(h)
        z = h @ params[f"W{i}"].astype(dtype, copy=False) + params[f"b{i}"].astype(dtype, copy=False)
        if i == spec.n_layers - 1:
            h = z
            break
        pre_acts.append(z)
        h = np.maximum(z, 0)
        rate = spec.dropout_rates[i]
        if train and rate > 0:
            keep = 1.0 - rate
            mask = (rng.random(h.shape) < keep).astype(dtype) / dtype.type(keep)
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    out = h.reshape(*lead, spec.output_width)
    return out, ForwardCache(spec, params, inputs, pre_acts, masks, out.shape)


def backward(cache: ForwardCache, output_gradient) -> Tuple[ParamSet, np.ndarray]:
    """Backpropagate ``output_gradient`` through the layers recorded in ``cache``.

    A cache can be consumed once; reusing it raises ``ValueError``.
    """
    if not isinstance(cache, ForwardCache):
        raise TypeError("backward needs the cache returned by forward")
    if cache.consumed:
        raise ValueError("stale forward cache: it was already used by a backward pass")
    g = np.asarray(output_gradient)
    if g.shape != cache.output_shape:
        raise ShapeError(f"output gradient shape {g.shape} != forward output {cache.output_shape}")
    spec = cache.spec
    dtype = cache.inputs[0].dtype
    lead = cache.output_shape[:-1]
    g = g.astype(dtype, copy=False).reshape(-1, spec.output_width)
    grads: ParamSet = {}
    for i in reversed(range(spec.n_layers)):
        grads[f"W{i}"] = cache.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0, dtype=np.float64).astype(dtype)
        g = g @ cache.params[f"W{i}"].astype(dtype, copy=False).T
        if i > 0:
            if cache.masks[i - 1] is not None:
                g = g * cache.masks[i - 1]
            g = g * (cache.pre_acts[i - 1] > 0)
    cache.consumed = True
    return grads, g.reshape(*lead, spec.input_width)


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    """Scale each row of ``v`` to unit Euclidean norm (norms accumulated in float64)."""
    v = np.asarray(v)
    norms = np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise ValueError("cannot normalize a row with (near-)zero norm")
    return (v / norms).astype(v.dtype if v.dtype == np.float64 else np.float32)


def l2_normalize_backward(v, grad_out) -> np.ndarray:
    """Gradient of ``l2_normalize`` at ``v`` given the upstream gradient."""
    v = np.asarray(v)
    norms = np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=-1, keepdims=True))
    u = v / norms
    g = np.asarray(grad_out, dtype=np.float64)
    proj = np.sum(g * u, axis=-1, keepdims=True)
    out = (g - u * proj) / norms
    return out.astype(v.dtype if v.dtype == np.float64 else np.float32)


# --- optimizer -------------------------------------------------------------

@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    step_schedule: List[Tuple[int, float]] = field(default_factory=list)
    velocity: ParamSet = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.step_schedule = sorted((int(e), float(m)) for e, m in self.step_schedule)
        if any(m <= 0 for _, m in self.step_schedule):
            raise ValueError("schedule multipliers must be positive")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for threshold, mult in self.step_schedule:
            if epoch >= threshold:
                lr *= mult
        return lr


def sgd_step(params: ParamSet, grads: ParamSet, state: SgdState,
             epoch: int = 0) -> Tuple[ParamSet, SgdState]:
    """One momentum-SGD step; returns fresh parameter and state objects.

    ``v <- momentum * v + (grad + weight_decay * param)``, ``param <- param - lr(epoch) * v``.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if set(grads) != set(params):
        raise ShapeError(f"gradient names {sorted(grads)} != parameter names {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient for {name} at epoch {epoch} "
                f"({int(np.count_nonzero(~np.isfinite(g)))} bad entries); aborting step")
    lr = state.lr_at(epoch)
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        d = grads[name].astype(p.dtype, copy=False)
        if state.weight_decay:
            d = d + p.dtype.type(state.weight_decay) * p
        v_old = state.velocity.get(name)
        v = d.copy() if v_old is None else p.dtype.type(state.momentum) * v_old + d
        new_velocity[name] = v
        new_params[name] = p - p.dtype.type(lr) * v
    new_state = SgdState(state.learning_rate, state.momentum, state.weight_decay,
                         list(state.step_schedule), new_velocity)
    return new_params, new_state


# --- gradient checking -------------------------------------------------------

def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3,
                       pattern: Optional[Callable[[], bytes]] = None,
                       stats: Optional[dict] = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated in place, restored).

    If ``pattern`` is given it should fingerprint the ReLU on/off state; an
    entry whose +h and -h evaluations land on different linear pieces is
    retried with a 10x smaller step (up to 4 times) and counted in ``stats``.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h
        for attempt in range(5):
            flat[i] = orig + step
            plus = f()
            p_plus = pattern() if pattern else None
            flat[i] = orig - step
            minus = f()
            p_minus = pattern() if pattern else None
            flat[i] = orig
            if p_plus == p_minus or attempt == 4:
                break
            if stats is not None:
                stats["kink_retries"] = stats.get("kink_retries", 0) + 1
            step /= 10.0
        gflat[i] = (plus - minus) / (2 * step)
    return grad


def relative_deviation(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


@dataclass
class GradCheckReport:
    deviations: Dict[str, float]
    tolerance: float
    kink_retries: int = 0

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values())

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance

    def __str__(self):
        lines = [f"{name}: {dev:.3e}" for name, dev in sorted(self.deviations.items())]
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max={self.max_deviation:.3e} tol={self.tolerance:g} "
                f"kink_retries={self.kink_retries}\n" + "\n".join(lines))


def finite_diff_check(spec: MlpSpec, params: ParamSet, x, tolerance: float = 1e-4,
                      train: bool = False, seed: Optional[int] = 0,
                      h: float = 1e-3) -> GradCheckReport:
    """Compare backward() against central differences of a random linear readout.

    Everything runs in float64 so the comparison measures the backward pass,
    not float32 rounding. ``x`` is also checked (reported as ``input``).
    """
    if spec.n_params() > 10_000:
        raise ValueError("finite_diff_check is meant for networks with <= 1e4 parameters")
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x64 = np.array(x, dtype=np.float64)
    out, cache = forward(spec, p64, x64, train=train, seed=seed)
    readout = np.random.default_rng(12345).standard_normal(out.shape)
    grads, gx = backward(cache, readout)
    last = {}

    def loss():
        y, c = forward(spec, p64, x64, train=train, seed=seed)
        last["cache"] = c
        return float(np.sum(y * readout))

    def pattern():
        return b"".join(np.packbits(z > 0).tobytes() for z in last["cache"].pre_acts)

    stats = {}
    deviations = {name: relative_deviation(grads[name], numerical_gradient(loss, p64[name], h, pattern, stats))
                  for name in p64}
    deviations["input"] = relative_deviation(gx, numerical_gradient(loss, x64, h, pattern, stats))
    return GradCheckReport(deviations, tolerance, stats.get("kink_retries", 0))


# --- losses used by the classifier -----------------------------------------

def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels, sample_weights=None) -> Tuple[float, np.ndarray]:
    """Weighted mean cross-entropy and its gradient w.r.t. ``logits``.

    The mean divides by the sum of the sample weights.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    total = w.sum()
    loss = float(np.sum(w * nll) / total)
    grad = softmax(z, axis=1)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad.astype(logits.dtype if logits.dtype == np.float64 else np.float32)


# --- checkpoint files --------------------------------------------------------

def _stem(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(arrays: Dict[str, np.ndarray], path, extra: Optional[dict] = None) -> Tuple[Path, Path]:
    """Write ``<stem>.json`` (names, shapes, offsets) and ``<stem>.bin`` (little-endian f32)."""
    manifest_path, blob_path = _stem(path)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"version": CHECKPOINT_VERSION, "dtype": "<f4", "blob": blob_path.name,
                "sha256": hashlib.sha256(blob).hexdigest(), "tensors": entries}
    if extra:
        manifest["extra"] = extra
    atomic_write_bytes(blob_path, blob)
    atomic_write_text(manifest_path, json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path, blob_path


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest_path, _ = _stem(path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob_path = manifest_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"{blob_path}: tensor {e['name']} needs bytes up to offset {end}, "
                             f"file has {len(blob)}")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4,
                                          offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{blob_path}: checksum mismatch")
    return arrays, manifest.get("extra", {})


def save_checkpoint(spec: MlpSpec, params: ParamSet, path) -> Tuple[Path, Path]:
    check_params(spec, params)
    return save_arrays(params, path, extra={"layer_widths": list(spec.layer_widths),
                                            "dropout_rates": list(spec.dropout_rates)})


def load_checkpoint(path) -> Tuple[MlpSpec, ParamSet]:
    arrays, extra = load_arrays(path)
    spec = MlpSpec(tuple(extra["layer_widths"]), tuple(extra["dropout_rates"]))
    check_params(spec, arrays)
    return spec, arrays

