"""Dense ReLU network over a single flat parameter buffer.

The network is ``layer_dims[0] -> hidden ... -> K`` with optional batch
normalization after each hidden affine map.  All parameters live in one
contiguous master-precision array; each layer tensor is a named
:class:`ParamSegment` view into it, which is the granularity used by LARS,
bucketing and allreduce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import rng

MASTER_DTYPE = np.float32
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


class SegmentKind(str, Enum):
    WEIGHT = "weight"
    BIAS = "bias"
    BN_GAMMA = "bn_gamma"
    BN_BETA = "bn_beta"


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    use_batchnorm: tuple[bool, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output dimension")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if dims[-1] < 2:
            raise ValueError(f"need at least 2 classes, got {dims[-1]}")
        bn = self.use_batchnorm
        if isinstance(bn, bool):
            bn = (bn,) * (len(dims) - 2)
        bn = tuple(bool(b) for b in bn)
        if not bn:
            bn = (False,) * (len(dims) - 2)
        if len(bn) != len(dims) - 2:
            raise ValueError(f"use_batchnorm needs one flag per hidden layer ({len(dims) - 2}), got {len(bn)}")
        object.__setattr__(self, "use_batchnorm", bn)
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def has_bn(self, layer: int) -> bool:
        return layer < self.num_layers - 1 and self.use_batchnorm[layer]


@dataclass(frozen=True)
class ParamSegment:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]
    kind: SegmentKind

    @property
    def end(self) -> int:
        return self.offset + self.length


def layout(spec: ModelSpec) -> list[ParamSegment]:
    """Segments in forward (offset) order: per layer weight, bias, bn_gamma, bn_beta.

    Hidden layers followed by batch norm carry no bias.
    """
    segments = []
    offset = 0

    def add(name, shape, kind):
        nonlocal offset
        n = math.prod(shape)
        segments.append(ParamSegment(name, offset, n, tuple(shape), kind))
        offset += n

    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        add(f"fc{i}.weight", (fan_in, fan_out), SegmentKind.WEIGHT)
        if spec.has_bn(i):
            add(f"bn{i}.gamma", (fan_out,), SegmentKind.BN_GAMMA)
            add(f"bn{i}.beta", (fan_out,), SegmentKind.BN_BETA)
        else:
            add(f"fc{i}.bias", (fan_out,), SegmentKind.BIAS)
    return segments


def check_segments(segments: Sequence[ParamSegment], total: int | None = None) -> None:
    """Raise ValueError unless segments are sorted, non-overlapping and tile [0, total)."""
    pos = 0
    for seg in segments:
        if seg.length != math.prod(seg.shape):
            raise ValueError(f"segment {seg.name}: length {seg.length} != prod{seg.shape}")
        if seg.offset < pos:
            raise ValueError(f"segment {seg.name} overlaps its predecessor (offset {seg.offset} < {pos})")
        if seg.offset > pos:
            raise ValueError(f"gap before segment {seg.name} at [{pos}, {seg.offset})")
        pos = seg.end
    if total is not None and pos != total:
        raise ValueError(f"segments cover {pos} elements but buffer has {total}")


@dataclass
class FlatParams:
    """Contiguous buffer plus its segment table.  Also used for gradients."""

    values: np.ndarray
    segments: list[ParamSegment]
    spec: ModelSpec | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        if self.values.ndim != 1:
            raise ValueError("flat buffer must be one-dimensional")
        check_segments(self.segments, self.values.size)

    def view(self, key: int | str) -> np.ndarray:
        seg = self.segment(key)
        return self.values[seg.offset:seg.end].reshape(seg.shape)

    def segment(self, key: int | str) -> ParamSegment:
        if isinstance(key, str):
            for seg in self.segments:
                if seg.name == key:
                    return seg
            raise KeyError(key)
        return self.segments[key]

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), list(self.segments), self.spec)

    def zeros_like(self) -> "FlatParams":
        return FlatParams(np.zeros_like(self.values), list(self.segments), self.spec)

    def astype(self, dtype) -> "FlatParams":
        return FlatParams(self.values.astype(dtype), list(self.segments), self.spec)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


FlatGrads = FlatParams


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, features: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON) -> "BatchNormState":
        return cls(np.zeros(features, MASTER_DTYPE), np.ones(features, MASTER_DTYPE), momentum, epsilon)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.epsilon)


def init_bn_states(spec: ModelSpec, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON) -> list[BatchNormState]:
    """One state per hidden layer that uses batch norm, in layer order."""
    return [
        BatchNormState.fresh(spec.layer_dims[i + 1], momentum, epsilon)
        for i in range(spec.num_layers)
        if spec.has_bn(i)
    ]


def batchnorm_update(state: BatchNormState, batch_mean, batch_var) -> BatchNormState:
    """Exponential moving average of batch statistics; returns a new state."""
    batch_mean = np.asarray(batch_mean)
    batch_var = np.asarray(batch_var)
    if not (np.isfinite(batch_mean).all() and np.isfinite(batch_var).all()):
        raise ValueError("batch statistics must be finite")
    if np.any(batch_var < 0):
        raise ValueError("batch variance must be non-negative")
    m = state.momentum
    dtype = state.running_mean.dtype
    mean = (m * state.running_mean + (1.0 - m) * batch_mean).astype(dtype)
    var = (m * state.running_var + (1.0 - m) * batch_var).astype(dtype)
    return BatchNormState(mean, var, state.momentum, state.epsilon)


def init_params(spec: ModelSpec, seed: int) -> FlatParams:
    """Seeded initialization that every worker can run locally.

    Weights are He-scaled truncated normals (std ``sqrt(2/fan_in)``, cut at
    two standard deviations), drawn from the Philox stream
    ``(seed, INIT | segment index)`` and rounded once to float32.  Biases
    and bn_beta start at zero, bn_gamma at one.  The result depends only on
    ``(spec, seed)``, never on rank or thread.
    """
    segments = layout(spec)
    values = np.zeros(segments[-1].end, MASTER_DTYPE)
    for idx, seg in enumerate(segments):
        if seg.kind is SegmentKind.WEIGHT:
            std = math.sqrt(2.0 / seg.shape[0])
            draw = rng.truncated_normal(seed, rng.stream_id(rng.INIT, idx), seg.length, std)
            values[seg.offset:seg.end] = draw.astype(MASTER_DTYPE)
        elif seg.kind is SegmentKind.BN_GAMMA:
            values[seg.offset:seg.end] = 1.0
    return FlatParams(values, segments, spec)


def smooth_labels(cls: int, epsilon: float, num_classes: int) -> np.ndarray:
    if not 0 <= cls < num_classes:
        raise ValueError(f"class {cls} out of range [0, {num_classes})")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    v = np.full(num_classes, epsilon / num_classes)
    v[cls] = 1.0 - epsilon + epsilon / num_classes
    return v


def smoothed_targets(labels: np.ndarray, epsilon: float, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    q = np.full((labels.size, num_classes), epsilon / num_classes, dtype=dtype)
    q[np.arange(labels.size), labels] = 1.0 - epsilon + epsilon / num_classes
    return q


@dataclass
class _LayerCache:
    inp: np.ndarray
    out: np.ndarray | None = None          # post-activation (hidden layers)
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None


@dataclass
class ForwardCache:
    params: FlatParams
    layers: list[_LayerCache]
    probs: np.ndarray
    targets: np.ndarray
    mode: str
    logits: np.ndarray = field(repr=False, default=None)


def _segment_ids(params: FlatParams) -> dict[str, int]:
    return {seg.name: i for i, seg in enumerate(params.segments)}


def forward(params: FlatParams, bn: list[BatchNormState], batch, mode: str = "train",
            label_smoothing: float = 0.0) -> tuple[float, ForwardCache]:
    """Mean label-smoothed cross-entropy of ``batch = (features, labels)``.

    Computation runs in the dtype of ``params.values``.  In train mode batch
    statistics normalize the hidden activations and ``bn`` entries are
    replaced by their moving-average updates; eval mode only reads ``bn``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = params.spec
    x, y = batch
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch features must be a nonempty 2-D array")
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match model input {spec.input_dim}")
    if len(y) != x.shape[0]:
        raise ValueError("features and labels disagree on batch size")

    logits, layers = _run_layers(params, bn, x, mode)
    dtype = params.values.dtype
    q = smoothed_targets(y, label_smoothing, spec.num_classes, dtype)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = float(-(q * logp).sum(axis=1).mean())
    cache = ForwardCache(params, layers, np.exp(logp), q, mode, logits)
    return loss, cache


def predict(params: FlatParams, bn: list[BatchNormState], x) -> np.ndarray:
    """Eval-mode logits."""
    logits, _ = _run_layers(params, bn, np.asarray(x), "eval")
    return logits


def _run_layers(params, bn, x, mode):
    spec = params.spec
    ids = _segment_ids(params)
    dtype = params.values.dtype
    h = x.astype(dtype, copy=False)
    layers = []
    bn_idx = 0
    for i in range(spec.num_layers):
        cache = _LayerCache(inp=h)
        z = h @ params.view(ids[f"fc{i}.weight"])
        if spec.has_bn(i):
            state = bn[bn_idx]
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                bn[bn_idx] = batchnorm_update(state, mean, var)
            else:
                mean = state.running_mean.astype(dtype)
                var = state.running_var.astype(dtype)
            inv_std = 1.0 / np.sqrt(var + dtype.type(state.epsilon))
            xhat = (z - mean) * inv_std
            cache.xhat, cache.inv_std = xhat, inv_std
            z = xhat * params.view(ids[f"bn{i}.gamma"]) + params.view(ids[f"bn{i}.beta"])
            bn_idx += 1
        else:
            z = z + params.view(ids[f"fc{i}.bias"])
        if i < spec.num_layers - 1:
            h = np.maximum(z, 0)
            cache.out = h
        else:
            h = z
        layers.append(cache)
    return h, layers


def backward(cache: ForwardCache, on_segment_done: Callable[[int], None] | None = None,
             out: FlatGrads | None = None) -> FlatGrads:
    """Analytic gradient of the mean loss.

    ``on_segment_done(segment_index)`` fires as soon as each segment's
    gradient is final, in reverse offset order (output layer first).  When
    ``out`` is given the gradient is written into it, so the callback can
    read finished segments while later ones are still being computed.
    """
    if cache.mode != "train":
        raise ValueError("backward needs a train-mode forward cache")
    params = cache.params
    spec = params.spec
    ids = _segment_ids(params)
    grads = params.zeros_like() if out is None else out
    notify = on_segment_done or (lambda _i: None)
    n = cache.probs.shape[0]

    delta = (cache.probs - cache.targets) / n
    for i in reversed(range(spec.num_layers)):
        lc = cache.layers[i]
        if i < spec.num_layers - 1:
            delta = delta * (lc.out > 0)
        if spec.has_bn(i):
            gamma_id, beta_id = ids[f"bn{i}.gamma"], ids[f"bn{i}.beta"]
            grads.view(beta_id)[...] = delta.sum(axis=0)
            notify(beta_id)
            grads.view(gamma_id)[...] = (delta * lc.xhat).sum(axis=0)
            notify(gamma_id)
            dxhat = delta * params.view(gamma_id)
            delta = lc.inv_std * (dxhat - dxhat.mean(axis=0) - lc.xhat * (dxhat * lc.xhat).mean(axis=0))
        else:
            bias_id = ids[f"fc{i}.bias"]
            grads.view(bias_id)[...] = delta.sum(axis=0)
            notify(bias_id)
        w_id = ids[f"fc{i}.weight"]
        grads.view(w_id)[...] = lc.inp.T @ delta
        notify(w_id)
        if i > 0:
            delta = delta @ params.view(w_id).T
    return grads


def accuracy(params: FlatParams, bn: list[BatchNormState], x, y) -> tuple[int, int]:
    """(correct, total) of eval-mode argmax predictions."""
    if len(y) == 0:
        return 0, 0
    pred = predict(params, bn, x).argmax(axis=1)
    return int((pred == np.asarray(y)).sum()), int(len(y))
