"""Momentum SGD with warmup, decay schedules and LARS layer-wise rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import FlatGrads, FlatParams, ParamSegment, SegmentKind, check_segments

DECAYS = ("step", "polynomial", "linear", "constant")


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_iters: int
    warmup_iters: int = 0
    decay: str = "polynomial"
    power: float = 2.0
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_iters < 0 or self.total_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}, got {self.decay!r}")
        object.__setattr__(self, "milestones", tuple(sorted(int(m) for m in self.milestones)))
        if self.decay == "step" and any(m <= self.warmup_iters for m in self.milestones):
            raise ValueError("step milestones must come after the warmup phase")


def lr_at(schedule: LrSchedule, it: int) -> float:
    """Learning rate for iteration ``it`` (0-based).

    Warmup ramps linearly as ``base * (it + 1) / warmup`` so the last
    warmup iteration already uses the base rate.  Decay progress is measured
    from the end of warmup to ``total_iters``.
    """
    s = schedule
    if not 0 <= it < s.total_iters:
        raise ValueError(f"iteration {it} outside [0, {s.total_iters})")
    if it < s.warmup_iters:
        return s.base_lr * (it + 1) / s.warmup_iters
    if s.decay == "constant":
        return s.base_lr
    if s.decay == "step":
        passed = sum(1 for m in s.milestones if it >= m)
        return s.base_lr * s.gamma ** passed
    progress = (it - s.warmup_iters) / (s.total_iters - s.warmup_iters)
    power = 1.0 if s.decay == "linear" else s.power
    return s.base_lr * (1.0 - progress) ** power


@dataclass(frozen=True)
class LarsConfig:
    eta: float = 0.001
    epsilon_guard: float = 0.0
    weight_decay: float = 0.0
    skip_kinds: frozenset = field(
        default_factory=lambda: frozenset({SegmentKind.BIAS, SegmentKind.BN_GAMMA, SegmentKind.BN_BETA}))
    enabled: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.epsilon_guard < 0 or self.weight_decay < 0:
            raise ValueError("epsilon_guard and weight_decay must be non-negative")
        object.__setattr__(self, "skip_kinds", frozenset(SegmentKind(k) for k in self.skip_kinds))


@dataclass
class MomentumState:
    velocity: np.ndarray
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def zeros_like(cls, params: FlatParams, momentum: float = 0.9) -> "MomentumState":
        return cls(np.zeros_like(params.values), momentum)


class NonFiniteGradientError(FloatingPointError):
    pass


def batched_norms(flat, segments: Sequence[ParamSegment]) -> np.ndarray:
    """L2 norm of every segment from one pass over the fused buffer.

    Squares are taken in float64 and summed strictly left to right inside
    each segment (a row-wise cumulative sum over a zero-padded
    segments-by-max-length matrix), then square-rooted.  The result is
    therefore bit-identical to a naive per-segment loop
    ``acc += x*x`` in float64 followed by ``sqrt``.
    """
    flat = np.asarray(flat)
    check_segments(segments, flat.size)
    nseg = len(segments)
    if nseg == 0:
        return np.zeros(0)
    lengths = np.array([s.length for s in segments], dtype=np.int64)
    maxlen = int(lengths.max())
    if maxlen == 0:
        return np.zeros(nseg)
    rows = np.repeat(np.arange(nseg), lengths)
    starts = np.repeat(np.array([s.offset for s in segments], dtype=np.int64), lengths)
    cols = np.arange(flat.size) - starts
    padded = np.zeros((nseg, maxlen))
    wide = flat.astype(np.float64)
    padded[rows, cols] = wide * wide
    return np.sqrt(np.cumsum(padded, axis=1)[:, -1])


def lars_trust_ratio(w_norm: float, g_norm: float, cfg: LarsConfig) -> float:
    """``eta * |w| / (|g| + wd * |w| + guard)``; 1.0 when ``|w| = 0`` or the
    denominator does not exceed the guard."""
    denom = g_norm + cfg.weight_decay * w_norm + cfg.epsilon_guard
    if w_norm == 0.0 or denom <= cfg.epsilon_guard:
        return 1.0
    return cfg.eta * w_norm / denom


def sgd_step(params: FlatParams, grads: FlatGrads, mom: MomentumState, schedule: LrSchedule,
             lars: LarsConfig, it: int) -> np.ndarray:
    """Apply one update in place and return the per-segment learning rates.

    Per segment: ``v = mu*v + (g + wd*w)`` then ``w -= local_lr * v`` in the
    master dtype, with ``local_lr = lr_at(it) * trust_ratio`` for LARS
    segments and the plain scheduled rate for skipped kinds (which also get
    no weight decay).  Non-finite gradients reject the step before any
    state is touched.
    """
    if params.values.shape != grads.values.shape or params.values.shape != mom.velocity.shape:
        raise ValueError("params, grads and velocity must share one layout")
    bad = ~np.isfinite(grads.values)
    if bad.any():
        names = [s.name for s in grads.segments if bad[s.offset:s.end].any()]
        raise NonFiniteGradientError(f"iteration {it}: non-finite gradient in {', '.join(names)}")

    lr = lr_at(schedule, it)
    segments = params.segments
    if lars.enabled:
        w_norms = batched_norms(params.values, segments)
        g_norms = batched_norms(grads.values, segments)
    dtype = params.values.dtype.type
    mu = dtype(mom.momentum)
    wd = dtype(lars.weight_decay)
    local = np.empty(len(segments))
    for i, seg in enumerate(segments):
        skip = seg.kind in lars.skip_kinds
        ratio = 1.0
        if lars.enabled and not skip:
            ratio = lars_trust_ratio(float(w_norms[i]), float(g_norms[i]), lars)
        local[i] = lr * ratio
        w = params.values[seg.offset:seg.end]
        g = grads.values[seg.offset:seg.end]
        v = mom.velocity[seg.offset:seg.end]
        update = g if skip or lars.weight_decay == 0 else g + wd * w
        v *= mu
        v += update
        w -= dtype(local[i]) * v
    return local


def warmup_iters_from_epochs(warmup_epochs: float, iters_per_epoch: int) -> int:
    return int(math.floor(warmup_epochs * iters_per_epoch + 0.5))
