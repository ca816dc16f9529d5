"""Discrete-event timing model of one data-parallel iteration.

An iteration is forward, then layer-by-layer backward, with grouped
allreduces serialized on one communication channel.  With overlap a
group's allreduce starts at ``max(group ready, previous allreduce end)``;
without it every allreduce waits for the whole backward pass.  Allreduce
time follows the alpha-beta ring model
``2(P-1)/P * S/B + 2(P-1) * alpha``.

Layers are listed in backward order and identified by their position in
that list.  Times are in microseconds, bandwidth in bytes per second and
latency in seconds, mirroring how such numbers are usually quoted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .comm.collectives import halving_doubling_cost, ring_cost
from .scheduler import BucketPlan, EventKind, TraceEvent, make_buckets

_COST_MODELS = {"ring": ring_cost, "halving_doubling": halving_doubling_cost}


@dataclass(frozen=True)
class SimConfig:
    backward_us: tuple[float, ...]
    layer_bytes: tuple[int, ...]
    forward_us: float
    batch_per_rank: int
    bandwidth: float
    latency: float
    world_size: int = 1
    threshold_bytes: float = 4 * (1 << 20)
    overlap: bool = True
    step_us: float = 0.0
    algorithm: str = "ring"
    plan: BucketPlan | None = None

    def __post_init__(self):
        object.__setattr__(self, "backward_us", tuple(float(t) for t in self.backward_us))
        object.__setattr__(self, "layer_bytes", tuple(int(b) for b in self.layer_bytes))
        if not self.backward_us or len(self.backward_us) != len(self.layer_bytes):
            raise ValueError("need one backward time and one byte size per layer")
        if any(t <= 0 for t in self.backward_us) or any(b <= 0 for b in self.layer_bytes):
            raise ValueError("layer times and sizes must be positive")
        if self.forward_us <= 0 or self.batch_per_rank <= 0:
            raise ValueError("forward time and batch size must be positive")
        if self.bandwidth <= 0 or self.latency < 0 or self.step_us < 0:
            raise ValueError("bandwidth must be positive, latency and step cost non-negative")
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        if self.algorithm not in _COST_MODELS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    def bucket_plan(self) -> BucketPlan:
        if self.plan is not None:
            return self.plan
        return make_buckets(list(enumerate(self.layer_bytes)), self.threshold_bytes)

    @property
    def compute_us(self) -> float:
        return self.forward_us + sum(self.backward_us) + self.step_us

    def allreduce_us(self, nbytes: float) -> float:
        return 1e6 * _COST_MODELS[self.algorithm](nbytes, self.world_size, self.bandwidth, self.latency)


@dataclass
class Timeline:
    events: list[TraceEvent]
    iteration_time_us: float
    world_size: int
    batch_per_rank: int
    compute_us: float
    comm_us: float
    plan: BucketPlan = field(repr=False, default=None)

    @property
    def throughput(self) -> float:
        """Images per second over all ranks."""
        return self.world_size * self.batch_per_rank / (self.iteration_time_us * 1e-6)


def _ns(t_us: float) -> int:
    return int(round(t_us * 1000))


def simulate_iteration(cfg: SimConfig, iteration: int = 0) -> Timeline:
    plan = cfg.bucket_plan()
    events = []

    def emit(t, kind, **ids):
        events.append((t, len(events), TraceEvent(_ns(t), kind, iteration, **ids)))

    t = cfg.forward_us
    done_at = {}
    for layer, dt in enumerate(cfg.backward_us):
        t += dt
        done_at[layer] = t
        emit(t, EventKind.BACKWARD_DONE, segment=layer)
    backward_end = t

    channel_free = 0.0
    comm_total = 0.0
    for g in plan.groups:
        ready = max(done_at[m] for m in g.members)
        emit(ready, EventKind.GROUP_READY, group=g.gid)
        start = max(ready if cfg.overlap else backward_end, channel_free)
        duration = cfg.allreduce_us(g.nbytes)
        if cfg.world_size > 1:
            emit(start, EventKind.ALLREDUCE_START, group=g.gid, nbytes=g.nbytes)
            emit(start + duration, EventKind.ALLREDUCE_END, group=g.gid)
        else:
            # nothing goes on the wire, but the bytes are still accounted for
            emit(start, EventKind.ALLREDUCE_START, group=g.gid, nbytes=g.nbytes)
            emit(start, EventKind.ALLREDUCE_END, group=g.gid)
        channel_free = start + duration
        comm_total += duration

    end = max(backward_end, channel_free) + cfg.step_us
    emit(end, EventKind.STEP_APPLIED)
    events.sort(key=lambda e: (e[0], e[1]))
    return Timeline([e[2] for e in events], end, cfg.world_size, cfg.batch_per_rank, cfg.compute_us,
                    comm_total, plan)


@dataclass(frozen=True)
class ScalabilityRow:
    world_size: int
    throughput: float
    efficiency: float
    iteration_time_us: float


def scalability_curve(cfg: SimConfig, world_sizes: Sequence[int]) -> list[ScalabilityRow]:
    """Throughput and efficiency ``X(P) / (P * X(1))`` for each world size."""
    if not world_sizes:
        raise ValueError("need at least one world size")
    base = simulate_iteration(replace(cfg, world_size=1)).throughput
    rows = []
    for p in world_sizes:
        tl = simulate_iteration(replace(cfg, world_size=p))
        rows.append(ScalabilityRow(p, tl.throughput, tl.throughput / (p * base), tl.iteration_time_us))
    return rows


@dataclass(frozen=True)
class SweepRow:
    threshold_bytes: float
    num_groups: int
    iteration_time_us: float


@dataclass
class SweepResult:
    rows: list[SweepRow]

    @property
    def best(self) -> SweepRow:
        return min(self.rows, key=lambda r: (r.iteration_time_us, r.threshold_bytes))


def threshold_sweep(cfg: SimConfig, thresholds: Sequence[float]) -> SweepResult:
    rows = []
    for th in thresholds:
        if not th > 0:
            raise ValueError(f"thresholds must be positive, got {th}")
        tl = simulate_iteration(replace(cfg, threshold_bytes=th, plan=None))
        rows.append(SweepRow(th, len(tl.plan.groups), tl.iteration_time_us))
    return SweepResult(rows)


def uniform_layers(num_layers: int, layer_bytes: int, backward_us: float) -> dict:
    return {"layer_bytes": (layer_bytes,) * num_layers, "backward_us": (backward_us / num_layers,) * num_layers}


def sim_config_from_dict(d: dict) -> tuple[SimConfig, list[int], list[float]]:
    """Build a SimConfig (plus world sizes and sweep thresholds) from a flat mapping.

    Layers come either as explicit ``backward_us`` / ``layer_bytes`` lists
    (backward order) or as ``num_layers`` with totals ``total_bytes`` and
    ``total_backward_us`` split evenly.  Bandwidth may be given in bytes/s
    (``bandwidth``) or Gbit/s (``bandwidth_gbps``; ``inf`` allowed), latency
    in seconds (``latency``) or microseconds (``latency_us``).
    """
    d = dict(d)
    if "backward_us" in d:
        backward, sizes = d.pop("backward_us"), d.pop("layer_bytes")
    else:
        n = int(d.pop("num_layers"))
        sizes = [int(d.pop("total_bytes")) // n] * n
        backward = [float(d.pop("total_backward_us")) / n] * n
    if "bandwidth_gbps" in d:
        gbps = float(d.pop("bandwidth_gbps"))
        bandwidth = math.inf if math.isinf(gbps) else gbps * 1e9 / 8
    else:
        bandwidth = float(d.pop("bandwidth"))
    latency = float(d.pop("latency")) if "latency" in d else float(d.pop("latency_us", 0.0)) * 1e-6
    worlds = [int(p) for p in d.pop("world_sizes", [1])]
    thresholds = [float(t) for t in d.pop("thresholds", [])]
    cfg = SimConfig(
        backward_us=tuple(backward),
        layer_bytes=tuple(sizes),
        forward_us=float(d.pop("forward_us")),
        batch_per_rank=int(d.pop("batch_per_rank")),
        bandwidth=bandwidth,
        latency=latency,
        world_size=int(d.pop("world_size", 1)),
        threshold_bytes=float(d.pop("threshold_bytes", 4 * (1 << 20))),
        overlap=bool(d.pop("overlap", True)),
        step_us=float(d.pop("step_us", 0.0)),
        algorithm=str(d.pop("algorithm", "ring")),
    )
    d.pop("description", None)
    if d:
        raise ValueError(f"unknown simulator config keys: {sorted(d)}")
    return cfg, worlds, thresholds
