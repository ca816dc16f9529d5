"""Static gradient bucketing and group-ordered allreduce launching.

Segments are fused greedily in backward-completion order until a group
reaches the byte threshold.  Every rank builds the same plan locally from
the same segment table, so launches need no runtime agreement: a group is
launched once all its members finished backward and every lower-numbered
group has been launched.
"""

from __future__ import annotations

import json
import math
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

MIB = 1 << 20
DEFAULT_THRESHOLD = 4 * MIB
SCHEDULING_MODES = ("static", "dynamic-allgather", "none")


class EventKind(str, Enum):
    BACKWARD_DONE = "backward_done"
    GROUP_READY = "group_ready"
    ALLREDUCE_START = "allreduce_start"
    ALLREDUCE_END = "allreduce_end"
    STEP_APPLIED = "step_applied"


@dataclass(frozen=True)
class TraceEvent:
    timestamp: int
    kind: EventKind
    iteration: int
    segment: int | None = None
    group: int | None = None
    nbytes: int = 0
    rank: int = 0

    def to_json(self) -> str:
        rec = {"ts": self.timestamp, "kind": self.kind.value, "iter": self.iteration, "rank": self.rank}
        if self.segment is not None:
            rec["segment"] = self.segment
        if self.group is not None:
            rec["group"] = self.group
        if self.nbytes:
            rec["bytes"] = self.nbytes
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        rec = json.loads(line)
        return cls(rec["ts"], EventKind(rec["kind"]), rec["iter"], rec.get("segment"), rec.get("group"),
                   rec.get("bytes", 0), rec.get("rank", 0))


@dataclass(frozen=True)
class Group:
    gid: int
    members: tuple[int, ...]
    nbytes: int


@dataclass(frozen=True)
class BucketPlan:
    groups: tuple[Group, ...]
    threshold_bytes: float

    def group_of(self) -> dict[int, int]:
        return {seg: g.gid for g in self.groups for seg in g.members}

    @property
    def total_bytes(self) -> int:
        return sum(g.nbytes for g in self.groups)

    def __len__(self):
        return len(self.groups)


def make_buckets(segments: Sequence[tuple[int, int]], threshold_bytes: float = DEFAULT_THRESHOLD) -> BucketPlan:
    """Greedy fusion of ``(segment_id, nbytes)`` pairs given in backward order.

    A group closes as soon as its byte total reaches the threshold; the
    segments left at the end form one residual group.  ``math.inf`` puts
    everything into a single group.
    """
    if not segments:
        raise ValueError("cannot bucket an empty segment list")
    if not threshold_bytes > 0:
        raise ValueError(f"threshold_bytes must be positive, got {threshold_bytes}")
    groups = []
    members: list[int] = []
    total = 0
    for seg_id, nbytes in segments:
        members.append(seg_id)
        total += nbytes
        if total >= threshold_bytes:
            groups.append(Group(len(groups), tuple(members), total))
            members, total = [], 0
    if members:
        groups.append(Group(len(groups), tuple(members), total))
    return BucketPlan(tuple(groups), threshold_bytes)


def backward_order(segments, width: int = 4) -> list[tuple[int, int]]:
    """``(segment_id, nbytes)`` in the order backward finishes them (reverse offset)."""
    return [(i, seg.length * width) for i, seg in reversed(list(enumerate(segments)))]


class GroupScheduler:
    """Per-worker launcher for one plan.

    ``on_backward_done`` returns the groups that may be launched now, in
    group order.  Events are appended under a lock so that timestamps stay
    nondecreasing when a communication thread records alongside.
    """

    def __init__(self, plan: BucketPlan, rank: int = 0, clock: Callable[[], int] = time.monotonic_ns):
        self.plan = plan
        self.rank = rank
        self.clock = clock
        self.events: list[TraceEvent] = []
        self._lock = threading.Lock()
        self._group_of = plan.group_of()
        self.iteration = -1
        self.start_iteration(0)

    def record(self, kind: EventKind, *, segment=None, group=None, nbytes=0):
        with self._lock:
            self.events.append(TraceEvent(self.clock(), kind, self.iteration, segment, group, nbytes, self.rank))

    def start_iteration(self, iteration: int):
        self.iteration = iteration
        self._done: set[int] = set()
        self._remaining = {g.gid: len(g.members) for g in self.plan.groups}
        self._ready = [False] * len(self.plan.groups)
        self._next = 0

    def on_backward_done(self, segment: int) -> list[int]:
        if segment not in self._group_of:
            raise KeyError(f"segment {segment} is not part of the plan")
        if segment in self._done:
            raise ValueError(f"duplicate completion report for segment {segment} in iteration {self.iteration}")
        self._done.add(segment)
        self.record(EventKind.BACKWARD_DONE, segment=segment)
        gid = self._group_of[segment]
        self._remaining[gid] -= 1
        if self._remaining[gid] == 0:
            self._ready[gid] = True
            self.record(EventKind.GROUP_READY, group=gid)
        launch = []
        while self._next < len(self._ready) and self._ready[self._next]:
            launch.append(self._next)
            self._next += 1
        return launch

    @property
    def all_launched(self) -> bool:
        return self._next == len(self._ready)


class DynamicGrouper:
    """Runtime group discovery for the allgather-based baseline.

    After every completion report the caller gathers the ranks' pending
    masks; segments no rank is still working on are appended to the open
    group, which is launched once it reaches the threshold or nothing is
    left.  Realized groups are kept so the trace can be validated.
    """

    def __init__(self, order: Sequence[tuple[int, int]], threshold_bytes: float = DEFAULT_THRESHOLD):
        self.order = list(order)
        self.position = {seg: i for i, (seg, _) in enumerate(self.order)}
        self.nbytes = dict(self.order)
        self.threshold = threshold_bytes
        self.groups: list[Group] = []
        self.start_iteration()

    def start_iteration(self):
        self.pending = [True] * len(self.order)
        self._next_seg = 0
        self._open: list[int] = []
        self._open_bytes = 0
        self._iter_groups = 0

    def mark_done(self, segment: int):
        self.pending[self.position[segment]] = False

    def common_done(self, global_pending: Sequence[bool]) -> list[Group]:
        launches = []
        while self._next_seg < len(self.order) and not global_pending[self._next_seg]:
            seg, nbytes = self.order[self._next_seg]
            self._open.append(seg)
            self._open_bytes += nbytes
            self._next_seg += 1
            if self._open_bytes >= self.threshold or self._next_seg == len(self.order):
                g = Group(self._iter_groups, tuple(self._open), self._open_bytes)
                launches.append(g)
                if len(self.groups) <= self._iter_groups:
                    self.groups.append(g)
                self._iter_groups += 1
                self._open, self._open_bytes = [], 0
        return launches

    def realized_plan(self) -> BucketPlan:
        return BucketPlan(tuple(self.groups), self.threshold)


def validate_trace(events: Iterable[TraceEvent], plan: BucketPlan, segment_bytes: Mapping[int, int]) -> list[str]:
    """Check a trace against the overlap rules; returns violations, never raises.

    (a) a group's allreduce starts only after every member finished backward;
    (b) groups start in group order;
    (c) the step is applied after every allreduce ended;
    (d) bytes communicated per iteration equal the gradient bytes, with each
        segment in exactly one group.
    Timestamps must also be nondecreasing per rank.
    """
    violations = []
    try:
        events = list(events)
        total = sum(segment_bytes.values())
        counts = defaultdict(int)
        for g in plan.groups:
            for seg in g.members:
                counts[seg] += 1
        for seg in segment_bytes:
            if counts[seg] != 1:
                violations.append(f"(d) segment {seg} appears in {counts[seg]} groups")
        for seg in counts:
            if seg not in segment_bytes:
                violations.append(f"(d) plan references unknown segment {seg}")
        members = {g.gid: g.members for g in plan.groups}

        last_ts = {}
        for ev in events:
            if ev.timestamp < last_ts.get(ev.rank, -math.inf):
                violations.append(f"timestamps decrease on rank {ev.rank} at iteration {ev.iteration}")
                break
            last_ts[ev.rank] = ev.timestamp

        by_iter = defaultdict(list)
        for ev in events:
            by_iter[(ev.rank, ev.iteration)].append(ev)
        for (rank, it), evs in sorted(by_iter.items()):
            where = f"rank {rank} iteration {it}"
            done = {}
            started, ended = [], {}
            sent = 0
            step_ts = None
            for ev in evs:
                if ev.kind is EventKind.BACKWARD_DONE:
                    done[ev.segment] = ev.timestamp
                elif ev.kind is EventKind.ALLREDUCE_START:
                    missing = [s for s in members.get(ev.group, ()) if s not in done or done[s] > ev.timestamp]
                    if ev.group not in members:
                        violations.append(f"(a) {where}: unknown group {ev.group} started")
                    elif missing:
                        violations.append(f"(a) {where}: group {ev.group} started before backward of {missing}")
                    if started and ev.group <= started[-1]:
                        violations.append(f"(b) {where}: group {ev.group} started after group {started[-1]}")
                    started.append(ev.group)
                    sent += ev.nbytes
                elif ev.kind is EventKind.ALLREDUCE_END:
                    ended[ev.group] = ev.timestamp
                elif ev.kind is EventKind.STEP_APPLIED:
                    step_ts = ev.timestamp
            if step_ts is None:
                violations.append(f"(c) {where}: no step_applied event")
            else:
                late = [g for g in started if g not in ended or ended[g] > step_ts]
                if late:
                    violations.append(f"(c) {where}: step applied before allreduce of groups {late} ended")
            if sent != total:
                violations.append(f"(d) {where}: communicated {sent} bytes, gradient has {total}")
    except Exception as exc:  # malformed input is a violation, not a crash
        violations.append(f"malformed trace: {exc!r}")
    return violations


def dump_trace(events: Iterable[TraceEvent], fp) -> None:
    for ev in events:
        fp.write(ev.to_json() + "\n")


def load_trace(lines: Iterable[str]) -> list[TraceEvent]:
    return [TraceEvent.from_json(line) for line in lines if line.strip()]
