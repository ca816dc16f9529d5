"""MLPerf v0.5.0 style log lines.

Line shape::

    :::MLPv0.5.0 <model> <sec>.<9 digits> (<file>:<line>) <tag>[: <json value>]

Timestamps are handled as integer nanoseconds so that parsing and
differencing never loses digits to float rounding.
"""

from __future__ import annotations

import json
import re
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import IO, Iterable

PREFIX = ":::MLPv0.5.0"

LINE_RE = re.compile(
    r"^:::MLPv0\.5\.0 (?P<model>\S+) (?P<sec>\d+)\.(?P<frac>\d{9}) "
    r"\((?P<src>[^()]*:\d+)\) (?P<tag>[A-Za-z_][A-Za-z0-9_]*)(?:: (?P<value>.*))?$"
)


class LogParseError(ValueError):
    pass


def format_ts(ns: int) -> str:
    return f"{ns // 1_000_000_000}.{ns % 1_000_000_000:09d}"


def format_value(value) -> str:
    return json.dumps(value)


def _caller(depth: int) -> str:
    frame = sys._getframe(depth)
    return f"{frame.f_code.co_filename}:{frame.f_lineno}"


def emit_event(tag: str, value=None, *, ts_ns: int | None = None, model: str = "resnet",
               source: str | None = None) -> str:
    """Format one log line; ``value=None`` means the tag stands alone."""
    if not tag:
        raise ValueError("tag must be nonempty")
    if ts_ns is None:
        ts_ns = time.time_ns()
    if source is None:
        source = _caller(2)
    line = f"{PREFIX} {model} {format_ts(ts_ns)} ({source}) {tag}"
    if value is not None:
        line += f": {format_value(value)}"
    return line


class MlperfLogger:
    """Thread-safe sink that keeps timestamps strictly increasing.

    Wall-clock readings can repeat at nanosecond resolution or step
    backwards; the logger nudges such readings 1 ns past the previous line
    so event order is always recoverable from the timestamps.
    """

    def __init__(self, stream: IO[str] | None = None, model: str = "resnet", clock=time.time_ns,
                 after_ns: int = -1):
        self.stream = stream
        self.model = model
        self.clock = clock
        self.lines: list[str] = []
        self._last = after_ns
        self._lock = threading.Lock()

    @property
    def last_ns(self) -> int:
        return self._last

    def _write(self, line: str):
        self.lines.append(line)
        if self.stream is not None:
            self.stream.write(line + "\n")
            self.stream.flush()

    def log(self, tag: str, value=None) -> str:
        source = _caller(2)
        with self._lock:
            ts = max(self.clock(), self._last + 1)
            self._last = ts
            line = emit_event(tag, value, ts_ns=ts, model=self.model, source=source)
            self._write(line)
        return line

    def extend(self, lines: Iterable[str]) -> None:
        """Append lines produced by another logger (e.g. in a worker process)."""
        with self._lock:
            for line in lines:
                ts = parse_line(line).ts_ns
                if ts <= self._last:
                    raise ValueError("merged log lines must come after the lines already written")
                self._last = ts
                self._write(line)


@dataclass
class ParsedEvent:
    ts_ns: int
    tag: str
    value: object = None


@dataclass
class ParsedLog:
    events: list[ParsedEvent]
    run_start_ns: int
    run_final_ns: int
    accuracy: list[tuple[int, float]] = field(default_factory=list)

    @property
    def elapsed_ns(self) -> int:
        return self.run_final_ns - self.run_start_ns

    @property
    def elapsed(self) -> float:
        return self.elapsed_ns / 1e9

    @property
    def final_accuracy(self) -> float | None:
        return self.accuracy[-1][1] if self.accuracy else None


def parse_line(line: str) -> ParsedEvent:
    m = LINE_RE.match(line.rstrip("\n"))
    if m is None:
        raise LogParseError(f"not an MLPerf v0.5.0 line: {line!r}")
    value = m["value"]
    if value is not None:
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # keep non-JSON payloads verbatim
    return ParsedEvent(int(m["sec"]) * 1_000_000_000 + int(m["frac"]), m["tag"], value)


def parse_log(lines: Iterable[str]) -> ParsedLog:
    """Elapsed time (run_start to run_final) and the eval accuracy series.

    Lines that do not start with the MLPerf prefix are ignored, so a log
    with elisions or interleaved output still parses.
    """
    events = [parse_line(line) for line in lines if line.startswith(PREFIX)]
    starts = [e.ts_ns for e in events if e.tag == "run_start"]
    finals = [e.ts_ns for e in events if e.tag == "run_final"]
    if not starts:
        raise LogParseError("log has no run_start event")
    if not finals:
        raise LogParseError("log has no run_final event")
    acc = []
    for e in events:
        if e.tag == "eval_accuracy":
            if not isinstance(e.value, dict) or "epoch" not in e.value or "value" not in e.value:
                raise LogParseError(f"malformed eval_accuracy value {e.value!r}")
            acc.append((int(e.value["epoch"]), float(e.value["value"])))
    acc.sort(key=lambda p: p[0])
    return ParsedLog(events, starts[0], finals[-1], acc)
