"""Deterministic discrete-event engine.

Virtual time is an integer count of nanoseconds.  Events are ordered by
``(time, seq)`` where ``seq`` is assigned in submission order, so two events
at the same instant are dispatched first-in first-out.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Union

NS_PER_S = 1_000_000_000


def seconds_to_ns(value) -> int:
    """Convert seconds (int, float, str, Fraction) to integer nanoseconds.

    Floats go through their shortest decimal repr, so ``0.03`` becomes exactly
    30 000 000 ns rather than the nearest binary approximation.
    """
    if isinstance(value, float):
        value = repr(value)
    return round(Fraction(value) * NS_PER_S)


def ns_to_seconds(ns: int) -> float:
    return ns / NS_PER_S


@dataclass(frozen=True)
class TaskArrival:
    task_id: int


@dataclass(frozen=True)
class KernelCompletion:
    region: int


@dataclass(frozen=True)
class ReconfigDone:
    # None means a full-device reconfiguration (including the setup phase)
    region: Optional[int]


@dataclass(frozen=True)
class PreemptApplied:
    region: int


EventKind = Union[TaskArrival, KernelCompletion, ReconfigDone, PreemptApplied]


@dataclass(frozen=True, order=True)
class Event:
    time: int
    seq: int
    kind: EventKind


class SimulationError(RuntimeError):
    """A handler failed; ``recent`` holds the last dispatched events."""

    def __init__(self, message: str, recent: list[Event]):
        lines = [message, "recent events:"]
        lines += [f"  t={e.time}ns seq={e.seq} {e.kind}" for e in recent]
        super().__init__("\n".join(lines))
        self.recent = recent


class Engine:
    """Virtual clock plus an event heap.

    >>> eng = Engine()
    >>> _ = eng.schedule_event(5, TaskArrival(0))
    >>> eng.run_until_idle(lambda ev: None)
    5
    """

    def __init__(self, keep_log: bool = True):
        self._heap: list[Event] = []
        self._seq = 0
        self._now = 0
        self._cancelled: set[int] = set()
        self.keep_log = keep_log
        self.log: list[Event] = []

    def now(self) -> int:
        return self._now

    def schedule_event(self, t: int, kind: EventKind) -> int:
        if not isinstance(t, int):
            raise TypeError(f"virtual time must be integer ns, got {t!r}")
        if t < self._now:
            raise ValueError(f"cannot schedule {kind} at {t}ns, clock is at {self._now}ns")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, Event(t, seq, kind))
        return seq

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return len(self._heap) - sum(1 for e in self._heap if e.seq in self._cancelled)

    def run_until_idle(self, handler: Callable[[Event], None]) -> int:
        last = 0
        while self._heap:
            ev = heapq.heappop(self._heap)
            if ev.seq in self._cancelled:
                self._cancelled.discard(ev.seq)
                continue
            assert ev.time >= self._now, "event heap went backwards"
            self._now = ev.time
            last = ev.time
            if self.keep_log:
                self.log.append(ev)
            try:
                handler(ev)
            except SimulationError:
                raise
            except Exception as exc:
                recent = self.log[-20:] if self.keep_log else [ev]
                raise SimulationError(f"handler failed on {ev}: {exc!r}", recent) from exc
        return last
