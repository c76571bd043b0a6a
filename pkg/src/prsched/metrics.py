"""Trace recording, run statistics and Gantt/CSV export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from statistics import fmean, pstdev
from typing import Iterable, Optional, Sequence

from .simcore import NS_PER_S

TRACE_TYPES = ("exec", "swap", "evict", "restore", "setup")

CSV_COLUMNS = (
    "seed", "scenario", "regions", "mode", "preemption", "size", "priority",
    "mean_service_s", "std_service_s", "throughput_tps", "makespan_s", "n_preemptions",
)


class IncompleteRunError(ValueError):
    pass


class UndefinedThroughputError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    """One interval of the Gantt timeline; times are integer nanoseconds."""

    region: int
    task: Optional[int]
    kernel: Optional[str]
    t_start: int
    t_end: int
    type: str
    preempted: bool = False

    def __post_init__(self):
        if self.type not in TRACE_TYPES:
            raise ValueError(f"unknown trace event type {self.type!r}")
        if not self.t_start < self.t_end:
            raise ValueError(f"empty or inverted interval {self.t_start}..{self.t_end}")

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


class TraceRecorder:
    """Append-only list of trace events; zero-length intervals are dropped."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def record(self, region, task, kernel, t_start, t_end, type, preempted=False):
        if t_end <= t_start:
            return None
        ev = TraceEvent(region, task, kernel, t_start, t_end, type, preempted)
        self.events.append(ev)
        return ev

    def finished(self) -> list[TraceEvent]:
        return sorted(self.events, key=lambda e: (e.t_start, e.region, e.t_end, e.type))


def exec_intervals(trace: Iterable[TraceEvent], task_id: int) -> list[TraceEvent]:
    return [e for e in trace if e.type == "exec" and e.task == task_id]


def completion_times(trace: Iterable[TraceEvent]) -> dict[int, int]:
    """Task id -> end of its non-preempted exec interval."""
    done = {}
    for e in trace:
        if e.type == "exec" and not e.preempted:
            done[e.task] = e.t_end
    return done


def service_times(trace: Sequence[TraceEvent], tasks, levels: Sequence[int] = range(5)
                  ) -> dict[int, tuple[Optional[float], Optional[float]]]:
    """Per-priority (mean, population std) of first-exec-start minus arrival, in s.

    Priorities in ``levels`` with no tasks map to ``(None, None)``.
    """
    first = {}
    for e in trace:
        if e.type == "exec" and e.task is not None:
            if e.task not in first or e.t_start < first[e.task]:
                first[e.task] = e.t_start
    by_prio: dict[int, list[float]] = {p: [] for p in levels}
    for t in tasks:
        if t.id not in first:
            raise IncompleteRunError(f"task {t.id} never executed")
        by_prio.setdefault(t.priority, []).append((first[t.id] - t.arrival) / NS_PER_S)
    return {p: ((fmean(v), pstdev(v)) if v else (None, None)) for p, v in sorted(by_prio.items())}


def throughput(trace: Sequence[TraceEvent]) -> float:
    done = completion_times(trace)
    if not done:
        raise UndefinedThroughputError("no task completed")
    return len(done) / (max(done.values()) / NS_PER_S)


def makespan(trace: Sequence[TraceEvent]) -> float:
    done = completion_times(trace)
    return max(done.values()) / NS_PER_S if done else 0.0


def overhead(tp_baseline: float, tp_variant: float) -> float:
    """Relative throughput loss of ``tp_variant`` against ``tp_baseline``."""
    if not tp_baseline > 0:
        raise ValueError("baseline throughput must be positive")
    return 1.0 - tp_variant / tp_baseline


@dataclass
class RunStats:
    service: dict[int, tuple[Optional[float], Optional[float]]]
    throughput: float
    makespan: float
    n_preemptions: int = 0
    n_evictions: int = 0
    n_partial_swaps: int = 0
    n_full_swaps: int = 0

    def mean_service(self, priority: int) -> Optional[float]:
        return self.service.get(priority, (None, None))[0]


def run_stats(trace, tasks, counters: Optional[dict] = None, levels=range(5)) -> RunStats:
    counters = counters or {}
    return RunStats(
        service=service_times(trace, tasks, levels),
        throughput=throughput(trace),
        makespan=makespan(trace),
        n_preemptions=counters.get("preemptions", 0),
        n_evictions=counters.get("evictions", 0),
        n_partial_swaps=counters.get("partial_swaps", 0),
        n_full_swaps=counters.get("full_swaps", 0),
    )


# -- export -----------------------------------------------------------------

def export_gantt(trace: Iterable[TraceEvent]) -> str:
    return json.dumps([asdict(e) for e in trace], indent=1)


def parse_gantt(text: str) -> list[TraceEvent]:
    names = [f.name for f in fields(TraceEvent)]
    return [TraceEvent(**{n: row[n] for n in names}) for row in json.loads(text)]


def _fmt(x: Optional[float], digits: int = 9) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}"


def stats_rows(key: dict, stats: RunStats) -> list[dict]:
    """One CSV row per priority level for a single simulation."""
    rows = []
    for prio, (mean, std) in sorted(stats.service.items()):
        rows.append({
            **key,
            "priority": prio,
            "mean_service_s": _fmt(mean),
            "std_service_s": _fmt(std),
            "throughput_tps": _fmt(stats.throughput),
            "makespan_s": _fmt(stats.makespan),
            "n_preemptions": stats.n_preemptions,
        })
    return rows


def export_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in CSV_COLUMNS})
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
