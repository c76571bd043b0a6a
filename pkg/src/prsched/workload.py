"""Random workload generation driven by a combined Tausworthe generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np

from .simcore import NS_PER_S, seconds_to_ns

MASK32 = 0xFFFFFFFF
GOLDEN = 0x9E3779B9
KNUTH_MULT = 2654435761
WARMUP_DRAWS = 8

KERNEL_IDS = ("Gauss1", "Med1", "Med2", "Med3")

SCENARIOS = {"busy": 0.1, "medium": 0.5, "idle": 0.8}

STUDY_SEEDS = (
    28871727,
    1368297677,
    3968565823,
    1120249751,
    3706141637,
    1838770479,
    980516246,
    407297508,
    3820789643,
    1227911765,
)


class TausState(NamedTuple):
    s1: int
    s2: int
    s3: int

    def check(self) -> "TausState":
        if not (self.s1 > 1 and self.s2 > 7 and self.s3 > 15):
            raise ValueError(f"invalid taus88 state {self}")
        if max(self) > MASK32 or min(self) < 0:
            raise ValueError(f"taus88 words must be 32-bit unsigned: {self}")
        return self


def taus_next(state: TausState) -> tuple[int, TausState]:
    """Advance taus88 by one step, returning ``(word, new_state)``."""
    s1, s2, s3 = state
    b = (((s1 << 13) & MASK32) ^ s1) >> 19
    s1 = (((s1 & 0xFFFFFFFE) << 12) & MASK32) ^ b
    b = (((s2 << 2) & MASK32) ^ s2) >> 25
    s2 = (((s2 & 0xFFFFFFF8) << 4) & MASK32) ^ b
    b = (((s3 << 3) & MASK32) ^ s3) >> 11
    s3 = (((s3 & 0xFFFFFFF0) << 17) & MASK32) ^ b
    return s1 ^ s2 ^ s3, TausState(s1, s2, s3)


def _expand_seed(seed: int) -> TausState:
    seed &= MASK32
    s1 = seed
    s2 = seed ^ GOLDEN
    s3 = (seed * KNUTH_MULT) & MASK32
    if s1 <= 1:
        s1 += 2
    if s2 <= 7:
        s2 += 8
    if s3 <= 15:
        s3 += 16
    return TausState(s1, s2, s3)


def seed_state(seed: int) -> TausState:
    """Deterministically expand a 32-bit seed into a valid taus88 state."""
    state = _expand_seed(seed)
    for _ in range(WARMUP_DRAWS):
        _, state = taus_next(state)
    return state.check()


class Taus88:
    """Stateful convenience wrapper around :func:`taus_next`."""

    def __init__(self, seed: int):
        self.state = seed_state(seed)

    def next_u32(self) -> int:
        value, self.state = taus_next(self.state)
        return value

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by multiply-shift."""
        return (self.next_u32() * n) >> 32

    def random(self) -> float:
        return self.next_u32() / 2**32


def taus_words(seeds: np.ndarray, count: int) -> np.ndarray:
    """Run one taus88 stream per seed in lock-step.

    Returns a ``(len(seeds), count)`` uint32 array; row ``i`` equals the first
    ``count`` words of ``Taus88(seeds[i])``.
    """
    seeds = np.asarray(seeds, dtype=np.uint64) & MASK32
    s1 = seeds.astype(np.uint32)
    s2 = (seeds ^ GOLDEN).astype(np.uint32)
    s3 = ((seeds * KNUTH_MULT) & MASK32).astype(np.uint32)
    s1 = np.where(s1 <= 1, s1 + np.uint32(2), s1)
    s2 = np.where(s2 <= 7, s2 + np.uint32(8), s2)
    s3 = np.where(s3 <= 15, s3 + np.uint32(16), s3)
    out = np.empty((len(seeds), count), dtype=np.uint32)
    for i in range(WARMUP_DRAWS + count):
        b = ((s1 << np.uint32(13)) ^ s1) >> np.uint32(19)
        s1 = ((s1 & np.uint32(0xFFFFFFFE)) << np.uint32(12)) ^ b
        b = ((s2 << np.uint32(2)) ^ s2) >> np.uint32(25)
        s2 = ((s2 & np.uint32(0xFFFFFFF8)) << np.uint32(4)) ^ b
        b = ((s3 << np.uint32(3)) ^ s3) >> np.uint32(11)
        s3 = ((s3 & np.uint32(0xFFFFFFF0)) << np.uint32(17)) ^ b
        if i >= WARMUP_DRAWS:
            out[:, i - WARMUP_DRAWS] = s1 ^ s2 ^ s3
    return out


TASK_STATES = ("pending", "queued", "running", "preempted", "done")

_TRANSITIONS = {
    "pending": {"queued", "running"},
    "queued": {"running"},
    "running": {"preempted", "done"},
    # preempted -> running only for in-place resume after a full reconfiguration
    "preempted": {"queued", "running"},
    "done": set(),
}


@dataclass
class Task:
    id: int
    arrival: int  # ns
    priority: int
    kernel: str
    size: int
    state: str = "pending"
    progress: Any = None  # kernels.Context once preempted
    # simulation bookkeeping
    first_start: Optional[int] = None
    completion: Optional[int] = None
    n_preemptions: int = 0
    n_evictions: int = 0
    image_seed: int = 0
    contexts: list = field(default_factory=list)

    def move_to(self, state: str) -> None:
        if state == self.state:
            return
        if state not in _TRANSITIONS[self.state]:
            raise RuntimeError(f"task {self.id}: illegal transition {self.state} -> {state}")
        self.state = state

    @property
    def arrival_s(self) -> float:
        return self.arrival / NS_PER_S

    def fresh_copy(self) -> "Task":
        return Task(self.id, self.arrival, self.priority, self.kernel, self.size,
                    image_seed=self.image_seed)


@dataclass(frozen=True)
class WorkloadSpec:
    n_tasks: int = 30
    T: float = SCENARIOS["busy"]  # minutes
    priorities: tuple[int, int] = (0, 4)
    kernel_set: tuple[str, ...] = KERNEL_IDS
    image_size: int = 600

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.n_tasks < 0:
            raise ValueError("n_tasks must be non-negative")
        if not self.kernel_set:
            raise ValueError("kernel_set must not be empty")
        lo, hi = self.priorities
        if lo > hi or lo < 0:
            raise ValueError(f"bad priority range {self.priorities}")

    @property
    def window_ns(self) -> int:
        return seconds_to_ns(Decimal(str(self.T)) * 60)


def image_seed_for(seed: int, task_id: int) -> int:
    return (seed ^ ((task_id + 1) * GOLDEN)) & MASK32


def generate_workload(spec: WorkloadSpec, seed: int) -> list[Task]:
    """Draw ``spec.n_tasks`` tasks from a single taus88 stream.

    Per task the draws are consumed as arrival, priority, kernel; tasks are
    then sorted by arrival (stable) and numbered in that order.
    """
    rng = Taus88(seed)
    window = spec.window_ns
    lo, hi = spec.priorities
    levels = hi - lo + 1
    drawn = []
    for _ in range(spec.n_tasks):
        arrival = (rng.next_u32() * window) >> 32
        priority = lo + rng.below(levels)
        kernel = spec.kernel_set[rng.below(len(spec.kernel_set))]
        drawn.append((arrival, priority, kernel))
    drawn.sort(key=lambda d: d[0])
    return [
        Task(i, a, p, k, spec.image_size, image_seed=image_seed_for(seed, i))
        for i, (a, p, k) in enumerate(drawn)
    ]


def workload_to_json(tasks: Sequence[Task]) -> str:
    rows = [
        {"id": t.id, "arrival_s": t.arrival / NS_PER_S, "priority": t.priority,
         "kernel": t.kernel, "size": t.size}
        for t in tasks
    ]
    return json.dumps(rows, indent=1)


def workload_from_json(text: str, seed: int = 0) -> list[Task]:
    rows = json.loads(text, parse_float=Decimal)
    tasks = []
    for row in rows:
        missing = {"id", "arrival_s", "priority", "kernel", "size"} - set(row)
        if missing:
            raise ValueError(f"workload entry missing fields {sorted(missing)}")
        tid = int(row["id"])
        tasks.append(Task(tid, seconds_to_ns(row["arrival_s"]), int(row["priority"]),
                          str(row["kernel"]), int(row["size"]),
                          image_seed=image_seed_for(seed, tid)))
    tasks.sort(key=lambda t: (t.arrival, t.id))
    return tasks


def dump_workload(tasks: Sequence[Task], path) -> None:
    Path(path).write_text(workload_to_json(tasks) + "\n", encoding="utf-8")


def load_workload(path, seed: int = 0) -> list[Task]:
    return workload_from_json(Path(path).read_text(encoding="utf-8"), seed)
