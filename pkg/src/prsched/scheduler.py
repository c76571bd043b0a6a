"""FCFS preemptive priority scheduler over a simulated partially reconfigurable FPGA.

The main loop reacts to one stimulus per iteration: a task arrival (served
immediately) or a kernel-completion interrupt (free regions are refilled from
the priority queues).  Serving a task means

1. take a free region (lowest id first);
2. otherwise, with preemption on, take the region whose occupant has the
   lowest priority strictly below the incoming task's, stopping it and
   re-queueing it; without a victim the task is queued;
3. swap the region's kernel if it differs from the task's;
4. launch, restoring the saved context of a previously stopped task.

Swaps are internal operations serialized on the configuration port.  In
``full`` mode a swap evicts every other running kernel, rewrites the whole
device and resumes the evicted kernels in place afterwards.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .fabric import Fabric, TimingModel
from .kernels import KERNEL_SPECS
from .metrics import RunStats, TraceEvent, TraceRecorder, run_stats
from .simcore import (Engine, Event, KernelCompletion, PreemptApplied, ReconfigDone,
                      TaskArrival)
from .workload import Task

log = logging.getLogger(__name__)

MODES = ("partial", "full")


@dataclass(frozen=True)
class SchedulerConfig:
    mode: str = "partial"
    preemption: bool = True
    n_regions: int = 2
    requeue_front: bool = True
    priority_levels: int = 5
    initial_kernels: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_regions < 1:
            raise ValueError("n_regions must be at least 1")
        if self.priority_levels < 1:
            raise ValueError("priority_levels must be at least 1")


class PriorityQueues:
    """One FIFO per priority level; level 0 is served first."""

    def __init__(self, levels: int = 5):
        self._levels = [deque() for _ in range(levels)]

    def enqueue(self, task: Task, now: int = 0, front: bool = False) -> None:
        if not 0 <= task.priority < len(self._levels):
            raise ValueError(f"task {task.id} priority {task.priority} out of range")
        q = self._levels[task.priority]
        if front:
            q.appendleft((task, now))
        else:
            q.append((task, now))

    def dequeue_highest(self) -> Optional[Task]:
        for q in self._levels:
            if q:
                return q.popleft()[0]
        return None

    def best_priority(self) -> Optional[int]:
        for p, q in enumerate(self._levels):
            if q:
                return p
        return None

    def snapshot(self) -> list[list[int]]:
        return [[t.id for t, _ in q] for q in self._levels]

    def __len__(self) -> int:
        return sum(len(q) for q in self._levels)

    def __bool__(self) -> bool:
        return any(self._levels)


@dataclass
class _FullSwap:
    region: int
    kernel: str
    evicted: list = field(default_factory=list)
    started: bool = False


@dataclass
class SimulationResult:
    tasks: list[Task]
    trace: list[TraceEvent]
    counters: dict
    config: SchedulerConfig
    timing: TimingModel
    events: list[Event]
    outputs: dict = field(default_factory=dict)

    def stats(self) -> RunStats:
        return run_stats(self.trace, self.tasks, self.counters,
                         levels=range(self.config.priority_levels))

    @property
    def makespan_ns(self) -> int:
        return max(t.completion for t in self.tasks) if self.tasks else 0


class Scheduler:
    def __init__(self, config: SchedulerConfig = SchedulerConfig(),
                 timing: Optional[TimingModel] = None, *, functional: bool = True,
                 observer: Optional[Callable[["Scheduler", Event], None]] = None):
        self.config = config
        self.timing = timing or TimingModel()
        self.functional = functional
        self.observer = observer

    # -- main loop -----------------------------------------------------------

    def run(self, tasks: Iterable[Task]) -> SimulationResult:
        """Simulate ``tasks`` to completion and return the trace and task records."""
        tasks = [t.fresh_copy() for t in tasks]
        for t in tasks:
            if t.kernel not in KERNEL_SPECS:
                raise ValueError(f"task {t.id}: unknown kernel {t.kernel!r}")
        self.tasks = {t.id: t for t in tasks}
        if len(self.tasks) != len(tasks):
            raise ValueError("duplicate task ids")
        self._arrivals = sorted(tasks, key=lambda t: (t.arrival, t.id))
        self._next_arrival = 0
        self.engine = Engine()
        self.recorder = TraceRecorder()
        self.fabric = Fabric(self.config.n_regions, self.timing, self.engine, self.recorder,
                             functional=self.functional,
                             initial_kernels=self.config.initial_kernels)
        self.queues = PriorityQueues(self.config.priority_levels)
        self.occupant: list[Optional[Task]] = [None] * self.config.n_regions
        self.counters = {"displacements": 0}
        self._full: Optional[_FullSwap] = None
        self._in_place: set[int] = set()
        self._schedule_next_arrival()

        self.engine.run_until_idle(self._dispatch)

        unfinished = [t.id for t in tasks if t.state != "done"]
        if unfinished:
            raise RuntimeError(f"simulation drained with unfinished tasks {unfinished}")
        counters = {**self.fabric.counters, **self.counters}
        outputs = {}
        if self.functional:
            outputs = {tid: inst.output for tid, inst in self.fabric.instances.items()}
        return SimulationResult(
            tasks=sorted(tasks, key=lambda t: t.id),
            trace=self.recorder.finished(),
            counters=counters,
            config=self.config,
            timing=self.timing,
            events=list(self.engine.log),
            outputs=outputs,
        )

    main_loop = run

    def _schedule_next_arrival(self) -> None:
        if self._next_arrival < len(self._arrivals):
            task = self._arrivals[self._next_arrival]
            self._next_arrival += 1
            self.engine.schedule_event(max(task.arrival, self.engine.now()),
                                       TaskArrival(task.id))

    def _dispatch(self, ev: Event) -> None:
        kind = ev.kind
        if isinstance(kind, TaskArrival):
            self.serve_task(self.tasks[kind.task_id])
            self._schedule_next_arrival()
        elif isinstance(kind, KernelCompletion):
            self._complete(kind.region, cancel_event=False)
        elif isinstance(kind, ReconfigDone):
            if kind.region is None:
                self.fabric.finish_full()
                self.fabric.icap.release(self._full.region)
                self._full = None
            else:
                self.fabric.finish_partial(kind.region)
                self.fabric.icap.release(kind.region)
        elif isinstance(kind, PreemptApplied):
            self.fabric.finish_save(kind.region)
            if self._full is not None and not self._full.started:
                self._maybe_start_full_reconfig()
        self._pump()
        if self.observer is not None:
            self.observer(self, ev)

    def _complete(self, rid: int, cancel_event: bool) -> None:
        task = self.fabric.complete(rid, cancel_event=cancel_event)
        assert self.occupant[rid] is task
        self.occupant[rid] = None
        log.debug("t=%d task %d done on region %d", self.engine.now(), task.id, rid)

    def _harvest(self) -> None:
        """Retire kernels whose completion interrupt is due at this instant."""
        now = self.engine.now()
        for reg in self.fabric.regions:
            if reg.status == "running" and reg.exec.end <= now:
                self._complete(reg.id, cancel_event=True)

    def _pump(self) -> None:
        progress = True
        while progress:
            progress = False
            for rid in range(self.config.n_regions):
                if self._available(rid) and self.queues:
                    self.serve_task(self.queues.dequeue_highest())
                    progress = True
            for rid in range(self.config.n_regions):
                progress |= self._advance_region(rid)
            progress |= self._grant_port()

    # -- serving -------------------------------------------------------------

    def _available(self, rid: int) -> bool:
        reg = self.fabric.regions[rid]
        return self.occupant[rid] is None and reg.status == "free" and not reg.saving

    def serve_task(self, task: Task) -> str:
        """Place ``task`` on a region or in the queues; returns the action taken."""
        self._harvest()
        now = self.engine.now()
        rid = next((r for r in range(self.config.n_regions) if self._available(r)), None)
        action = "launched"
        if rid is None:
            rid = self._choose_victim(task) if self.config.preemption else None
            if rid is None:
                if task.state == "pending":
                    task.move_to("queued")
                self.queues.enqueue(task, now)
                return "enqueued"
            self._displace(rid)
            action = "preempted-and-launched"
        self.occupant[rid] = task
        self._advance_region(rid)
        if task.state == "pending":
            task.move_to("queued")
        return action

    def _choose_victim(self, task: Task) -> Optional[int]:
        best = None
        for rid, occ in enumerate(self.occupant):
            if occ is None or occ.priority <= task.priority:
                continue
            key = (-occ.priority, rid)
            if best is None or key < best:
                best = key
        return None if best is None else best[1]

    def _displace(self, rid: int) -> None:
        victim = self.occupant[rid]
        reg = self.fabric.regions[rid]
        if reg.status == "running":
            self.fabric.preempt(rid)
        else:
            # reserved but not started: waiting on a save, the port or a swap
            self.counters["displacements"] += 1
        self._in_place.discard(victim.id)
        self.occupant[rid] = None
        victim.move_to("queued")
        self.queues.enqueue(victim, self.engine.now(), front=self.config.requeue_front)

    def _advance_region(self, rid: int) -> bool:
        occ = self.occupant[rid]
        reg = self.fabric.regions[rid]
        if occ is None or reg.status != "free" or reg.saving or self._full is not None:
            return False
        if reg.loaded_kernel != occ.kernel:
            port = self.fabric.icap
            if port.holder != rid and rid not in port.waiting:
                port.request(rid)
                return True
            return False
        in_place = occ.id in self._in_place
        self._in_place.discard(occ.id)
        self.fabric.launch(rid, occ, in_place=in_place)
        return True

    # -- swapping ------------------------------------------------------------

    def _grant_port(self) -> bool:
        port = self.fabric.icap
        while port.holder is None and port.waiting:
            rid = port.grant_next()
            occ = self.occupant[rid]
            reg = self.fabric.regions[rid]
            if occ is None or reg.status != "free" or reg.saving or reg.loaded_kernel == occ.kernel:
                port.release(rid)
                continue
            self.swap(rid, occ)
            return True
        return False

    def swap(self, rid: int, task: Task) -> None:
        """Load ``task``'s kernel into region ``rid``; the caller holds the port."""
        if self.config.mode == "partial":
            self.fabric.library.get_partial_bitstream(task.kernel)
            self.fabric.reconfigure_partial(rid, task.kernel)
            return
        self._harvest()
        self._full = _FullSwap(rid, task.kernel)
        for reg in self.fabric.regions:
            if reg.id != rid and reg.status == "running":
                occ = self.occupant[reg.id]
                self.fabric.preempt(reg.id, evict=True)
                self._in_place.add(occ.id)
                self._full.evicted.append(reg.id)
        self._maybe_start_full_reconfig()

    def _maybe_start_full_reconfig(self) -> None:
        fs = self._full
        if any(reg.saving for reg in self.fabric.regions):
            return
        assignment = {reg.id: reg.loaded_kernel for reg in self.fabric.regions}
        assignment[fs.region] = fs.kernel
        self.fabric.library.get_full_bitstream(assignment)
        self.fabric.reconfigure_full(assignment)
        fs.started = True


def simulate(tasks: Iterable[Task], config: SchedulerConfig = SchedulerConfig(),
             timing: Optional[TimingModel] = None, **kwargs) -> SimulationResult:
    return Scheduler(config, timing, **kwargs).run(tasks)
