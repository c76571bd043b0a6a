"""Simulated FPGA: reconfigurable regions, the configuration port and context banks.

Everything here happens in virtual time.  The fabric never decides *what* to
run; it executes launch/preempt/reconfigure requests from the scheduler,
schedules the resulting completion events, and records the trace.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .kernels import Context, KernelInstance, iterations, reference_image
from .metrics import TraceRecorder
from .simcore import (NS_PER_S, Engine, KernelCompletion, PreemptApplied, ReconfigDone,
                      seconds_to_ns)
from .workload import Task

REGION_STATES = ("free", "running", "reconfiguring", "halted")

DEFAULT_CYCLES = {"Gauss1": 10, "Med1": 20, "Med2": 20, "Med3": 20}


class FabricFault(RuntimeError):
    """A request violated a device precondition (a scheduler bug)."""


class LockViolation(FabricFault):
    pass


class EmptyBankError(LookupError):
    pass


@dataclass(frozen=True)
class TimingModel:
    """Latency constants, in seconds except for the clock in Hz."""

    f_clk: float = 1e8
    cycles_per_pixel: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_CYCLES))
    t_partial_reconfig: float = 0.030
    t_full_reconfig: float = 0.120
    t_setup_fpga: float = 0.020
    t_ctx_save: float = 1e-5
    t_ctx_restore: float = 1e-5
    save_window: float = 1e-6

    def __post_init__(self):
        if not self.f_clk > 0:
            raise ValueError("f_clk must be positive")
        for name in ("t_partial_reconfig", "t_full_reconfig", "t_setup_fpga",
                     "t_ctx_save", "t_ctx_restore", "save_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.t_full_reconfig > self.t_partial_reconfig:
            raise ValueError("full reconfiguration must take longer than a partial one")
        if any(c <= 0 for c in self.cycles_per_pixel.values()):
            raise ValueError("cycles_per_pixel must be positive")

    @classmethod
    def from_dict(cls, data: Mapping) -> "TimingModel":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown timing keys: {sorted(unknown)}")
        data = dict(data)
        if "cycles_per_pixel" in data:
            data["cycles_per_pixel"] = {**DEFAULT_CYCLES, **data["cycles_per_pixel"]}
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TimingModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["cycles_per_pixel"] = dict(self.cycles_per_pixel)
        return d

    def ns(self, name: str) -> int:
        return seconds_to_ns(getattr(self, name))

    def quantum_ns(self, kernel: str, width: int) -> int:
        """Time for one row of one pass."""
        cycles = width * self.cycles_per_pixel[kernel]
        f = Fraction(repr(self.f_clk)) if isinstance(self.f_clk, float) else Fraction(self.f_clk)
        return round(Fraction(cycles * NS_PER_S) / f)

    def task_ns(self, kernel: str, size: int) -> int:
        return iterations(kernel) * size * self.quantum_ns(kernel, size)


class BitstreamLibrary:
    """Partial bitstream per kernel; full bitstreams per assignment, built lazily."""

    def __init__(self, kernels):
        self.partial = {k: f"partial/{k}.bit" for k in kernels}
        self.full: dict[tuple, str] = {}

    def get_partial_bitstream(self, kernel: str) -> str:
        try:
            return self.partial[kernel]
        except KeyError:
            raise FabricFault(f"no partial bitstream for {kernel!r}") from None

    def get_full_bitstream(self, assignment: Mapping[int, Optional[str]]) -> str:
        key = tuple(sorted(assignment.items()))
        if key not in self.full:
            name = "_".join(f"rr{r}-{k or 'empty'}" for r, k in key)
            self.full[key] = f"full/{name}.bit"
        return self.full[key]


class ReconfigLock:
    """The single configuration port, granted first-come first-served."""

    def __init__(self):
        self.holder = None
        self.waiting: deque = deque()

    def request(self, who) -> None:
        if who == self.holder or who in self.waiting:
            return
        self.waiting.append(who)

    def grant_next(self):
        if self.holder is not None:
            raise LockViolation(f"lock still held by {self.holder}")
        self.holder = self.waiting.popleft()
        return self.holder

    def release(self, who) -> None:
        if self.holder != who:
            raise LockViolation(f"{who} released a lock held by {self.holder}")
        self.holder = None


@dataclass
class _Exec:
    task: Task
    start: int
    compute_start: int
    quantum: int
    remaining: int
    end: int
    event_id: int
    in_place: bool


@dataclass
class Region:
    id: int
    loaded_kernel: Optional[str] = None
    status: str = "free"
    current: Optional[KernelInstance] = None
    current_task: Optional[int] = None
    saving: bool = False
    exec: Optional[_Exec] = None
    pending_kernel: Optional[str] = None

    def check(self) -> None:
        assert self.status in REGION_STATES
        if self.status == "running":
            assert self.current is not None and self.current_task is not None


class Fabric:
    def __init__(self, n_regions: int, timing: TimingModel, engine: Engine,
                 recorder: Optional[TraceRecorder] = None, *, functional: bool = True,
                 initial_kernels=(), kernels=None):
        if n_regions < 1:
            raise ValueError("need at least one region")
        self.timing = timing
        self.engine = engine
        self.recorder = recorder if recorder is not None else TraceRecorder()
        self.functional = functional
        self.regions = [Region(i) for i in range(n_regions)]
        for r, k in zip(self.regions, initial_kernels):
            r.loaded_kernel = k
        self.icap = ReconfigLock()
        self.library = BitstreamLibrary(kernels or timing.cycles_per_pixel.keys())
        self.instances: dict[int, KernelInstance] = {}
        self._banks: dict[int, Context] = {}
        self._inflight = None  # region id, "full", or None
        self._full_assignment: Optional[dict] = None
        self.counters = {"preemptions": 0, "evictions": 0, "torn_saves": 0,
                         "partial_swaps": 0, "full_swaps": 0}
        self._q_cache: dict[tuple[str, int], int] = {}
        self._t = {n: timing.ns(n) for n in ("t_partial_reconfig", "t_full_reconfig",
                                             "t_setup_fpga", "t_ctx_save", "t_ctx_restore",
                                             "save_window")}

    # -- helpers -------------------------------------------------------------

    def now(self) -> int:
        return self.engine.now()

    def quantum_ns(self, kernel: str, width: int) -> int:
        key = (kernel, width)
        if key not in self._q_cache:
            self._q_cache[key] = self.timing.quantum_ns(kernel, width)
        return self._q_cache[key]

    def region(self, rid: int) -> Region:
        try:
            return self.regions[rid]
        except (IndexError, TypeError):
            raise FabricFault(f"no region {rid!r}") from None

    def instance_for(self, task: Task) -> KernelInstance:
        inst = self.instances.get(task.id)
        if inst is None:
            if self.functional:
                inst = KernelInstance(task.kernel, reference_image(task.image_seed, task.size))
            else:
                inst = _CursorInstance(task.kernel, task.size)
            self.instances[task.id] = inst
        return inst

    @property
    def reconfig_in_flight(self):
        return self._inflight

    # -- context banks -------------------------------------------------------

    def write_context_bank(self, rid: int, ctx: Context) -> None:
        self.region(rid)
        self._banks[rid] = ctx

    def read_context_bank(self, rid: int) -> Context:
        self.region(rid)
        try:
            return self._banks[rid]
        except KeyError:
            raise EmptyBankError(f"context bank of region {rid} was never written") from None

    # -- reconfiguration -----------------------------------------------------

    def _claim_port(self, who) -> None:
        if self._inflight is not None:
            raise LockViolation(f"reconfiguration already in flight ({self._inflight})")
        if self.icap.holder is None or (who != "full" and self.icap.holder != who):
            raise LockViolation(f"{who} reconfigures without holding the port "
                                f"(holder: {self.icap.holder})")

    def reconfigure_partial(self, rid: int, kernel: str) -> int:
        """Swap one region's kernel; other regions keep running."""
        reg = self.region(rid)
        self._claim_port(rid)
        if reg.status != "free" or reg.saving:
            raise FabricFault(f"region {rid} is {reg.status}, cannot reconfigure")
        self.library.get_partial_bitstream(kernel)
        now = self.now()
        end = now + self._t["t_partial_reconfig"]
        self._inflight = rid
        reg.status = "reconfiguring"
        reg.pending_kernel = kernel
        self.counters["partial_swaps"] += 1
        self.recorder.record(rid, None, kernel, now, end, "swap")
        self.engine.schedule_event(end, ReconfigDone(rid))
        return end

    def finish_partial(self, rid: int) -> None:
        reg = self.region(rid)
        if self._inflight != rid or reg.status != "reconfiguring":
            raise FabricFault(f"unexpected reconfiguration completion on region {rid}")
        reg.loaded_kernel = reg.pending_kernel
        reg.pending_kernel = None
        reg.status = "free"
        self._inflight = None

    def reconfigure_full(self, assignment: Mapping[int, Optional[str]]) -> int:
        """Rewrite the whole device, then run the setup phase; every region halts."""
        self._claim_port("full")
        busy = [r.id for r in self.regions if r.status != "free" or r.saving]
        if busy:
            raise FabricFault(f"full reconfiguration with busy regions {busy}")
        if set(assignment) != {r.id for r in self.regions}:
            raise FabricFault("assignment must cover every region")
        self.library.get_full_bitstream(assignment)
        now = self.now()
        t_swap = now + self._t["t_full_reconfig"]
        end = t_swap + self._t["t_setup_fpga"]
        self._inflight = "full"
        self._full_assignment = dict(assignment)
        self.counters["full_swaps"] += 1
        for reg in self.regions:
            reg.status = "halted"
            kernel = assignment[reg.id]
            self.recorder.record(reg.id, None, kernel, now, t_swap, "swap")
            self.recorder.record(reg.id, None, kernel, t_swap, end, "setup")
        self.engine.schedule_event(end, ReconfigDone(None))
        return end

    def finish_full(self) -> None:
        if self._inflight != "full":
            raise FabricFault("unexpected full reconfiguration completion")
        for reg in self.regions:
            reg.loaded_kernel = self._full_assignment[reg.id]
            reg.status = "free"
        self._inflight = None
        self._full_assignment = None

    # -- execution -----------------------------------------------------------

    def launch(self, rid: int, task: Task, in_place: bool = False) -> int:
        """Start (or resume) ``task`` on region ``rid``; returns the completion time."""
        reg = self.region(rid)
        if reg.status != "free" or reg.saving:
            raise FabricFault(f"launch on region {rid} while {reg.status}")
        if reg.loaded_kernel != task.kernel:
            raise FabricFault(f"region {rid} holds {reg.loaded_kernel}, task {task.id} "
                              f"needs {task.kernel}")
        now = self.now()
        inst = self.instance_for(task)
        restore = 0
        if task.progress is not None:
            # context goes back to the device before the kernel restarts
            self.write_context_bank(rid, task.progress)
            inst.restore_context(self.read_context_bank(rid))
            restore = self._t["t_ctx_restore"]
        q = self.quantum_ns(task.kernel, inst.width)
        compute_start = now + restore
        end = compute_start + inst.remaining_quanta * q
        eid = self.engine.schedule_event(end, KernelCompletion(rid))
        reg.exec = _Exec(task, now, compute_start, q, inst.remaining_quanta, end, eid, in_place)
        reg.status = "running"
        reg.current = inst
        reg.current_task = task.id
        task.move_to("running")
        if task.first_start is None:
            task.first_start = now
        return end

    def _close(self, reg: Region, now: int, preempted: bool) -> None:
        ex = reg.exec
        t = ex.task
        rec = self.recorder
        if ex.in_place:
            rec.record(reg.id, t.id, t.kernel, ex.start, min(now, ex.compute_start), "restore")
            rec.record(reg.id, t.id, t.kernel, ex.compute_start, now, "exec", preempted)
        else:
            rec.record(reg.id, t.id, t.kernel, ex.start, now, "exec", preempted)
        reg.exec = None
        reg.current = None
        reg.current_task = None
        reg.status = "free"

    def complete(self, rid: int, cancel_event: bool = False) -> Task:
        reg = self.region(rid)
        ex = reg.exec
        now = self.now()
        if reg.status != "running" or ex is None or ex.end != now:
            raise FabricFault(f"spurious completion on region {rid}")
        if cancel_event:
            self.engine.cancel(ex.event_id)
        inst = reg.current
        if inst.advance(ex.remaining) != "finished":
            raise FabricFault(f"task {ex.task.id} not finished at its completion time")
        task = ex.task
        self._close(reg, now, preempted=False)
        task.move_to("done")
        task.completion = now
        inst.release_scratch()
        return task

    def preempt(self, rid: int, evict: bool = False) -> Context:
        """Asynchronously reset a running region and save its context.

        Progress is truncated to the last committed checkpoint.  If the reset
        lands inside the save window at the end of a quantum, the save is torn.
        """
        reg = self.region(rid)
        if reg.status != "running":
            raise FabricFault(f"cannot preempt region {rid}: {reg.status}")
        ex = reg.exec
        now = self.now()
        q = ex.quantum
        sigma = self._t["save_window"]
        elapsed = now - ex.compute_start
        torn = False
        gained = 0
        if elapsed > 0:
            gained = min(ex.remaining, elapsed // q)
            offset = elapsed - gained * q
            torn = gained < ex.remaining and sigma > 0 and offset >= q - sigma
        inst = reg.current
        inst.advance(gained)
        ctx = inst.save_context(mid_save=torn)
        self.engine.cancel(ex.event_id)
        task = ex.task
        self._close(reg, now, preempted=True)
        self.write_context_bank(rid, ctx)
        task.progress = ctx
        task.contexts.append(ctx)
        task.move_to("preempted")
        if evict:
            task.n_evictions += 1
            self.counters["evictions"] += 1
        else:
            task.n_preemptions += 1
            self.counters["preemptions"] += 1
        if torn:
            self.counters["torn_saves"] += 1
        done = now + self._t["t_ctx_save"]
        self.recorder.record(rid, task.id, task.kernel, now, done, "evict")
        reg.status = "halted"
        reg.saving = True
        self.engine.schedule_event(done, PreemptApplied(rid))
        return ctx

    def finish_save(self, rid: int) -> None:
        reg = self.region(rid)
        if not reg.saving:
            raise FabricFault(f"no context save in flight on region {rid}")
        reg.saving = False
        reg.status = "free"


class _CursorInstance(KernelInstance):
    """Timing-only instance: tracks the loop cursor without pixel buffers."""

    def __init__(self, kernel: str, size: int):
        super().__init__(kernel, np.zeros((3, 3), dtype=np.int32))
        self.input = self.output = None
        self.scratch = None
        self.height = self.width = size

    def advance(self, quanta: int) -> str:
        if quanta < 0:
            raise ValueError("quanta must be non-negative")
        step = min(quanta, self.remaining_quanta)
        self.position += step
        self.quanta_done += step
        return "finished" if self.finished else "running"
