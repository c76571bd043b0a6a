import numpy as np
import pytest

from prsched.fabric import (EmptyBankError, Fabric, FabricFault, LockViolation, TimingModel)
from prsched.kernels import apply_filter, reference_image
from prsched.simcore import Engine, KernelCompletion, PreemptApplied, ReconfigDone
from prsched.workload import Task

MS = 1_000_000
Q600 = 120_000  # one 600-pixel row at 20 cycles/pixel and 100 MHz, in ns


class Harness:
    """Drives a Fabric with scripted actions, handling its events like a scheduler would."""

    def __init__(self, n_regions=2, functional=False, **kw):
        self.engine = Engine()
        self.fabric = Fabric(n_regions, TimingModel(), self.engine, functional=functional, **kw)
        self.done = {}
        self.reconfig_done = []

    def at(self, t, action):
        self.engine.schedule_event(t, action)

    def run(self):
        self.engine.run_until_idle(self._handle)

    def _handle(self, ev):
        k = ev.kind
        f = self.fabric
        if callable(k):
            k()
        elif isinstance(k, KernelCompletion):
            task = f.complete(k.region)
            self.done[task.id] = self.engine.now()
        elif isinstance(k, ReconfigDone):
            if k.region is None:
                f.finish_full()
                f.icap.release(f.icap.holder)
            else:
                f.finish_partial(k.region)
                f.icap.release(k.region)
            self.reconfig_done.append((k.region, self.engine.now()))
        elif isinstance(k, PreemptApplied):
            f.finish_save(k.region)

    def swap(self, rid, kernel):
        self.fabric.icap.request(rid)
        assert self.fabric.icap.grant_next() == rid
        self.fabric.reconfigure_partial(rid, kernel)


def task(tid, kernel="Med3", size=600, seed=0):
    return Task(tid, 0, 0, kernel, size, image_seed=seed)


def test_med3_600_duration():
    tm = TimingModel()
    # 3 passes x 600 rows x (600 px x 20 cycles / 1e8 Hz)
    assert tm.quantum_ns("Med3", 600) == Q600
    assert tm.task_ns("Med3", 600) == 216 * MS
    h = Harness(initial_kernels=("Med3",))
    h.at(0, lambda: h.fabric.launch(0, task(1)))
    h.run()
    assert h.done == {1: 216 * MS}


def test_resumed_half_task_costs_half_plus_restore():
    h = Harness(initial_kernels=("Med3",))
    t = task(1)
    h.at(0, lambda: h.fabric.launch(0, t))
    h.at(900 * Q600, lambda: h.fabric.preempt(0))
    h.at(200 * MS, lambda: h.fabric.launch(0, t))
    h.run()
    ctx = t.contexts[0]
    assert ctx.valid == 1 and (ctx.var[0], ctx.var[1]) == (1, 301)
    assert h.done[1] == 200 * MS + 10_000 + 900 * Q600


def test_preempt_inside_save_window_tears():
    h = Harness(initial_kernels=("Med3",))
    t = task(1)
    h.at(0, lambda: h.fabric.launch(0, t))
    h.at(5 * Q600 - 500, lambda: h.fabric.preempt(0))
    h.run()
    ctx = t.contexts[0]
    assert ctx.valid == 0
    assert (ctx.var[0], ctx.var[1]) == (0, 4)  # checkpoint of quantum 3, not 4
    assert h.fabric.counters["torn_saves"] == 1


def test_preempt_just_outside_window_is_clean():
    h = Harness(initial_kernels=("Med3",))
    t = task(1)
    h.at(0, lambda: h.fabric.launch(0, t))
    h.at(5 * Q600 - 1001, lambda: h.fabric.preempt(0))
    h.run()
    assert t.contexts[0].valid == 1 and t.contexts[0].var[1] == 5


def test_preempt_trace_and_save_latency():
    h = Harness(initial_kernels=("Med1",))
    t = task(1, "Med1")
    h.at(0, lambda: h.fabric.launch(0, t))
    h.at(10 * MS, lambda: h.fabric.preempt(0))
    h.run()
    kinds = [(e.type, e.t_start, e.t_end, e.preempted) for e in h.fabric.recorder.finished()]
    assert kinds == [("exec", 0, 10 * MS, True), ("evict", 10 * MS, 10 * MS + 10_000, False)]
    assert h.fabric.regions[0].status == "free"
    assert h.engine.log[-1].kind == PreemptApplied(0)


@pytest.mark.parametrize("kernel", ["Gauss1", "Med1", "Med2", "Med3"])
@pytest.mark.parametrize("cut", [1, 37_000, 5 * 3_200 - 400, 3 * 3_200 * 32 // 2])
def test_preempt_then_resume_is_bit_identical(kernel, cut):
    h = Harness(initial_kernels=(kernel,), functional=True)
    t = task(1, kernel, size=32, seed=9)
    h.at(0, lambda: h.fabric.launch(0, t))
    h.at(cut, lambda: h.fabric.region(0).status == "running" and h.fabric.preempt(0))
    h.at(50 * MS, lambda: t.state != "done" and h.fabric.launch(0, t))
    h.run()
    assert t.state == "done"
    expected = apply_filter(kernel, reference_image(9, 32))
    assert np.array_equal(h.fabric.instances[1].output, expected)


def test_partial_swap_leaves_other_region_running():
    h = Harness(initial_kernels=("Gauss1", "Med3"))
    h.at(0, lambda: h.fabric.launch(1, task(1)))
    h.at(MS, lambda: h.swap(0, "Med1"))
    h.run()
    assert h.done[1] == 216 * MS
    assert h.reconfig_done == [(0, 31 * MS)]
    assert h.fabric.regions[0].loaded_kernel == "Med1"


def test_reconfiguration_lock_serializes():
    h = Harness()
    f = h.fabric
    f.icap.request(0)
    f.icap.request(1)
    assert f.icap.grant_next() == 0
    with pytest.raises(LockViolation):
        f.reconfigure_partial(1, "Med1")
    f.reconfigure_partial(0, "Med1")

    def second():
        assert f.icap.grant_next() == 1
        f.reconfigure_partial(1, "Med2")

    h.at(30 * MS, second)
    h.run()
    assert h.reconfig_done == [(0, 30 * MS), (1, 60 * MS)]


def test_full_reconfiguration_contract():
    h = Harness(initial_kernels=("Med1", "Gauss1"))
    f = h.fabric
    f.icap.request("full")
    f.icap.grant_next()
    f.reconfigure_full({0: "Med2", 1: "Gauss1"})
    assert [r.status for r in f.regions] == ["halted", "halted"]
    h.run()
    assert h.reconfig_done == [(None, 140 * MS)]
    assert [r.loaded_kernel for r in f.regions] == ["Med2", "Gauss1"]
    types = sorted((e.region, e.type, e.t_start, e.t_end) for e in f.recorder.finished())
    assert types == [(0, "setup", 120 * MS, 140 * MS), (0, "swap", 0, 120 * MS),
                     (1, "setup", 120 * MS, 140 * MS), (1, "swap", 0, 120 * MS)]


def test_full_reconfiguration_rejects_running_region():
    h = Harness(initial_kernels=("Med1", "Med1"))
    h.fabric.launch(0, task(1, "Med1"))
    h.fabric.icap.request("full")
    h.fabric.icap.grant_next()
    with pytest.raises(FabricFault):
        h.fabric.reconfigure_full({0: "Med1", 1: "Med2"})


def test_faults():
    h = Harness(initial_kernels=("Med1",))
    with pytest.raises(FabricFault):
        h.fabric.preempt(0)
    with pytest.raises(FabricFault):
        h.fabric.launch(0, task(1, "Med2"))
    with pytest.raises(FabricFault):
        h.fabric.region(5)


def test_context_banks():
    h = Harness(initial_kernels=("Med1",), functional=True)
    f = h.fabric
    with pytest.raises(EmptyBankError):
        f.read_context_bank(0)
    inst = f.instance_for(task(1, "Med1", size=8))
    c1 = inst.save_context()
    inst.advance(3)
    c2 = inst.save_context()
    f.write_context_bank(0, c1)
    assert f.read_context_bank(0) == c1
    f.write_context_bank(0, c2)
    h.swap(0, "Med2")
    h.run()
    assert f.read_context_bank(0) == c2


def test_timing_model_config():
    tm = TimingModel.from_dict({"t_partial_reconfig": 0.01, "cycles_per_pixel": {"Med1": 5}})
    assert tm.cycles_per_pixel == {"Gauss1": 10, "Med1": 5, "Med2": 20, "Med3": 20}
    assert tm.ns("t_partial_reconfig") == 10 * MS
    with pytest.raises(ValueError):
        TimingModel.from_dict({"t_partial": 1})
    with pytest.raises(ValueError):
        TimingModel(t_full_reconfig=0.01)
    with pytest.raises(ValueError):
        TimingModel(t_ctx_save=-1)
    assert TimingModel.from_dict(TimingModel().to_dict()) == TimingModel()
