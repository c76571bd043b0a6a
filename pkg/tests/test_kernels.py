import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_filter, interrupted_run
from prsched.kernels import (KERNEL_SPECS, ContextMismatchError, InterfaceOverflowError,
                             KernelInstance, apply_filter, dump_image, load_image,
                             reference_image, register_kernel)

KERNELS = sorted(KERNEL_SPECS)


def rand_image(rng, h, w=None):
    return rng.integers(0, 256, size=(h, w or h), dtype=np.int32)


@pytest.mark.parametrize("kernel", KERNELS)
def test_filters_match_brute_force(kernel):
    rng = np.random.default_rng(11)
    for shape in ((4, 4), (5, 9), (8, 8), (3, 3)):
        img = rand_image(rng, *shape)
        assert apply_filter(kernel, img).tolist() == brute_filter(kernel, img.tolist())


def test_gauss_truncates_negative_values_toward_zero():
    img = np.array([[-1, -1, -1], [-1, -1, -1], [-1, -1, -2]], dtype=np.int32)
    assert apply_filter("Gauss1", img).tolist() == brute_filter("Gauss1", img.tolist())
    assert apply_filter("Gauss1", img)[0, 0] == -1


def test_med1_four_by_four_in_four_quanta():
    img = rand_image(np.random.default_rng(3), 4)
    inst = KernelInstance("Med1", img)
    assert inst.advance(4) == "finished"
    assert inst.output.tolist() == brute_filter("Med1", img.tolist())


def test_gauss_preserves_constant_image():
    img = np.full((6, 6), 77, dtype=np.int32)
    assert (apply_filter("Gauss1", img) == 77).all()


def test_single_steps_equal_one_big_step():
    img = rand_image(np.random.default_rng(5), 8)
    a = KernelInstance("Med3", img)
    while a.advance(1) == "running":
        pass
    b = KernelInstance("Med3", img)
    b.advance(b.total_quanta)
    assert np.array_equal(a.output, b.output)
    assert a.quanta_done == 24


def test_interface_padding():
    iface = register_kernel("MedianBlur", ["H", "W", "iters"], [], ["in", "out"])
    assert iface.dummy_counts == (5, 8, 1)
    assert iface.int_slots[3:] == tuple(f"i_args_{i}" for i in range(5))
    empty = register_kernel("Nop")
    assert empty.dummy_counts == (8, 8, 3)
    args = iface.pack([600, 600, 1], [], ["a", "b"])
    assert args["i_args_0"] == 0 and args["f_args_7"] == 0.0 and args["p_args_0"] is None
    assert "volatile struct context * context" in iface.signature()


def test_interface_overflow():
    with pytest.raises(InterfaceOverflowError):
        register_kernel("Big", [f"a{i}" for i in range(9)])
    with pytest.raises(InterfaceOverflowError):
        register_kernel("Bufs", [], [], ["a", "b", "c", "d"])
    register_kernel("Bufs4", [], [], ["a", "b", "c", "d"], buffer_capacity=4)


def test_fresh_save_has_nothing_checkpointed():
    inst = KernelInstance("Med1", np.zeros((8, 8), dtype=np.int32))
    ctx = inst.save_context()
    assert ctx.saved == (0, 0, 0, 0) and ctx.valid == 1
    assert [ctx.slot(i) for i in range(3)] == [0, 1, 1]
    inst.restore_context(ctx)
    assert inst.position == 0


def test_save_after_five_rows():
    img = rand_image(np.random.default_rng(8), 8)
    inst = KernelInstance("Med2", img)
    inst.advance(5)
    ctx = inst.save_context()
    assert (ctx.var[0], ctx.var[1], ctx.valid) == (0, 6, 1)
    torn = inst.save_context(mid_save=True)
    assert (torn.var[0], torn.var[1], torn.valid) == (0, 5, 0)
    inst.restore_context(torn)
    assert inst.position == 4 and inst.rollbacks == 1
    inst.advance(inst.total_quanta)
    assert np.array_equal(inst.output, apply_filter("Med2", img))


def test_cursor_crosses_iterations():
    inst = KernelInstance("Med3", np.zeros((4, 4), dtype=np.int32))
    inst.advance(6)
    ctx = inst.save_context()
    assert (ctx.var[0], ctx.var[1]) == (1, 3)
    inst.advance(6)
    assert inst.loop_state == (2, 5)


def test_restore_mismatch():
    a = KernelInstance("Med1", np.zeros((8, 8), dtype=np.int32))
    b = KernelInstance("Med2", np.zeros((8, 8), dtype=np.int32))
    c = KernelInstance("Med1", np.zeros((9, 9), dtype=np.int32))
    with pytest.raises(ContextMismatchError):
        b.restore_context(a.save_context())
    with pytest.raises(ContextMismatchError):
        c.restore_context(a.save_context())


def test_multipass_needs_three_rows():
    with pytest.raises(ValueError):
        KernelInstance("Med2", np.zeros((2, 5), dtype=np.int32))
    KernelInstance("Med1", np.zeros((2, 5), dtype=np.int32))


schedules = st.lists(st.tuples(st.integers(0, 40), st.booleans()), max_size=12)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KERNELS), st.integers(3, 12), st.integers(3, 12),
       st.integers(0, 2**32 - 1), schedules)
def test_preemption_transparency(kernel, h, w, seed, schedule):
    img = rand_image(np.random.default_rng(seed), h, w)
    inst = interrupted_run(kernel, img, schedule)
    assert np.array_equal(inst.output, apply_filter(kernel, img))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KERNELS), st.integers(0, 60), st.booleans())
def test_rollback_bound(kernel, quanta, torn):
    inst = KernelInstance(kernel, np.zeros((8, 8), dtype=np.int32))
    inst.advance(quanta)
    before = inst.position
    inst.restore_context(inst.save_context(mid_save=torn))
    assert before - (1 if torn else 0) <= inst.position <= before or before == 0


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(KERNELS), st.lists(st.integers(0, 9), max_size=10))
def test_committed_prefix_matches_reference(kernel, steps):
    img = rand_image(np.random.default_rng(1), 8)
    inst = KernelInstance(kernel, img)
    last = (0, 1)
    for s in steps:
        inst.advance(s)
        assert inst.loop_state >= last
        last = inst.loop_state
    if inst.iterations == 1:
        rows = inst.position
        assert np.array_equal(inst.output[:rows], apply_filter(kernel, img)[:rows])


def test_reference_image_deterministic_and_readonly():
    a = reference_image(123, 16)
    assert np.array_equal(a, reference_image(123, 16))
    assert a.min() >= 0 and a.max() <= 255
    assert not a.flags.writeable
    assert not np.array_equal(a, reference_image(124, 16))


def test_image_io_round_trip(tmp_path):
    img = rand_image(np.random.default_rng(2), 5, 7) - 100
    path = tmp_path / "img.bin"
    dump_image(path, img)
    raw = path.read_bytes()
    assert raw[:8] == (7).to_bytes(4, "little") + (5).to_bytes(4, "little")
    assert np.array_equal(load_image(path), img)
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        load_image(path)
