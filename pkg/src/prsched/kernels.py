"""Checkpointable 3x3 image filters.

Each kernel runs ``iterations`` passes over the image, one output row per
work quantum.  After every quantum the loop cursor ``(k, row)`` is committed,
so a preempted instance can be resumed from its last checkpoint.  Pixels are
32-bit signed integers and borders are replicated from the nearest pixel.

Multi-pass kernels ping-pong between the output and a scratch buffer.  A
pass never writes the buffer it reads, which makes re-running a row after a
rollback idempotent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .workload import taus_words

CONTEXT_CAPACITY = 4
SLOT_K, SLOT_ROW, SLOT_COL = 0, 1, 2

GAUSS_MASK = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.int64)
GAUSS_NORM = 16


class InterfaceOverflowError(ValueError):
    pass


class ContextMismatchError(ValueError):
    pass


# -- kernel interface -------------------------------------------------------

@dataclass(frozen=True)
class KernelInterface:
    """Uniform, shell-compliant argument layout for one kernel.

    User arguments fill a prefix of each slot class; the rest are dummies
    that are always passed as zero.
    """

    name: str
    int_slots: tuple[str, ...]
    float_slots: tuple[str, ...]
    buffer_slots: tuple[str, ...]
    n_user_ints: int
    n_user_floats: int
    n_user_buffers: int
    context_ref: str = "context"

    @property
    def dummy_counts(self) -> tuple[int, int, int]:
        return (len(self.int_slots) - self.n_user_ints,
                len(self.float_slots) - self.n_user_floats,
                len(self.buffer_slots) - self.n_user_buffers)

    def pack(self, ints: Sequence[int] = (), floats: Sequence[float] = (),
             buffers: Sequence[object] = ()) -> dict:
        if (len(ints), len(floats), len(buffers)) != (
                self.n_user_ints, self.n_user_floats, self.n_user_buffers):
            raise ValueError(f"{self.name}: wrong number of arguments")
        args = {}
        for slots, values, fill in ((self.int_slots, ints, 0),
                                    (self.float_slots, floats, 0.0),
                                    (self.buffer_slots, buffers, None)):
            for i, slot in enumerate(slots):
                args[slot] = values[i] if i < len(values) else fill
        args[self.context_ref] = None
        return args

    def signature(self) -> str:
        parts = [f"KHitTile_int {s}" for s in self.buffer_slots]
        parts += [f"int {s}" for s in self.int_slots]
        parts += [f"float {s}" for s in self.float_slots]
        parts += [f"volatile struct context * {self.context_ref}", "int * return_var"]
        return f"void {self.name}({', '.join(parts)});"


def register_kernel(name: str, int_args: Sequence[str] = (), float_args: Sequence[str] = (),
                    buffer_args: Sequence[str] = (), *, int_capacity: int = 8,
                    float_capacity: int = 8, buffer_capacity: int = 3) -> KernelInterface:
    for label, args, cap in (("int", int_args, int_capacity),
                             ("float", float_args, float_capacity),
                             ("buffer", buffer_args, buffer_capacity)):
        if len(args) > cap:
            raise InterfaceOverflowError(
                f"{name}: {len(args)} {label} arguments exceed the {cap} available slots")

    def pad(args, cap, prefix):
        return tuple(args) + tuple(f"{prefix}_{i}" for i in range(cap - len(args)))

    return KernelInterface(
        name=name,
        int_slots=pad(int_args, int_capacity, "i_args"),
        float_slots=pad(float_args, float_capacity, "f_args"),
        buffer_slots=pad(buffer_args, buffer_capacity, "p_args"),
        n_user_ints=len(int_args),
        n_user_floats=len(float_args),
        n_user_buffers=len(buffer_args),
    )


@dataclass(frozen=True)
class KernelSpec:
    name: str
    filter: str  # "gauss" | "median"
    iterations: int
    interface: KernelInterface


_GAUSS_IFACE = register_kernel("GaussianBlur", ["H", "W", "iters"], [], ["in_array", "out_array"])
_MEDIAN_IFACE = register_kernel("MedianBlur", ["H", "W", "iters"], [], ["in_array", "out_array"])

KERNEL_SPECS = {
    "Gauss1": KernelSpec("Gauss1", "gauss", 1, _GAUSS_IFACE),
    "Med1": KernelSpec("Med1", "median", 1, _MEDIAN_IFACE),
    "Med2": KernelSpec("Med2", "median", 2, _MEDIAN_IFACE),
    "Med3": KernelSpec("Med3", "median", 3, _MEDIAN_IFACE),
}


def iterations(kernel: str) -> int:
    return KERNEL_SPECS[kernel].iterations


# -- context record ---------------------------------------------------------

@dataclass(frozen=True)
class Context:
    var: tuple[int, ...]
    init_var: tuple[int, ...]
    incr_var: tuple[int, ...]
    saved: tuple[int, ...]
    valid: int
    kernel: str = ""
    width: int = 0
    height: int = 0

    def slot(self, i: int) -> int:
        """Value a resume reads for slot ``i``."""
        return self.var[i] if self.saved[i] else self.init_var[i]

    def to_dict(self) -> dict:
        return {"var": list(self.var), "init_var": list(self.init_var),
                "incr_var": list(self.incr_var), "saved": list(self.saved),
                "valid": self.valid, "kernel": self.kernel,
                "width": self.width, "height": self.height}


# -- filters ----------------------------------------------------------------

def _padded(src: np.ndarray) -> np.ndarray:
    return np.pad(src, 1, mode="edge")


def _filter_rows(kind: str, padded: np.ndarray, r0: int, r1: int) -> np.ndarray:
    """Filter image rows ``r0..r1-1`` (0-based) from an edge-padded source."""
    width = padded.shape[1] - 2
    views = [padded[r0 + dy:r1 + dy, dx:dx + width] for dy in range(3) for dx in range(3)]
    if kind == "median":
        return np.partition(np.stack(views), 4, axis=0)[4]
    acc = np.zeros((r1 - r0, width), dtype=np.int64)
    for (dy, dx), v in zip(np.ndindex(3, 3), views):
        acc += GAUSS_MASK[dy, dx] * v.astype(np.int64)
    # truncating division, matching C integer semantics
    out = np.where(acc >= 0, acc // GAUSS_NORM, -((-acc) // GAUSS_NORM))
    return out.astype(np.int32)


def apply_filter(kernel: str, image: np.ndarray) -> np.ndarray:
    """Run ``kernel`` to completion on ``image`` without checkpointing."""
    spec = KERNEL_SPECS[kernel]
    img = np.asarray(image, dtype=np.int32)
    for _ in range(spec.iterations):
        img = _filter_rows(spec.filter, _padded(img), 0, img.shape[0])
    return img


# -- resumable instance -----------------------------------------------------

class KernelInstance:
    """A kernel bound to its buffers, advancing one row per quantum."""

    def __init__(self, kernel: str, input: np.ndarray, capacity: int = CONTEXT_CAPACITY):
        if kernel not in KERNEL_SPECS:
            raise KeyError(f"unknown kernel {kernel!r}")
        if capacity < 3:
            raise ValueError("context needs at least 3 slots (k, row, col)")
        self.spec = KERNEL_SPECS[kernel]
        self.kernel = kernel
        self.input = np.asarray(input, dtype=np.int32)
        self.height, self.width = self.input.shape
        if self.spec.iterations > 1 and self.height < 3:
            raise ValueError("multi-pass kernels need images at least 3 rows high")
        self.capacity = capacity
        self.output = np.zeros_like(self.input)
        self.scratch = np.zeros_like(self.input) if self.spec.iterations > 1 else None
        self.position = 0  # committed quanta
        self.quanta_done = 0  # executed quanta, including re-runs
        self.rollbacks = 0
        self._pad: Optional[tuple[int, np.ndarray]] = None

    @property
    def interface(self) -> KernelInterface:
        return self.spec.interface

    @property
    def iterations(self) -> int:
        return self.spec.iterations

    @property
    def total_quanta(self) -> int:
        return self.spec.iterations * self.height

    @property
    def remaining_quanta(self) -> int:
        return self.total_quanta - self.position

    @property
    def finished(self) -> bool:
        return self.position >= self.total_quanta

    def cursor_of(self, position: int) -> tuple[int, int]:
        if position >= self.total_quanta:
            return self.iterations - 1, self.height + 1
        return position // self.height, position % self.height + 1

    @property
    def loop_state(self) -> tuple[int, int]:
        return self.cursor_of(self.position)

    def _dst(self, k: int) -> np.ndarray:
        return self.output if (self.iterations - 1 - k) % 2 == 0 else self.scratch

    def _src(self, k: int) -> np.ndarray:
        return self.input if k == 0 else self._dst(k - 1)

    def advance(self, quanta: int) -> str:
        """Execute up to ``quanta`` rows; returns ``"running"`` or ``"finished"``."""
        if quanta < 0:
            raise ValueError("quanta must be non-negative")
        while quanta > 0 and not self.finished:
            k, row = self.loop_state
            n = min(quanta, self.height - row + 1)
            if self._pad is None or self._pad[0] != k:
                self._pad = (k, _padded(self._src(k)))
            r0 = row - 1
            self._dst(k)[r0:r0 + n] = _filter_rows(self.spec.filter, self._pad[1], r0, r0 + n)
            self.position += n
            self.quanta_done += n
            quanta -= n
        if self.finished:
            self._pad = None
            return "finished"
        return "running"

    def _context_at(self, position: int, valid: int) -> Context:
        n = self.capacity
        init = [0] * n
        incr = [0] * n
        init[SLOT_K], init[SLOT_ROW], init[SLOT_COL] = 0, 1, 1
        incr[SLOT_K] = incr[SLOT_ROW] = incr[SLOT_COL] = 1
        var = list(init)
        saved = [0] * n
        if position > 0:
            k, row = self.cursor_of(position)
            # checkpoints commit at row boundaries, so the column restarts at 1
            var[SLOT_K], var[SLOT_ROW], var[SLOT_COL] = k, row, 1
            saved[SLOT_K] = saved[SLOT_ROW] = saved[SLOT_COL] = 1
        return Context(tuple(var), tuple(init), tuple(incr), tuple(saved), valid,
                       self.kernel, self.width, self.height)

    def save_context(self, mid_save: bool = False) -> Context:
        """Snapshot the committed cursor.

        A save torn by an asynchronous reset (``mid_save``) is flagged
        invalid and carries the checkpoint before the current one.
        """
        if mid_save:
            return self._context_at(max(self.position - 1, 0), valid=0)
        return self._context_at(self.position, valid=1)

    def restore_context(self, ctx: Context) -> "KernelInstance":
        if (ctx.kernel, ctx.width, ctx.height) != (self.kernel, self.width, self.height):
            raise ContextMismatchError(
                f"context for {ctx.kernel} {ctx.width}x{ctx.height} cannot resume "
                f"{self.kernel} {self.width}x{self.height}")
        if len(ctx.var) < 3:
            raise ContextMismatchError("context has fewer than 3 slots")
        k, row = ctx.slot(SLOT_K), ctx.slot(SLOT_ROW)
        if not (0 <= k < self.iterations and 1 <= row <= self.height + 1):
            raise ContextMismatchError(f"context cursor ({k}, {row}) out of range")
        position = min(k * self.height + row - 1, self.total_quanta)
        if not ctx.valid:
            self.rollbacks += 1
        self.position = position
        self._pad = None
        return self

    def release_scratch(self) -> None:
        self.scratch = None
        self._pad = None


# -- images -----------------------------------------------------------------

ROW_STRIDE = 0x61C88647


@lru_cache(maxsize=64)
def reference_image(seed: int, width: int, height: Optional[int] = None) -> np.ndarray:
    """Deterministic 8-bit-valued image filled from taus88 streams (one per row).

    The returned array is read-only and shared between callers.
    """
    height = width if height is None else height
    rows = (seed + np.arange(height, dtype=np.uint64) * ROW_STRIDE) & 0xFFFFFFFF
    img = (taus_words(rows, width) >> np.uint32(24)).astype(np.int32)
    img.flags.writeable = False
    return img


def dump_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<i4")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def load_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError("image file too short for header")
    w, h = struct.unpack_from("<ii", data)
    if w < 0 or h < 0 or len(data) != 8 + 4 * w * h:
        raise ValueError(f"image file size does not match {w}x{h} header")
    return np.frombuffer(data, dtype="<i4", offset=8).reshape(h, w).astype(np.int32)
