"""Dense tensors, the gradient tape, and the allocation tracker.

A :class:`Tensor` wraps a read-only, C-contiguous numpy array of float32 or
float64.  Differentiable operations record themselves on the innermost active
:class:`Tape` (see :func:`Tape.__enter__`); outside of any tape nothing is
recorded and intermediates are released as soon as they go out of scope.

Every tensor charges its byte size to the current :class:`MemoryTracker` on
construction and refunds it on destruction, which gives a high-water mark of
live tensor storage without touching the numpy allocator.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from ..errors import ContractError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


class MemoryTracker:
    """Live-byte counter with a resettable high-water mark."""

    __slots__ = ("live", "peak")

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live


_GLOBAL_TRACKER = MemoryTracker()


def current_tracker() -> MemoryTracker:
    stack = getattr(_local, "trackers", None)
    return stack[-1] if stack else _GLOBAL_TRACKER


@contextmanager
def track_memory(tracker: MemoryTracker | None = None) -> Iterator[MemoryTracker]:
    """Charge tensors created inside the block to ``tracker`` (thread-local)."""
    tracker = tracker if tracker is not None else MemoryTracker()
    stack = getattr(_local, "trackers", None)
    if stack is None:
        stack = _local.trackers = []
    stack.append(tracker)
    try:
        yield tracker
    finally:
        stack.pop()


def _as_float_array(data, dtype) -> np.ndarray:
    if dtype is not None:
        dtype = np.dtype(dtype)
    elif isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
        dtype = data.dtype
    else:
        dtype = np.dtype(np.float32)
    if dtype not in FLOAT_DTYPES:
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.base is not None or arr is data:
        # never freeze an array the caller still owns
        arr = arr.copy()
    return arr


class Tensor:
    """Immutable dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tracker", "_nbytes", "_base", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool, shared: bool = False, base: "Tensor | None" = None) -> None:
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracker = current_tracker()
        # a view costs nothing extra but keeps its base (and the base's charge) alive
        self._base = None
        if shared and base is not None:
            self._base = base._base if base._base is not None else base
        self._nbytes = 0 if shared else arr.nbytes
        self._tracker.alloc(self._nbytes)

    @classmethod
    def _wrap(
        cls, arr: np.ndarray, requires_grad: bool = False, shared: bool = False, base: "Tensor | None" = None
    ) -> "Tensor":
        # internal fast path: ``arr`` is freshly produced by an op
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        elif not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
            shared = False
        t = object.__new__(cls)
        t._init(arr, requires_grad, shared, base)
        return t

    def __del__(self):
        try:
            self._tracker.free(self._nbytes)
        except AttributeError:
            pass

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def _holds(self, nbytes: int) -> None:
        """Charge extra bytes (saved buffers) to this tensor's lifetime."""
        self._nbytes += nbytes
        self._tracker.alloc(nbytes)

    def detach(self) -> "Tensor":
        t = object.__new__(Tensor)
        t._init(self.data, False, shared=True, base=self)
        return t

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return _ops().swapaxes(self, a, b)

    @property
    def T(self):
        return _ops().swapaxes(self, -1, -2)


_OPS = None


def _ops():
    global _OPS
    if _OPS is None:
        from . import ops

        _OPS = ops
    return _OPS


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations (a Wengert list).

    Use as a context manager; operations whose inputs require gradients are
    appended in execution order while the tape is active.  Tapes nest, the
    innermost one records.
    """

    __slots__ = ("nodes", "_produced")

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self._produced: set[int] = set()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        self.nodes.append((out, inputs, vjp))
        self._produced.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if t.requires_grad and id(t) not in self._produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()


def active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording inside the block."""
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Every requires-grad leaf seen on the tape (plus anything in ``wrt``) gets
    its ``.grad`` set; leaves the loss does not depend on get zeros.  Returns a
    mapping from leaf tensor to gradient array.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    leaves = tape.leaves()
    if wrt is not None:
        known = {id(t) for t in leaves}
        leaves.extend(t for t in wrt if id(t) not in known)
    result: dict[Tensor, np.ndarray] = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        else:
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result
