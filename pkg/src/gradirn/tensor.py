"""Dense tensors and a tape-based reverse-mode autodiff engine.

Tensors are immutable wrappers around contiguous numpy arrays.  Operations
executed while a :class:`Tape` is active, and touching at least one tensor
that requires a gradient, append a :class:`TapeNode` carrying a vector-Jacobian
product closure.  :meth:`Tape.backward` replays the nodes in reverse
recording order.

Broadcasting is deliberately narrow: a tensor may be combined with a Python
scalar or a 0-d tensor; two non-scalar tensors must have identical shapes.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_DEFAULT = {"dtype": np.dtype(np.float32)}
_local = threading.local()


class TensorError(Exception):
    """Base class for tensor engine errors."""


class ShapeMismatchError(TensorError, ValueError):
    def __init__(self, op: str, a, b):
        self.op, self.shape_a, self.shape_b = op, tuple(a), tuple(b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class TensorZeroDivisionError(TensorError, ZeroDivisionError):
    pass


def default_dtype() -> np.dtype:
    return _DEFAULT["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dt}")
    _DEFAULT["dtype"] = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. ``"float64"`` for gradchecks)."""
    old = _DEFAULT["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT["dtype"] = old


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = default_dtype()
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        if any(s < 1 for s in arr.shape):
            raise TensorError(f"all dimension sizes must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        t = object.__new__(Tensor)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, channel):
        return channels(self, channel)


class Parameter(Tensor):
    """A named learnable leaf.  ``grad`` accumulates until :meth:`zero_grad`."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        """Replace the value in place (optimizer use only)."""
        arr = np.array(value, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeMismatchError("assign", self.data.shape, arr.shape)
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass(eq=False)
class TapeNode:
    kind: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence]


@dataclass(eq=False)
class Tape:
    nodes: list = field(default_factory=list)
    _params: dict = field(default_factory=dict)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, kind, inputs, output, vjp):
        self.nodes.append(TapeNode(kind, tuple(inputs), output, vjp))
        for t in inputs:
            if isinstance(t, Parameter) and id(t) not in self._params:
                self._params[id(t)] = t

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``root``.

        Gradients are accumulated into every :class:`Parameter` reached.  The
        raw map ``id(tensor) -> gradient`` is returned for callers that need
        gradients of non-parameter leaves.
        """
        if root.shape != ():
            raise TensorError(f"backward requires a scalar root, got shape {root.shape}")
        grads = {id(root): np.ones((), dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, p in self._params.items():
            if key in grads:
                p.grad = p.grad + grads[key].astype(p.grad.dtype, copy=False).reshape(p.grad.shape)
        return grads


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (inference)."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def backward(root: Tensor) -> dict[int, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise TensorError("backward called with no active tape")
    return tape.backward(root)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result and record it on the active tape if needed."""
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape() if needs else None
    out = Tensor._wrap(np.asarray(data), requires_grad=tape is not None)
    if tape is not None:
        tape.record(kind, inputs, out, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatchError(op, a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return make("add", a.data + b.data, (a, b),
                lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return make("sub", a.data - b.data, (a, b),
                lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    return make("mul", a.data * b.data, (a, b),
                lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    if np.any(b.data == 0):
        raise TensorZeroDivisionError(f"div: divisor has {int(np.sum(b.data == 0))} zero entries")
    out = a.data / b.data
    return make("div", out, (a, b),
                lambda g: (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return make("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (non-learnable) scalar."""
    c = float(c)
    return make("scale", a.data * a.data.dtype.type(c), (a,),
                lambda g: (g * g.dtype.type(c),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make("sqrt", out, (a,), lambda g: (g / (2 * out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is passed only where ``a >= floor``."""
    mask = a.data >= floor
    out = np.where(mask, a.data, a.data.dtype.type(floor))
    return make("clamp_min", out, (a,), lambda g: (g * mask,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return make("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[C_i, H, W]`` tensors along the channel axis."""
    tensors = list(tensors)
    first = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != first:
            raise ShapeMismatchError("concat", tensors[0].shape, t.shape)
    sizes = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return make("concat", np.concatenate([t.data for t in tensors]), tensors,
                lambda g: tuple(np.split(g, sizes)))


def channels(a: Tensor, index) -> Tensor:
    """Select channel(s) ``index`` (int or slice) keeping a leading channel axis."""
    sl = slice(index, index + 1) if isinstance(index, int) else index
    out = a.data[sl]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return make("channels", out, (a,), vjp)
