"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by the contour encoder and its loss are
provided. Operations are recorded on the innermost active :class:`Tape`; with
no tape active they evaluate eagerly and record nothing, which is how
inference runs.

>>> p = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     root = (p * p).sum()
>>> tape.backward(root)[p]
array([2., 4., 6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "NonFiniteGradientError",
    "Tensor",
    "Tape",
    "RmsPropState",
    "rmsprop_step",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "maxpool2x2",
    "relu",
    "exp",
    "log",
    "square",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "reduce_max_const",
    "logsumexp",
    "bias_add",
    "reshape",
    "take_rows",
    "getitem",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may participate in differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied into a C-contiguous float64 buffer.
    requires_grad : bool
        Marks a leaf whose gradient :meth:`Tape.backward` should report.
    name : str, optional
        Used in error messages (e.g. non-finite gradients).
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    # maps upstream gradient to one gradient (or None) per parent
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops evaluated inside the block are appended in
    execution order, so parents always precede children.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradient of scalar ``root`` with respect to every leaf parameter.

        Leaves are tensors with ``requires_grad=True`` that were not produced
        by a recorded op. Leaves the root does not depend on get zeros.
        """
        if root.size != 1:
            raise ShapeError("backward (root must be scalar)", root.shape)
        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        if root.requires_grad and id(root) not in produced:
            leaves[id(root)] = root
        for node in reversed(self.nodes):
            for p in node.parents:
                if p.requires_grad and id(p) not in produced:
                    leaves.setdefault(id(p), p)
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
        if wrt is not None:
            for t in wrt:
                leaves.setdefault(id(t), t)
        return {t: grads.get(k, np.zeros_like(t.data)).reshape(t.shape) for k, t in leaves.items()}


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.name = None
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(_Node(out, parents, backward, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, "div")


def bias_add(x, bias) -> Tensor:
    """Add a bias along the trailing (channel) axis: ``bias`` is (C,), ``x`` is (..., C)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError("bias_add", x.shape, bias.shape)
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)), "bias_add")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _make(ad @ bd, (a, b), backward, "matmul")


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    # channels-last keeps each (kw, C) run contiguous, which makes this copy cheap
    n = x.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # n, oh, ow, c, kh, kw
    oh, ow = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * oh * ow, -1)


def conv2d(x, weight, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation, channels-last.

    ``x`` is (N, H, W, C) and ``weight`` is (kh, kw, C, O); the output is
    (N, H + 2p - kh + 1, W + 2p - kw + 1, O) with zero padding ``p``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, h, w, c = x.shape
    kh, kw, _, o = weight.shape
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    cols = _im2col(x.data, kh, kw, padding)
    wmat = weight.data.reshape(-1, o)
    out = (cols @ wmat).reshape(n, oh, ow, o)

    def backward(g):
        g2 = g.reshape(n * oh * ow, o)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # correlate the upstream gradient with the flipped kernel; pad so
            # the result covers the (padded) input, then crop back to H x W
            flipped = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
            gpad = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            gpad = gpad[:, padding : gpad.shape[1] - padding, padding : gpad.shape[2] - padding]
            gx = (_im2col(gpad, kh, kw, 0) @ flipped).reshape(n, h, w, c)
        return gx, gw

    return _make(out, (x, weight), backward, "conv2d")


def maxpool2x2(x) -> Tensor:
    """2x2 max-pool with stride 2 over (N, H, W, C); an odd trailing row/column is dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("maxpool2x2", x.shape)
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ShapeError("maxpool2x2", x.shape)
    blocks = x.data[:, : 2 * oh, : 2 * ow].reshape(n, oh, 2, ow, 2, c)
    out = blocks.max(axis=(2, 4))
    # first maximal element of each window receives the gradient
    flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    arg = flat.argmax(axis=-1)

    def backward(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * oh, 2 * ow, c)
        if (2 * oh, 2 * ow) == (h, w):
            return (gb,)
        gx = np.zeros(x.shape)
        gx[:, : 2 * oh, : 2 * ow] = gb
        return (gx,)

    return _make(out, (x,), backward, "maxpool2x2")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes)), (x,), backward, "sum")


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(reduce_sum(x, axis), 1.0 / count)


def reduce_max_const(x, axis) -> Tensor:
    """Max along ``axis`` (keepdims) treated as a constant: no gradient flows."""
    x = as_tensor(x)
    return Tensor(x.data.max(axis=axis, keepdims=True))


def logsumexp(x, axis: int) -> Tensor:
    """Numerically stable ``log(sum(exp(x)))`` along ``axis``.

    The max is subtracted as a constant; the result and its gradient are
    exact because the shift cancels.
    """
    x = as_tensor(x)
    m = reduce_max_const(x, axis)
    shifted = exp(sub(x, m))
    total = log(reduce_sum(shifted, axis))
    return add(total, Tensor(np.squeeze(m.data, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def getitem(x, index) -> Tensor:
    """Basic slicing (views); use :func:`take_rows` for gathers with repeats."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[index] += g
        return (gx,)

    return _make(np.array(x.data[index]), (x,), backward, "getitem")


def take_rows(x, rows) -> Tensor:
    """Gather ``x[rows]`` along axis 0; repeated rows accumulate gradient."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, rows, g)
        return (gx,)

    return _make(x.data[rows], (x,), backward, "take_rows")


# -- optimizer ---------------------------------------------------------------


@dataclass
class RmsPropState:
    """Running mean-square accumulators for plain (uncentred) RMSProp."""

    learning_rate: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.decay < 1:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: RmsPropState) -> None:
    """Apply one RMSProp update in place.

    ``acc <- decay*acc + (1-decay)*grad**2`` then
    ``param <- param - lr*grad/(sqrt(acc) + eps)``.
    All gradients are checked before any parameter is touched.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"rmsprop_step[{name}]", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, p in params.items():
        g = grads[name]
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(p.data)
        acc = state.decay * acc + (1.0 - state.decay) * g * g
        state.accumulators[name] = acc
        p.data = p.data - state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
