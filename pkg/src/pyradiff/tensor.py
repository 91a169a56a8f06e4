"""Dense float64 tensors with taped reverse-mode autodiff, plus Adam.

Everything runs in 64-bit. Ops compute eagerly on numpy arrays and, when a
Tape is active, append a backward closure to it. A tape is an append-only
record of one forward pass, so replaying it in reverse is already a valid
topological order: every node's inputs were created before the node.

Tensors are never mutated by ops. The two sanctioned writers are
``backward`` (accumulates into ``.grad``) and ``adam_step`` (updates
``.data`` in place). Tapes are confined to the thread that created them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` get a zero gradient
    eagerly, so parameters untouched by a backward pass report zero grad
    rather than None. Interior results allocate their grad lazily during
    the backward sweep.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = (
            np.zeros_like(self.data) if self.requires_grad else None
        )

    @classmethod
    def _result(cls, data: Array, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    # ---- introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- operator sugar; all arithmetic routes through module functions ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise ContractError("tensor division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def __getitem__(self, key):
        return getitem(self, key)


# ---- tape machinery ----


@dataclass
class TapeNode:
    output: Tensor
    backward_fn: Callable[[Array], None]


class Tape:
    """Append-only op record for one forward pass on one thread."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: tapes must nest")
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_LOCAL = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over ``tape`` seeding d(loss)/d(loss) = 1.

    Visits each node exactly once in reverse recording order. Tensors not
    on any path to the loss are skipped; leaves keep their zero grads.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.data.shape}"
        )
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)


def _record(out: Tensor, backward_fn: Callable[[Array], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(TapeNode(out, backward_fn))
    return out


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may be a view into another tensor's grad buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _ensure(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor._result(a.data + b.data, a.requires_grad or b.requires_grad)

    def bwd(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, bwd)


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor._result(a.data - b.data, a.requires_grad or b.requires_grad)

    def bwd(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, bwd)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor._result(a.data * b.data, a.requires_grad or b.requires_grad)

    def bwd(g: Array) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, bwd)


def neg(a) -> Tensor:
    a = _ensure(a)
    out = Tensor._result(-a.data, a.requires_grad)

    def bwd(g: Array) -> None:
        _accumulate(a, -g)

    return _record(out, bwd)


def exp(a) -> Tensor:
    a = _ensure(a)
    val = np.exp(a.data)
    out = Tensor._result(val, a.requires_grad)

    def bwd(g: Array) -> None:
        _accumulate(a, g * val)

    return _record(out, bwd)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf form."""
    a = _ensure(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor._result(x * phi, a.requires_grad)

    def bwd(g: Array) -> None:
        dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (phi + x * dens))

    return _record(out, bwd)


# ---- shape ops ----


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    out = Tensor._result(a.data.reshape(shape), a.requires_grad)

    def bwd(g: Array) -> None:
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _ensure(a)
    axes = tuple(axes)
    out = Tensor._result(np.transpose(a.data, axes), a.requires_grad)
    inverse = tuple(np.argsort(axes))

    def bwd(g: Array) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _record(out, bwd)


def concat(tensors: Sequence, axis: int) -> Tensor:
    parts = [_ensure(t) for t in tensors]
    if not parts:
        raise ContractError("concat needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor._result(out_data, any(p.requires_grad for p in parts))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g: Array) -> None:
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, piece)

    return _record(out, bwd)


def gather(a, indices, axis: int) -> Tensor:
    """Select slices of ``a`` along ``axis`` by an integer index array."""
    a = _ensure(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor._result(np.take(a.data, idx, axis=axis), a.requires_grad)

    def bwd(g: Array) -> None:
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.data)
        moved = np.moveaxis(acc, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        _accumulate(a, acc)

    return _record(out, bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup into a (num_entries, dim) table."""
    return gather(table, ids, axis=0)


def getitem(a, key) -> Tensor:
    a = _ensure(a)
    out = Tensor._result(a.data[key], a.requires_grad)

    def bwd(g: Array) -> None:
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.data)
        # add.at, not assignment: a repeated fancy index must sum its
        # output gradients, and plain assignment keeps only the last one
        np.add.at(acc, key, g)
        _accumulate(a, acc)

    return _record(out, bwd)


# ---- reductions ----


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    axes = _axis_tuple(axis, a.data.ndim)

    def bwd(g: Array) -> None:
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis=axes)
        _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _record(out, bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = Tensor._result(a.data.mean(axis=axis, keepdims=keepdims), a.requires_grad)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def bwd(g: Array) -> None:
        gg = g / count
        if not keepdims:
            gg = np.expand_dims(gg, axis=axes)
        _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _record(out, bwd)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    a, b = _ensure(a), _ensure(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse operands differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor._result(
        np.asarray((diff * diff).sum() / n), a.requires_grad or b.requires_grad
    )

    def bwd(g: Array) -> None:
        scale = 2.0 * float(g) / n
        _accumulate(a, scale * diff)
        _accumulate(b, -scale * diff)

    return _record(out, bwd)


# ---- linear algebra ----


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style leading-batch broadcasting."""
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor._result(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _record(out, bwd)


# ---- neural-net primitives ----


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max-shift stabilization."""
    a = _ensure(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(s, a.requires_grad)

    def bwd(g: Array) -> None:
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _record(out, bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _ensure(a), _ensure(gain), _ensure(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must be ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor._result(
        xhat * gain.data + bias.data,
        a.requires_grad or gain.requires_grad or bias.requires_grad,
    )

    def bwd(g: Array) -> None:
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv_std * (gx - m1 - xhat * m2))

    return _record(out, bwd)


# ---- optimizer ----


@dataclass
class AdamState:
    """First/second moment buffers keyed like the parameter mapping."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(
        cls,
        params: Mapping[str, Tensor],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        state = cls(
            learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon
        )
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes each grad afterwards."""
    state.step_count += 1
    t = state.step_count
    b1c = 1.0 - state.beta1 ** t
    b2c = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient buffer")
        if name not in state.m:
            raise ContractError(f"optimizer state is missing moments for {name!r}")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / b1c
        vhat = v / b2c
        p.data -= state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
        p.grad = np.zeros_like(p.data)
