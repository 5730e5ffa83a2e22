"""Dense float64 tensors with a reverse-mode gradient tape.

Every result tensor keeps a reference to the :class:`Node` that produced it.
``backward`` walks those nodes in reverse topological order, so the graph
itself is the tape. Values are immutable: arrays are copied on construction
and flagged read-only.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor value."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording nodes (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    # maps the output gradient to one gradient per input (None = no contribution)
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _node: Node | None = None):
        arr = _frozen(data)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._node = _node

    # value access -------------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self._data

    def assign(self, value) -> None:
        """Replace the stored value in place (parameter updates only)."""
        arr = _frozen(value)
        if arr.shape != self._data.shape:
            raise ShapeError(f"cannot assign {arr.shape} into {self._data.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite update for {self.name}")
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    node = Node(op, inputs, vjp) if needs else None
    out = Tensor.__new__(Tensor)
    arr = np.asarray(value, dtype=np.float64)
    if arr.base is not None or not arr.flags.c_contiguous:
        arr = arr.copy()  # detach from operand storage
    arr.flags.writeable = False
    out._data = arr
    out.requires_grad = needs
    out.name = None
    out.grad = None
    out._node = node
    return out


# ---------------------------------------------------------------------------
# broadcasting: only the patterns the model needs
# ---------------------------------------------------------------------------

def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b:
        return
    if math.prod(a) == 1 and len(a) <= len(b) or math.prod(b) == 1 and len(b) <= len(a):
        return  # scalar over tensor
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return  # vector over map (trailing-axis match)
    if len(a) == len(b):
        ok = all(x == y or x == 1 or y == 1 for x, y in zip(a, b))
        one_sided = all(x == y or x == 1 for x, y in zip(a, b)) or all(
            x == y or y == 1 for x, y in zip(a, b))
        if ok and one_sided:
            return  # keepdims-style reduction result against its source
    raise ShapeError(f"{op}: unsupported broadcast between {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.data, b.data
    return _result(av * bv, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    av, bv = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / bv, a.shape),
                              _unbroadcast(-g * av / (bv * bv), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _result(out, "log", (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; ``axes=None`` swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims) if axes else a.data

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _result(out, "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: {ts[0].shape} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(out, "concat", ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def select(a, index: int, axis: int = 0) -> Tensor:
    """Slice ``a`` at one integer position along ``axis`` (axis removed)."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if not -a.shape[ax] <= index < a.shape[ax]:
        raise IndexError(f"select: index {index} out of range for axis of size {a.shape[ax]}")
    out = np.take(a.data, index, axis=ax)
    src = a.shape

    def vjp(g):
        ga = np.zeros(src)
        idx = [slice(None)] * len(src)
        idx[ax] = index
        ga[tuple(idx)] = g
        return (ga,)

    return _result(out, "select", (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Supported: (m,k)@(k,n), (...,m,k)@(k,n) with a shared right operand, and
    (...,m,k)@(...,k,n) with identical leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result(out, "matmul", (a, b), vjp)


def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with max subtraction.

    ``mask`` (boolean, broadcastable to ``a``) marks admissible entries; the
    rest receive exactly zero weight. Every row needs one admissible entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row has no admissible entries")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, "softmax_rows", (a,), vjp)


def logsumexp_rows(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    s = np.exp(x - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = np.exp(x - m) / s
    return _result(out, "logsumexp_rows", (a,), lambda g: (g[..., None] * soft,))


def conv1d_channels(f, kernel) -> Tensor:
    """Zero-padded 'same' correlation along the last (channel) axis."""
    f, kernel = as_tensor(f), as_tensor(kernel)
    if kernel.ndim != 1:
        raise ShapeError(f"conv1d_channels: kernel must be 1-D, got {kernel.shape}")
    w = kernel.shape[0]
    c = f.shape[-1]
    if w % 2 == 0:
        raise ValueError(f"conv1d_channels: kernel width must be odd, got {w}")
    if w > c:
        raise ShapeError(f"conv1d_channels: kernel width {w} exceeds channel count {c}")
    half = w // 2
    pad = [(0, 0)] * (f.ndim - 1) + [(half, half)]
    fp = np.pad(f.data, pad)
    kv = kernel.data
    out = np.zeros(f.shape)
    for j in range(w):
        out += kv[j] * fp[..., j:j + c]

    def vjp(g):
        gp = np.pad(g, pad)
        gf = np.zeros(f.shape)
        gk = np.empty(w)
        for j in range(w):
            # out[c] uses f[c + j - half]; reverse the shift for df
            gf += kv[j] * gp[..., 2 * half - j:2 * half - j + c]
            gk[j] = (g * fp[..., j:j + c]).sum()
        return gf, gk

    return _result(out, "conv1d_channels", (f, kernel), vjp)


@dataclass(frozen=True)
class Region:
    """Half-open rectangle ``[top, top+height) x [left, left+width)``."""

    top: int
    left: int
    height: int
    width: int


def avg_pool_region(x, region: Region) -> Tensor:
    """Per-channel mean over ``region`` of a (..., C, H, W) map."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"avg_pool_region expects (..., C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    r = region
    if r.height < 1 or r.width < 1:
        raise ValueError(f"empty pooling region {r}")
    if r.top < 0 or r.left < 0 or r.top + r.height > h or r.left + r.width > w:
        raise ValueError(f"region {r} outside map of size {h}x{w}")
    rows = slice(r.top, r.top + r.height)
    cols = slice(r.left, r.left + r.width)
    count = r.height * r.width
    out = x.data[..., rows, cols].sum(axis=(-2, -1)) / count
    src = x.shape

    def vjp(g):
        gx = np.zeros(src)
        gx[..., rows, cols] = g[..., None, None] / count
        return (gx,)

    return _result(out, "avg_pool_region", (x,), vjp)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(sum_(mul(x, x), axis=axis, keepdims=True))
    return div(x, norm)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Nodes reachable from a root, operands before results."""

    tensors: list[Tensor]

    def __len__(self) -> int:
        return len(self.tensors)


def build_tape(root: Tensor) -> Tape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return Tape(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/dt into ``t.grad`` for every requires_grad tensor."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.asarray(gi, dtype=np.float64)
    return tape


# ---------------------------------------------------------------------------
# parameter creation
# ---------------------------------------------------------------------------

def param_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def glorot_uniform(seed: int, name: str, shape: tuple[int, ...], fan_in: int,
                   fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    values = param_rng(seed, name).uniform(-a, a, size=shape)
    return Tensor(values, requires_grad=True, name=name)


def zeros_param(name: str, shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)
