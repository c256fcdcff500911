"""Dense tensors with reverse-mode automatic differentiation.

Every public operation returns a new :class:`Tensor`. When any input requires
a gradient (and gradient recording is enabled) the result keeps references to
its parents together with a closure mapping the output gradient to the input
gradients. :func:`backward` walks that graph once in reverse topological order.

``min``/``max`` reductions are gradient-opaque: their results never require a
gradient, so anything computed from them acts as a constant under
differentiation.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class OpaqueTape:
    """Records or replays the results of min/max reductions.

    Used by the gradient checker to freeze normalisation statistics while
    finite differences perturb the input.
    """

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.flagged = 0
        self.mode = "record"
        self.cursor = 0

    def replay(self) -> "OpaqueTape":
        self.mode = "replay"
        self.cursor = 0
        return self


@contextlib.contextmanager
def opaque_tape(tape: OpaqueTape):
    prev = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # ----------------------------------------------------------- basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def backward(self) -> None:
        backward(self)

    # -------------------------------------------------------- operators
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)


def create(shape: Sequence[int], data: Iterable[float], requires_grad: bool = False,
           dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor from a shape and flat row-major data."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    flat = np.asarray(list(data) if not isinstance(data, np.ndarray) else data, dtype=dtype).reshape(-1)
    expected = math.prod(shape)
    if flat.size != expected:
        raise ValueError(
            f"shape {shape} holds {expected} elements but data has {flat.size}"
        )
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), bw, "gelu")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, gelu, sigmoid, square."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"gelu": gelu, "sigmoid": sigmoid, "square": square}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        if isinstance(b, Tensor) and b.shape != a.shape:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return binary[op](a, b)
    if op == "scale":
        return scale(a, b)
    if op in unary:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def masked_fill(a: Tensor, mask: np.ndarray, values) -> Tensor:
    """Overwrite positions where ``mask`` is true with constant ``values``.

    Gradient flows only through the untouched positions.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    vals = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=a.dtype)
    out = np.where(mask, vals, a.data).astype(a.dtype, copy=False)
    keep = ~mask
    return _result(out, (a,), lambda g: (g * keep,), "masked_fill")


# ----------------------------------------------------------------- products
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None

    if b.ndim == 2:
        # shared weight matrix: fold batch axes into rows
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an elementwise affine map."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def bw(g):
        ggam = g * gamma.data
        gx = None
        if a.requires_grad:
            gx = inv * (ggam - ggam.mean(axis=-1, keepdims=True)
                        - xhat * (ggam * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (a, gamma, beta), bw, "layer_norm")


# --------------------------------------------------------------- reductions
def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw, "sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    count = math.prod(a.shape[i] for i in ax)
    out = a.data.mean(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(np.asarray(out), (a,), bw, "mean")


def _opaque(a: Tensor, axes, keepdims: bool, fn, name: str) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    tape = getattr(_state, "tape", None)
    if tape is not None and tape.mode == "replay":
        out = tape.values[tape.cursor]
        tape.cursor += 1
    else:
        out = np.asarray(fn(a.data, axis=ax, keepdims=keepdims))
        if tape is not None:
            tape.values.append(out)
            if a.requires_grad and _grad_enabled():
                tape.flagged += 1
    t = Tensor(out)
    t.op = name
    return t


def reduce_min(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Minimum; the result is a constant (never requires a gradient)."""
    return _opaque(a, axes, keepdims, np.min, "min")


def reduce_max(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Maximum; the result is a constant (never requires a gradient)."""
    return _opaque(a, axes, keepdims, np.max, "max")


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    table = {"sum": reduce_sum, "mean": reduce_mean, "min": reduce_min, "max": reduce_max}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](a, axes, keepdims)


# ------------------------------------------------------------ rearrangement
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}") from None
    old = a.shape
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(a.ndim)):
        raise ValueError(f"{order} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(order))
    return _result(a.data.transpose(order), (a,), lambda g: (g.transpose(inverse),), "permute")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast to ``shape`` (gradient sums over the repeated axes)."""
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "expand")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` along the first axis."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), bw, "take_rows")


# ----------------------------------------------------------------- backward
def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Leaf gradients are reset at the start of each call, so calling twice gives
    the same result as calling once.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    order = _topological(loss)
    for node in order:
        if node.is_leaf:
            node.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.array(g, dtype=node.data.dtype)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
