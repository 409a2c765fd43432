"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive goes through :func:`apply_primitive`, which computes the forward
value with numpy and, when any input requires a gradient, appends a record to
the active :class:`Tape`.  :func:`backward` replays that tape in reverse.

Broadcasting is deliberately limited to scalar-with-tensor; anything else must
be spelled out with :func:`reshape` / :func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "apply_primitive", "backward", "no_grad",
    "tensor", "add", "sub", "mul", "div", "neg", "exp", "log", "sigmoid",
    "softplus", "relu", "power", "clip", "matmul", "sum", "softmax",
    "cosine_similarity", "concat", "getitem", "reshape", "transpose",
    "broadcast_to", "gather", "scatter", "conv1d", "index_conv",
    "linear_recurrence",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class Tensor:
    """An N-d float64 array that may take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt ``array`` without copying (primitive outputs, possibly read-only views)."""
        t = cls.__new__(cls)
        t.data, t.grad, t.requires_grad, t.node_id, t.tape = array, None, False, next(_ids), None
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

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

    def __getitem__(self, key):
        return getitem(self, key)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive applications.

    Records are appended in execution order, so the list is already a
    topological order of the graph.  Use as a context manager to make it the
    tape that new operations are recorded on.
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def clear(self):
        self.records.clear()


_default_tape = Tape()
_tape_stack: list[Tape | None] = [_default_tape]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def tensor(value, requires_grad: bool = False) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive definitions: name -> (forward, vjp)
#   forward(*arrays, **attrs) -> (out_array, ctx)
#   vjp(grad_out, ctx, *arrays, **attrs) -> tuple of input grads (None = no grad)
# ---------------------------------------------------------------------------

_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1 and a.ndim <= 1


def _check_binary(name, a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are incompatible "
                         "(only scalar-with-tensor broadcasting is allowed)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _binary(name, fwd, ga, gb):
    def forward(a, b):
        _check_binary(name, a, b)
        return fwd(a, b), None

    def vjp(g, ctx, a, b):
        return _unbroadcast(ga(g, a, b), a.shape), _unbroadcast(gb(g, a, b), b.shape)

    _PRIMITIVES[name] = (forward, vjp)


_binary("add", np.add, lambda g, a, b: g, lambda g, a, b: g)
_binary("sub", np.subtract, lambda g, a, b: g, lambda g, a, b: -g)
_binary("mul", np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)
_binary("div", np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))


def _unary(name, fwd, dfdx):
    def forward(a):
        out = fwd(a)
        return out, out

    def vjp(g, out, a):
        return (g * dfdx(a, out),)

    _PRIMITIVES[name] = (forward, vjp)


def _stable_sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_unary("neg", np.negative, lambda a, y: -1.0)
_unary("exp", np.exp, lambda a, y: y)
_unary("log", np.log, lambda a, y: 1.0 / a)
_unary("sigmoid", _stable_sigmoid, lambda a, y: y * (1.0 - y))
_unary("softplus", lambda a: np.logaddexp(0.0, a), lambda a, y: _stable_sigmoid(a))
_unary("relu", lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(np.float64))


_PRIMITIVES["power"] = (
    lambda a, exponent: (np.power(a, exponent), None),
    lambda g, ctx, a, exponent: (g * exponent * np.power(a, exponent - 1),),
)

_PRIMITIVES["clip"] = (
    lambda a, lo, hi: (np.clip(a, lo, hi), None),
    lambda g, ctx, a, lo, hi: (g * ((a >= lo) & (a <= hi)),),
)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return a @ b, None


def _matmul_vjp(g, ctx, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    if b.ndim == 2 and gb.ndim > 2:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


_PRIMITIVES["matmul"] = (_matmul_fwd, _matmul_vjp)


def _sum_fwd(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _sum_vjp(g, ctx, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


_PRIMITIVES["sum"] = (_sum_fwd, _sum_vjp)


def _softmax_fwd(a, axis):
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return out, out


def _softmax_vjp(g, y, a, axis):
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


_PRIMITIVES["softmax"] = (_softmax_fwd, _softmax_vjp)


def _cos_fwd(a, b, axis):
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(b * b, axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, np.sum(a * b, axis=axis, keepdims=True) / denom, 0.0)
    return np.squeeze(cos, axis=axis), (na, nb, ok, cos)


def _cos_vjp(g, ctx, a, b, axis):
    na, nb, ok, cos = ctx
    g = np.expand_dims(g, axis)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    ga = np.where(ok, g * (b / (sa * sb) - cos * a / (sa * sa)), 0.0)
    gb = np.where(ok, g * (a / (sa * sb) - cos * b / (sb * sb)), 0.0)
    return ga, gb


_PRIMITIVES["cosine_similarity"] = (_cos_fwd, _cos_vjp)


def _concat_fwd(*arrays, axis):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: shapes {[a.shape for a in arrays]} along axis {axis}") from err
    return out, np.cumsum([a.shape[axis] for a in arrays])[:-1]


def _concat_vjp(g, splits, *arrays, axis):
    return tuple(np.split(g, splits, axis=axis))


_PRIMITIVES["concat"] = (_concat_fwd, _concat_vjp)


def _getitem_vjp(g, ctx, a, key):
    out = np.zeros_like(a)
    out[key] = g
    return (out,)


_PRIMITIVES["getitem"] = (lambda a, key: (a[key].copy(), None), _getitem_vjp)


def _reshape_fwd(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}")
    return a.reshape(shape), None


_PRIMITIVES["reshape"] = (_reshape_fwd, lambda g, ctx, a, shape: (g.reshape(a.shape),))
_PRIMITIVES["transpose"] = (
    lambda a, axes: (np.transpose(a, axes).copy(), None),
    lambda g, ctx, a, axes: (np.transpose(g, np.argsort(axes)),),
)


def _broadcast_fwd(a, shape):
    try:
        return np.broadcast_to(a, shape), None
    except ValueError as err:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from err


def _broadcast_vjp(g, ctx, a, shape):
    lead = g.ndim - a.ndim
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
    return (g.sum(axis=axes, keepdims=True) if axes else g,)


_PRIMITIVES["broadcast_to"] = (_broadcast_fwd, _broadcast_vjp)


def _gather_fwd(a, index):
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.max() >= a.shape[0] or index.min() < -1):
        raise ShapeError(f"gather: index out of range for leading extent {a.shape[0]}")
    valid = index >= 0
    out = a[np.where(valid, index, 0)]
    if not valid.all():
        out[~valid] = 0.0
    return out, valid


def _gather_vjp(g, valid, a, index):
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros_like(a)
    np.add.at(out, index[valid], g[valid])
    return (out,)


_PRIMITIVES["gather"] = (_gather_fwd, _gather_vjp)


def _scatter_fwd(a, index, length):
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:index.ndim]:
        raise ShapeError(f"scatter: index shape {index.shape} does not lead value shape {a.shape}")
    out = np.zeros((length,) + a.shape[index.ndim:])
    np.add.at(out, index, a)
    return out, None


_PRIMITIVES["scatter"] = (
    _scatter_fwd,
    lambda g, ctx, a, index, length: (g[np.asarray(index, dtype=np.int64)],),
)


def _index_conv_fwd(a, w, table):
    table = np.asarray(table, dtype=np.int64)
    if table.ndim != 2 or table.shape[0] != a.shape[0] or w.shape != (table.shape[1],) + a.shape[1:]:
        raise ShapeError(f"index_conv: value {a.shape}, weight {w.shape}, table {table.shape}")
    out = np.zeros(a.shape)
    # one tap at a time keeps memory at O(N C) instead of O(N T C)
    for t in range(table.shape[1]):
        rows = np.nonzero(table[:, t] >= 0)[0]
        out[rows] += a[table[rows, t]] * w[t]
    return out, None


def _index_conv_vjp(g, ctx, a, w, table):
    table = np.asarray(table, dtype=np.int64)
    ga = np.zeros_like(a)
    gw = np.zeros_like(w)
    for t in range(table.shape[1]):
        rows = np.nonzero(table[:, t] >= 0)[0]
        src = table[rows, t]
        gw[t] = np.sum(g[rows] * a[src], axis=0)
        np.add.at(ga, src, g[rows] * w[t])
    return ga, gw


_PRIMITIVES["index_conv"] = (_index_conv_fwd, _index_conv_vjp)


def _recurrence_fwd(a, u, axis):
    if a.shape != u.shape:
        raise ShapeError(f"linear_recurrence: decay {a.shape} and input {u.shape} differ")
    am = np.moveaxis(a, axis, 0)
    um = np.moveaxis(u, axis, 0)
    h = np.empty_like(um)
    state = np.zeros(um.shape[1:])
    for i in range(um.shape[0]):
        state = am[i] * state + um[i]
        h[i] = state
    return np.moveaxis(h, 0, axis).copy(), h


def _recurrence_vjp(g, h, a, u, axis):
    am = np.moveaxis(a, axis, 0)
    gm = np.moveaxis(g, axis, 0)
    n = gm.shape[0]
    gu = np.empty_like(gm)
    ga = np.zeros_like(gm)
    carry = np.zeros(gm.shape[1:])
    for i in range(n - 1, -1, -1):
        carry = gm[i] + (am[i + 1] * carry if i + 1 < n else 0.0)
        gu[i] = carry
        if i > 0:
            ga[i] = carry * h[i - 1]
    return np.moveaxis(ga, 0, axis).copy(), np.moveaxis(gu, 0, axis).copy()


_PRIMITIVES["linear_recurrence"] = (_recurrence_fwd, _recurrence_vjp)


# ---------------------------------------------------------------------------
# recording and replay
# ---------------------------------------------------------------------------

def apply_primitive(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``op`` on ``inputs`` and record it on the active tape."""
    try:
        forward, vjp = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    value, ctx = forward(*(t.data for t in tensors), **attrs)
    out = Tensor._wrap(np.asarray(value, dtype=np.float64))
    tape = _tape_stack[-1]
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out.tape = tape

        def rule(g, _ctx=ctx, _tensors=tensors, _attrs=attrs):
            return vjp(g, _ctx, *(t.data for t in _tensors), **_attrs)

        tape.records.append((op, out, tensors, rule))
    return out


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(x) into ``x.grad`` for every gradient-carrying x.

    ``root`` must hold exactly one element.  Records are replayed in reverse
    tape order, so accumulation order is fixed.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    tape = tape or root.tape or _default_tape
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    touched: dict[int, Tensor] = {root.node_id: root}
    for _, out, inputs, rule in reversed(tape.records):
        g = grads.pop(out.node_id, None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = np.array(gi, dtype=np.float64)
                touched[t.node_id] = t
    # whatever is left in ``grads`` belongs to leaves (or tensors off this tape)
    for node_id, g in grads.items():
        t = touched[node_id]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# thin wrappers
# ---------------------------------------------------------------------------

def add(a, b): return apply_primitive("add", (a, b))
def sub(a, b): return apply_primitive("sub", (a, b))
def mul(a, b): return apply_primitive("mul", (a, b))
def div(a, b): return apply_primitive("div", (a, b))
def neg(a): return apply_primitive("neg", (a,))
def exp(a): return apply_primitive("exp", (a,))
def log(a): return apply_primitive("log", (a,))
def sigmoid(a): return apply_primitive("sigmoid", (a,))
def softplus(a): return apply_primitive("softplus", (a,))
def relu(a): return apply_primitive("relu", (a,))
def power(a, exponent: float): return apply_primitive("power", (a,), exponent=float(exponent))
def clip(a, lo: float, hi: float): return apply_primitive("clip", (a,), lo=lo, hi=hi)
def matmul(a, b): return apply_primitive("matmul", (a, b))
def softmax(a, axis: int = -1): return apply_primitive("softmax", (a,), axis=axis)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def cosine_similarity(a, b, axis: int = -1):
    """Cosine along ``axis``; defined as 0 where either vector is zero."""
    return apply_primitive("cosine_similarity", (a, b), axis=axis)


def concat(tensors: Sequence, axis: int = 0):
    return apply_primitive("concat", tuple(tensors), axis=axis)


def getitem(a, key):
    if isinstance(key, (list, np.ndarray)):
        raise TypeError("use gather() for index lists")
    return apply_primitive("getitem", (a,), key=key)


def reshape(a, shape):
    """Explicit reshape; at most one entry may be -1 (inferred)."""
    a = _as_tensor(a)
    shape = [int(s) for s in shape]
    if shape.count(-1) == 1:
        rest = int(np.prod([s for s in shape if s != -1]))
        shape[shape.index(-1)] = a.size // rest if rest else 0
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a, axes):
    return apply_primitive("transpose", (a,), axes=tuple(axes))


def broadcast_to(a, shape):
    return apply_primitive("broadcast_to", (a,), shape=tuple(shape))


def gather(a, index):
    """Rows ``a[index]`` along axis 0; index ``-1`` yields a zero row."""
    return apply_primitive("gather", (a,), index=np.asarray(index, dtype=np.int64))


def scatter(a, index, length: int):
    """Zeros of leading extent ``length`` with ``a`` added at ``index``."""
    return apply_primitive("scatter", (a,), index=np.asarray(index, dtype=np.int64), length=int(length))


def index_conv(a, w, table):
    """out[n] = sum_t w[t] * a[table[n, t]], absent (-1) entries contribute zero."""
    return apply_primitive("index_conv", (a, w), table=np.asarray(table, dtype=np.int64))


def conv_table(length: int, taps: int) -> np.ndarray:
    """Neighbour table for a centred 1D kernel with zero ("same") padding."""
    half = taps // 2
    idx = np.arange(length)[:, None] + np.arange(-half, taps - half)[None, :]
    return np.where((idx >= 0) & (idx < length), idx, -1)


def conv1d(a, w, axis: int = 0):
    """Depthwise 1D convolution with zero "same" padding along ``axis``.

    ``w`` has shape ``(taps,) + a.shape[axis + 1:]``: one kernel per trailing
    channel, shared over the leading axes.  Taps must be odd.
    """
    a = _as_tensor(a)
    w = _as_tensor(w)
    taps = w.shape[0]
    if taps % 2 != 1:
        raise ShapeError(f"conv1d: kernel length {taps} must be odd")
    axis = axis % a.ndim
    if w.shape[1:] != a.shape[axis + 1:]:
        raise ShapeError(f"conv1d: weight {w.shape} does not match trailing shape {a.shape[axis + 1:]}")
    lead = a.shape[:axis]
    length = a.shape[axis]
    n_lead = int(np.prod(lead)) if lead else 1
    base = conv_table(length, taps)
    offsets = (np.arange(n_lead) * length)[:, None, None]
    table = np.where(base[None] >= 0, base[None] + offsets, -1).reshape(n_lead * length, taps)
    flat = reshape(a, (n_lead * length,) + a.shape[axis + 1:])
    return reshape(index_conv(flat, w, table), a.shape)


def linear_recurrence(decay, inputs, axis: int = 0):
    """h_i = decay_i * h_{i-1} + inputs_i along ``axis`` with h_{-1} = 0."""
    return apply_primitive("linear_recurrence", (decay, inputs), axis=axis)
