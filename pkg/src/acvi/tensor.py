"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable quantity in the package is a :class:`Tensor`.  Operations
performed while a :class:`Tape` is active are recorded in execution order, and
:func:`backward` replays them in reverse to accumulate gradients into leaf
tensors (usually the entries of a :class:`ParamStore`).

Shape promotion is always explicit: binary elementwise ops accept equal shapes
or a scalar operand, and anything else goes through :func:`broadcast_to` or
:func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Tensor", "Tape", "ParamStore", "DimensionError", "DomainError", "InvalidMaskError",
    "NumericError", "DeterminismError", "ShapeError", "GradCheckReport",
    "wide", "default_dtype", "debug_mode", "set_debug", "tensor", "constant", "record",
    "matmul", "bmm", "linear", "add_bias", "add", "sub", "mul", "scale", "neg",
    "tanh", "sigmoid", "relu", "softplus", "exp", "log", "log_floor", "square",
    "elementwise", "softmax", "minimum", "where", "sum", "mean", "reshape", "transpose",
    "concat", "stack", "broadcast_to", "getitem", "embedding", "scatter_add", "gather_last",
    "lstm_cell", "backward", "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ShapeError(ValueError):
    """A tensor has the wrong rank or size for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an op."""


class InvalidMaskError(ValueError):
    """A mask leaves no position available."""


class NumericError(FloatingPointError):
    """A NaN or Inf was produced while debug checks are enabled."""


class DeterminismError(RuntimeError):
    """Repeated evaluation of a supposedly deterministic function disagreed."""


_local = threading.local()


def _get(name, default):
    return getattr(_local, name, default)


def default_dtype():
    """Float dtype used for newly created tensors on this thread."""
    return _get("dtype", np.float32)


@contextlib.contextmanager
def wide():
    """Create tensors in 64-bit precision inside the block (used by gradient checks)."""
    prev = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = prev


def set_debug(flag: bool) -> None:
    _local.debug = bool(flag)


def debug_mode() -> bool:
    return _get("debug", False)


@contextlib.contextmanager
def debugging(flag: bool = True):
    prev = debug_mode()
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    """An n-dimensional real array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            dtype = default_dtype()
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Tuple[int, int, int]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_shape(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar; every operator maps onto a recorded op
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_shape(t):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_tape_ids = itertools.count(1)


@dataclass
class _Entry:
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.uid = next(_tape_ids)
        self.generation = 0
        self.entries: List[_Entry] = []
        self._prev: List[Optional[Tape]] = []

    def __enter__(self) -> "Tape":
        self._prev.append(_get("tape", None))
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        out.node = (self.uid, self.generation, len(self.entries))
        self.entries.append(_Entry(out, tuple(inputs), backward_fn))

    def clear(self) -> None:
        """Drop all entries; node ids handed out before the call become invalid."""
        self.entries = []
        self.generation += 1

    def owns(self, t: Tensor) -> bool:
        if t.node is None:
            return False
        uid, gen, idx = t.node
        return uid == self.uid and gen == self.generation and idx < len(self.entries)


def current_tape() -> Optional[Tape]:
    return _get("tape", None)


def _check_finite(data: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{opname} produced non-finite values")


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, opname: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    if debug_mode():
        _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = current_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` [m x k] and ``b`` [k x n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return record(A @ B, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [B, m, k] x [B, k, n] -> [B, m, n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g

    return record(A @ B, (a, b), bw, "bmm")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ w.T + b`` with ``w`` [out x in]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear bias shape {b.shape} does not match w {w.shape}")
    X, W = x.data, w.data
    out = X @ W.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W
        gw = g2.T @ X.reshape(-1, X.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw, "linear")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` along the last axis of ``x`` (the one sanctioned promotion)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return record(x.data + b.data, (x, b), bw, "add_bias")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    A, B = a.data, b.data

    def bw(g):
        return _reduce_to(g * B, A.shape), _reduce_to(g * A, B.shape)

    return record(A * B, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant (no gradient to ``c``)."""
    c = float(c)
    return record(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,), "neg")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # numerically stable in both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def softplus(x: Tensor) -> Tensor:
    X = x.data
    y = np.logaddexp(0, X).astype(x.dtype)
    return record(y, (x,), lambda g: (g * _sigmoid_np(X),), "softplus")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise DomainError("log of non-positive value")
    return record(np.log(X), (x,), lambda g: (g / X,), "log")


def log_floor(x: Tensor, floor: float) -> Tensor:
    """``log(max(x, floor))``; no gradient flows through clamped entries.

    The floor is raised to the smallest normal number of ``x``'s dtype so that
    it never rounds to zero in standard precision.
    """
    X = x.data
    floor = max(floor, float(np.finfo(x.dtype).tiny))
    keep = X > floor
    safe = np.where(keep, X, floor).astype(x.dtype)
    return record(np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0).astype(g.dtype),), "log_floor")


def square(x: Tensor) -> Tensor:
    X = x.data
    return record(X * X, (x,), lambda g: (2.0 * g * X,), "square")


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log,
          "softplus": softplus, "square": square, "neg": neg}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op_kind: str, *inputs) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op_kind in _UNARY:
        (x,) = inputs
        return _UNARY[op_kind](x)
    if op_kind in _BINARY:
        a, b = inputs
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Entrywise minimum; on ties the gradient goes to ``a``."""
    a, b = _binary_operands(a, b)
    take_a = a.data <= b.data

    def bw(g):
        return _reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)

    return record(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (equal shapes)."""
    a, b = _binary_operands(a, b)
    cond = np.asarray(cond, dtype=bool)
    if a.shape != b.shape or cond.shape != a.shape:
        raise DimensionError(f"where shape mismatch: {cond.shape}, {a.shape}, {b.shape}")

    def bw(g):
        return np.where(cond, g, 0).astype(g.dtype), np.where(cond, 0, g).astype(g.dtype)

    return record(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# Softmax and reductions
# ---------------------------------------------------------------------------

MASK_SENTINEL = -1e9


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis, with exact zeros at masked-out positions.

    ``mask`` is boolean with the shape of ``x``; True marks a usable position.
    """
    X = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != X.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match {X.shape}")
        if not np.all(mask.any(axis=-1)):
            raise InvalidMaskError("softmax mask leaves no position unmasked")
        X = np.where(mask, X, MASK_SENTINEL)
    z = X - X.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        y = np.where(mask, y, 0.0)
    y = y.astype(x.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), bw, "softmax")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))
    if axis is None:
        return record(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum")
    ax = axis if isinstance(axis, tuple) else (axis,)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).astype(g.dtype),)

    return record(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Shape manipulation and indexing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise DimensionError(f"concat shape mismatch: {[u.shape for u in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError(f"stack shape mismatch: {[t.shape for t in tensors]}")
    ax = axis % (len(shape) + 1)

    def bw(g):
        return tuple(np.moveaxis(g, ax, 0))

    return record(np.stack([t.data for t in tensors], axis=ax), tensors, bw, "stack")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over replicated axes."""
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {old} to {shape}") from exc
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(old) if s == 1 and shape[i + lead] != 1)

    def bw(g):
        return (g.sum(axis=axes).reshape(old) if axes else g,)

    return record(out, (x,), bw, "broadcast_to")


def _is_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(index)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return record(x.data[index], (x,), bw, "getitem")


def embedding(table: Tensor, ids: np.ndarray, padding_idx: Optional[int] = 0) -> Tensor:
    """Row lookup ``table[ids]``; the padding row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        if padding_idx is not None:
            gt[padding_idx] = 0
        return (gt,)

    return record(table.data[ids], (table,), bw, "embedding")


def scatter_add(src: Tensor, index: np.ndarray, size: int) -> Tensor:
    """out[b, index[b, i]] += src[b, i] for a [B, N] source into [B, size]."""
    index = np.asarray(index, dtype=np.int64)
    if src.ndim != 2 or index.shape != src.shape:
        raise DimensionError(f"scatter_add shape mismatch: src {src.shape}, index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise DimensionError(f"scatter_add index out of range [0, {size})")
    B = src.shape[0]
    rows = np.repeat(np.arange(B), src.shape[1]).reshape(src.shape)
    out = np.zeros((B, size), dtype=src.dtype)
    np.add.at(out, (rows, index), src.data)
    return record(out, (src,), lambda g: (g[rows, index],), "scatter_add")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[b, index[b]]`` from a [B, M] tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"gather_last shape mismatch: x {x.shape}, index {index.shape}")
    rows = np.arange(x.shape[0])
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[rows, index] = g
        return (gx,)

    return record(x.data[rows, index], (x,), bw, "gather_last")


# ---------------------------------------------------------------------------
# Fused LSTM cell
# ---------------------------------------------------------------------------

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """One LSTM update for a batch; returns ``[h' ; c']`` as a [B, 2d] tensor.

    Gate layout in ``w`` [4d x (e + d)] and ``b`` [4d] is input, forget,
    candidate, output.  Rows where ``mask`` is False carry ``h`` and ``c``
    through unchanged.
    """
    X, H, C, W = x.data, h.data, c.data, w.data
    d = H.shape[1]
    if W.shape != (4 * d, X.shape[1] + d) or b.shape != (4 * d,) or C.shape != H.shape \
            or X.shape[0] != H.shape[0]:
        raise DimensionError(
            f"lstm_cell shape mismatch: x {X.shape}, h {H.shape}, c {C.shape}, w {W.shape}, b {b.shape}")
    xh = np.concatenate([X, H], axis=1)
    z = xh @ W.T + b.data
    i = _sigmoid_np(z[:, :d])
    f = _sigmoid_np(z[:, d:2 * d])
    gg = np.tanh(z[:, 2 * d:3 * d])
    o = _sigmoid_np(z[:, 3 * d:])
    c_new = f * C + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[:, None]
        h_new = np.where(m, h_new, H)
        c_new = np.where(m, c_new, C)
    else:
        m = None
    e = X.shape[1]

    def bw(g):
        gh, gc = g[:, :d], g[:, d:]
        if m is not None:
            gh_in, gc_in = gh * m, gc * m
        else:
            gh_in, gc_in = gh, gc
        do = gh_in * tc
        dc = gc_in + gh_in * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * C * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            do * o * (1.0 - o),
        ], axis=1)
        dxh = dz @ W
        dh = dxh[:, e:]
        dc_prev = dc * f
        if m is not None:
            dh = dh + gh * ~m
            dc_prev = dc_prev + gc * ~m
        return dxh[:, :e], dh, dc_prev, dz.T @ xh, dz.sum(axis=0)

    out = np.concatenate([h_new, c_new], axis=1)
    return record(out, (x, h, c, w, b), bw, "lstm_cell")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def set_data(self, name: str, data: np.ndarray) -> None:
        t = self._params[name]
        data = np.asarray(data)
        if data.shape != t.shape:
            raise DimensionError(f"{name}: shape {data.shape} differs from {t.shape}")
        t.data = data.astype(t.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with every tensor cast to ``dtype``."""
        out = ParamStore()
        for name, t in self.items():
            out.add(name, Tensor(t.data.astype(dtype, copy=True), dtype=dtype), t.requires_grad)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, Tensor(t.data.copy(), dtype=t.dtype), t.requires_grad)
        return out

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Current gradients, with zeros for parameters the loss did not reach."""
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.items()}

    def num_scalars(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Returns the mapping from leaf tensors to the gradient contributed by this
    call.  Accumulation runs strictly in reverse tape order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaf_grads: Dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaf_grads
    if not tape.owns(loss):
        raise ValueError("loss was not recorded on this tape (or the tape was cleared)")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries[: loss.node[2] + 1]):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                prev = leaf_grads.get(inp)
                leaf_grads[inp] = gi.copy() if prev is None else prev + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi.copy() if prev is None else prev + gi
    for leaf, g in leaf_grads.items():
        g = g.astype(leaf.dtype, copy=False).reshape(leaf.shape)
        leaf_grads[leaf] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaf_grads


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    epsilon: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> List[str]:
        return [n for n, e in self.errors.items() if e > self.tolerance]

    def __str__(self) -> str:
        lines = [f"{n}: max_rel_err={e:.3e} {'ok' if e <= self.tolerance else 'FAIL'}"
                 for n, e in self.errors.items()]
        return "\n".join(lines)


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(fn: Callable[[], Tensor], params: ParamStore, epsilon: float = 1e-5,
               tolerance: float = 1e-4, names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences, per parameter.

    ``fn`` must read its parameters from ``params`` and be deterministic; it is
    called twice up front to confirm that.
    """
    base1 = float(fn().data)
    base2 = float(fn().data)
    if base1 != base2 and not (np.isnan(base1) and np.isnan(base2)):
        raise DeterminismError(f"function is not deterministic: {base1!r} != {base2!r}")
    params.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    analytic = params.grads()
    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    for name in (names if names is not None else params.names()):
        t = params[name]
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = float(fn().data)
            flat[j] = orig - epsilon
            fm = float(fn().data)
            flat[j] = orig
            numeric[j] = (fp - fm) / (2.0 * epsilon)
        err = relative_error(analytic[name].reshape(-1), numeric)
        report.errors[name] = float(err.max()) if err.size else 0.0
    params.zero_grad()
    return report
