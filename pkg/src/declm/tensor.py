"""Minimal reverse-mode autodiff over dense numpy arrays.

Define-by-run: while a Tape is active, every op appends a node holding
its inputs and a backward rule; `backward(loss)` replays the tape in
exact reverse recording order. Storage is float32 by default (float64
available for verification); scalar reductions accumulate in float64.

One tape is single-threaded; distinct tapes may live on distinct
threads (the active tape is thread-local).
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericDomainError

_tls = threading.local()


def active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of the ops of one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False


class Node:
    """One recorded op: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "out", "backward", "tape")

    def __init__(self, inputs, out, backward, tape):
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.tape = tape


class Tensor:
    """n-d float array, optionally a node on the recording tape.

    `grad` is allocated lazily during backward and always matches
    `data`'s shape. A tensor without a producing node is a leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(np.float32)
        else:
            data = np.asarray(data, dtype=dtype or np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __neg__(self):
        return neg(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _record(out: Tensor, inputs: tuple, backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(inputs, out, backward, tape)
        out.node = node
        tape.nodes.append(node)
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _grad_buffer(t: Tensor):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor with dLoss/d(.)."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    if loss.node is None or loss.node.tape is not tape:
        raise ContractError("loss was not recorded on the active tape")
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is not None:
            node.backward(g)


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not "
                             "equal and neither is a scalar")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Fold a broadcast gradient back onto a scalar operand."""
    if t.shape == g.shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=t.data.dtype).reshape(t.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, _reduce_to(g, a))
        _accum(b, _reduce_to(g, b))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a))
        _accum(b, _reduce_to(g * a.data, b))

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bwd(g):
        _accum(a, -g)

    return _record(out, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    return mul(a, Tensor(np.asarray(c, dtype=a.data.dtype)))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    y = out.data

    def bwd(g):
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data.astype(x.dtype, copy=False))
    y = out.data

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericDomainError("log requires strictly positive input")
    out = Tensor(np.log(a.data))

    def bwd(g):
        _accum(a, g / a.data)

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    y = out.data

    def bwd(g):
        _accum(a, g * y)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def bwd(g):
        _accum(a, g.T)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Scalar sum; accumulation runs in float64 regardless of storage dtype."""
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype))

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _record(out, (a,), bwd)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an [m, n] matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: shapes {a.shape} and {v.shape}")
    out = Tensor(a.data + v.data[None, :])

    def bwd(g):
        _accum(a, g)
        _accum(v, np.asarray(g.sum(axis=0, dtype=np.float64), dtype=v.data.dtype))

    return _record(out, (a, v), bwd)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    `mask` (same shape, bool) marks valid positions; masked entries get
    weight zero and every row must keep at least one valid entry.
    """
    x = a.data
    if x.size == 0:
        raise DimensionError("softmax of an empty tensor")
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("softmax input must be finite")
    if mask is not None:
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != input {x.shape}")
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax mask leaves an all-masked row")
        shifted = np.where(mask, x, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.exp(np.where(mask, x - m, 0.0)) * mask
    else:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("log_softmax input must be finite")
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor((shifted - lse).astype(x.dtype, copy=False))
    y = out.data

    def bwd(g):
        _accum(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _record(out, (a,), bwd)


def conv1d_same(signal: Tensor, filters: Tensor) -> Tensor:
    """Length-preserving cross-correlation of row signals with K filters.

    signal [T] -> [T, K]; signal [B, T] -> [B, T, K]. Zero padding keeps
    the time length; filter width must be odd.
    """
    f = filters.data
    if f.ndim != 2:
        raise DimensionError(f"filters must be [K, w], got shape {filters.shape}")
    k, w = f.shape
    if w % 2 == 0:
        raise ConfigError(f"filter width must be odd, got {w}")
    x = signal.data
    if x.ndim not in (1, 2):
        raise DimensionError(f"signal must be [T] or [B, T], got shape {signal.shape}")
    off = w // 2
    x2 = x[None, :] if x.ndim == 1 else x
    t = x2.shape[1]
    pad = np.zeros((x2.shape[0], t + 2 * off), dtype=x2.dtype)
    pad[:, off:off + t] = x2
    windows = np.lib.stride_tricks.sliding_window_view(pad, w, axis=1)  # [B, T, w]
    y = np.einsum("btw,kw->btk", windows, f).astype(x.dtype, copy=False)
    out = Tensor(y[0] if x.ndim == 1 else y)

    def bwd(g):
        g3 = g[None] if x.ndim == 1 else g
        _accum(filters, np.einsum("btk,btw->kw", g3, windows).astype(f.dtype, copy=False))
        if signal.requires_grad:
            dpad = np.zeros_like(pad)
            for j in range(w):
                dpad[:, j:j + t] += np.einsum("btk,k->bt", g3, f[:, j])
            ds = dpad[:, off:off + t]
            _accum(signal, ds[0] if x.ndim == 1 else ds)

    return _record(out, (signal, filters), bwd)


def gather_rows(a: Tensor, ids) -> Tensor:
    """Row lookup by integer index; backward scatter-adds into the source."""
    idx = np.asarray(ids, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])

    def bwd(g):
        if a.requires_grad:
            np.add.at(_grad_buffer(a), idx, g)

    return _record(out, (a,), bwd)


def take_per_row(a: Tensor, ids) -> Tensor:
    """out[i] = a[i, ids[i]]."""
    idx = np.asarray(ids, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"take_per_row: shapes {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx].copy())

    def bwd(g):
        if a.requires_grad:
            _grad_buffer(a)[rows, idx] += g

    return _record(out, (a,), bwd)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise DimensionError(f"slice_cols [{lo}:{hi}] of shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data[:, lo:hi]))

    def bwd(g):
        if a.requires_grad:
            _grad_buffer(a)[:, lo:hi] += g

    return _record(out, (a,), bwd)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.shape[0]):
        raise DimensionError(f"slice_rows [{lo}:{hi}] of shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data[lo:hi]))

    def bwd(g):
        if a.requires_grad:
            _grad_buffer(a)[lo:hi] += g

    return _record(out, (a,), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows of an empty list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _record(out, tuple(parts), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols of an empty list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return _record(out, tuple(parts), bwd)


def weighted_sum_rows(weights: Tensor, rows: Tensor) -> Tensor:
    """Per-batch-item mixture of rows: out[b] = sum_t weights[b,t] * rows[b*T+t].

    `rows` is the (b, t)-flattened [B*T, d] layout used for encoder outputs.
    """
    if weights.data.ndim != 2 or rows.data.ndim != 2:
        raise DimensionError("weighted_sum_rows expects matrices")
    b, t = weights.shape
    if rows.shape[0] != b * t:
        raise DimensionError(f"weighted_sum_rows: {rows.shape[0]} rows != {b}*{t}")
    r3 = rows.data.reshape(b, t, rows.shape[1])
    out = Tensor(np.einsum("bt,btd->bd", weights.data, r3).astype(rows.data.dtype, copy=False))

    def bwd(g):
        _accum(weights, np.einsum("bd,btd->bt", g, r3).astype(weights.data.dtype, copy=False))
        _accum(rows, (weights.data[:, :, None] * g[:, None, :]).reshape(rows.shape))

    return _record(out, (weights, rows), bwd)
