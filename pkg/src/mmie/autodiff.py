"""Tape-based reverse-mode automatic differentiation over dense rank-2 arrays.

Every tensor is a (rows, cols) float matrix. Operations executed while a
Tape is active are recorded in creation order (which is topological by
construction); Tape.backward walks the records once in reverse, pushing
vector-Jacobian products to the inputs. Without an active tape, ops are
plain numpy evaluation (used for eval mode and finite-difference probes).

Gradients accumulate across backward calls; call zero_grad before an
optimizer step to reset parameter gradients.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

_uid = itertools.count()
_TAPES: list["Tape"] = []

Number = Union[int, float]


class Tensor:
    """Dense rank-2 array with a same-shape gradient accumulator."""

    __slots__ = ("uid", "values", "_grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are rank-2, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape}")
        self.uid = next(_uid)
        self.values = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.full((1, 1), float(other), dtype=self.values.dtype))

    def __add__(self, other): return add(self, self._wrap(other))
    def __radd__(self, other): return add(self._wrap(other), self)
    def __sub__(self, other): return sub(self, self._wrap(other))
    def __rsub__(self, other): return sub(self._wrap(other), self)
    def __mul__(self, other): return mul(self, self._wrap(other))
    def __rmul__(self, other): return mul(self._wrap(other), self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return mul(self, self._wrap(-1.0))

    def __repr__(self):
        tag = self.name or f"t{self.uid}"
        return f"Tensor({tag}, shape={self.shape})"


def param(values, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name, dtype=dtype)


def constant(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


class OpRecord(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of applied operations (inputs always precede use)."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def add(self, op, inputs, output, vjp) -> None:
        self.records.append(OpRecord(op, tuple(inputs), output, vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate grads of everything `loss` depends on.

        Seeds d(loss)/d(loss) = 1 and visits records in reverse order,
        exactly once each. Repeated calls accumulate into .grad.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        flows: dict[int, np.ndarray] = {loss.uid: np.ones((1, 1), dtype=loss.values.dtype)}
        nodes: dict[int, Tensor] = {loss.uid: loss}
        for rec in reversed(self.records):
            g = flows.get(rec.output.uid)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                if t.uid in flows:
                    flows[t.uid] = flows[t.uid] + gi
                else:
                    flows[t.uid] = gi
                    nodes[t.uid] = t
        for uid, t in nodes.items():
            t.grad += flows[uid]


@contextmanager
def record():
    tape = Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op: str, inputs: Sequence[Tensor], out: Tensor, vjp) -> Tensor:
    tape = _tape()
    if tape is not None:
        tape.add(op, inputs, out, vjp)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# arithmetic

def _is_scalar(t: Tensor) -> bool:
    return t.shape == (1, 1)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.values + b.values)
        vjp = lambda g: (g, g)
    elif _is_scalar(b):
        out = Tensor(a.values + b.values)
        vjp = lambda g: (g, g.sum().reshape(1, 1))
    elif _is_scalar(a):
        out = Tensor(a.values + b.values)
        vjp = lambda g: (g.sum().reshape(1, 1), g)
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")
    return _emit("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.values - b.values)
        vjp = lambda g: (g, -g)
    elif _is_scalar(b):
        out = Tensor(a.values - b.values)
        vjp = lambda g: (g, -g.sum().reshape(1, 1))
    elif _is_scalar(a):
        out = Tensor(a.values - b.values)
        vjp = lambda g: (g.sum().reshape(1, 1), -g)
    else:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not match")
    return _emit("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.values * b.values)
        vjp = lambda g: (g * b.values, g * a.values)
    elif _is_scalar(b):
        out = Tensor(a.values * b.values)
        vjp = lambda g: (g * b.values, (g * a.values).sum().reshape(1, 1))
    elif _is_scalar(a):
        out = Tensor(a.values * b.values)
        vjp = lambda g: ((g * b.values).sum().reshape(1, 1), g * a.values)
    else:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    return _emit("mul", (a, b), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return _emit("matmul", (a, b), out, vjp)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.values.T.copy())
    return _emit("transpose", (a,), out, lambda g: (g.T,))


# ---------------------------------------------------------------------------
# pointwise

def exp(a: Tensor) -> Tensor:
    vals = np.exp(a.values)
    out = Tensor(vals)
    return _emit("exp", (a,), out, lambda g: (g * vals,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor(np.log(a.values))
    return _emit("log", (a,), out, lambda g: (g / a.values,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    vals = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(vals)
    return _emit("sigmoid", (a,), out, lambda g: (g * vals * (1.0 - vals),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))
    # subgradient at 0 is 0
    return _emit("relu", (a,), out, lambda g: (g * (a.values > 0.0),))


# ---------------------------------------------------------------------------
# reductions and row-structured ops

def row_softmax(x: Tensor) -> Tensor:
    """Per-row softmax, computed with max-subtraction for stability."""
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", (x,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by learned gain and bias."""
    c = x.shape[1]
    if gain.shape != (1, c) or bias.shape != (1, c):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be (1, {c})")
    mean = x.values.mean(axis=1, keepdims=True)
    centered = x.values - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.values + bias.values)

    def vjp(g):
        dxhat = g * gain.values
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return dx, dgain, dbias

    return _emit("layer_norm", (x, gain, bias), out, vjp)


def mean_pool_rows(x: Tensor) -> Tensor:
    """Column-wise mean over rows; gradient distributes 1/r to each row."""
    r = x.shape[0]
    out = Tensor(x.values.mean(axis=0, keepdims=True))
    return _emit("mean_pool_rows", (x,), out,
                 lambda g: (np.repeat(g / r, r, axis=0),))


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows; ties send the gradient to the first row."""
    idx = x.values.argmax(axis=0)
    out = Tensor(x.values.max(axis=0, keepdims=True))

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[idx, np.arange(x.shape[1])] = g[0]
        return (gx,)

    return _emit("max_pool_rows", (x,), out, vjp)


def log_sum_exp(x: Tensor, axis: int | None = None) -> Tensor:
    """Stable log-sum-exp: over all entries (axis=None), columns (0) or rows (1)."""
    v = x.values
    if axis is None:
        m = v.max()
        out_vals = np.array([[m + np.log(np.exp(v - m).sum())]])
        soft = np.exp(v - out_vals[0, 0])
        out = Tensor(out_vals)
        return _emit("log_sum_exp", (x,), out, lambda g: (g[0, 0] * soft,))
    if axis not in (0, 1):
        raise ShapeError(f"log_sum_exp: axis must be None, 0 or 1, got {axis}")
    m = v.max(axis=axis, keepdims=True)
    out_vals = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    soft = np.exp(v - out_vals)
    out = Tensor(out_vals)
    # g broadcasts from the reduced axis back over soft's full shape
    return _emit("log_sum_exp", (x,), out, lambda g: (soft * g,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([[x.values.sum()]], dtype=x.values.dtype))
    return _emit("sum_all", (x,), out,
                 lambda g: (np.full_like(x.values, g[0, 0]),))


# ---------------------------------------------------------------------------
# shape plumbing

def broadcast_rows(x: Tensor, rows: int) -> Tensor:
    """Tile a (1, c) row down to (rows, c)."""
    if x.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected a (1, c) tensor, got {x.shape}")
    out = Tensor(np.repeat(x.values, rows, axis=0))
    return _emit("broadcast_rows", (x,), out,
                 lambda g: (g.sum(axis=0, keepdims=True),))


def broadcast_cols(x: Tensor, cols: int) -> Tensor:
    """Tile an (r, 1) column across to (r, cols)."""
    if x.shape[1] != 1:
        raise ShapeError(f"broadcast_cols: expected an (r, 1) tensor, got {x.shape}")
    out = Tensor(np.repeat(x.values, cols, axis=1))
    return _emit("broadcast_cols", (x,), out,
                 lambda g: (g.sum(axis=1, keepdims=True),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {p.shape} vs ({rows}, ...)")
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=1))
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", parts, out, vjp)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by index; the gradient scatter-adds back (repeats sum)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: indices must be a non-empty 1-d sequence")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ShapeError(
            f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.values[idx])

    def vjp(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("gather_rows", (x,), out, vjp)


def slice_block(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Contiguous sub-block x[r0:r1, c0:c1]; gradient pads back with zeros."""
    if not (0 <= r0 < r1 <= x.shape[0] and 0 <= c0 < c1 <= x.shape[1]):
        raise ShapeError(
            f"slice_block: [{r0}:{r1}, {c0}:{c1}] out of bounds for {x.shape}")
    out = Tensor(x.values[r0:r1, c0:c1].copy())

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[r0:r1, c0:c1] = g
        return (gx,)

    return _emit("slice_block", (x,), out, vjp)
