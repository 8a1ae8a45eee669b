"""Reverse-mode differentiation over dense 2-D float64 arrays.

Every value is a ``(rows, cols)`` array.  Operations build a dynamic graph; the
tape is recovered from a scalar loss by a topological sort and replayed in
reverse by :func:`backward`.

Only row/column-vector broadcasting is supported in the elementwise ops.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

DEFAULT_LOG_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense 2-D array that may participate in a differentiation tape."""

    __slots__ = ("values", "requires_grad", "grad", "parents", "backward_rule", "op")

    def __init__(self, values, requires_grad: bool = False, *, parents=(), backward_rule=None, op="leaf"):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor values must be at most 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_rule = backward_rule
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(values: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, parents=parents, backward_rule=rule, op=op)


def _broadcast_ok(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _check_elementwise(a: Tensor, b: Tensor, name: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward pass


@dataclass(frozen=True)
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    op: str


class Tape:
    """Operations reachable from a root tensor, in topological order."""

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep GNN graphs blow the recursion limit
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
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        entries = [TapeEntry(t, t.parents, t.op) for t in order if t.parents]
        return cls(entries)


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays, so callers zero them
    between optimisation steps.  Returns the replayed tape.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for entry in reversed(tape.entries):
        out_grad = grads.pop(id(entry.output), None)
        if out_grad is None:
            continue
        in_grads = entry.output.backward_rule(out_grad)
        for parent, g in zip(entry.inputs, in_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
            else:
                key = id(parent)
                grads[key] = grads[key] + g if key in grads else g
    return tape


# ---------------------------------------------------------------------------
# Forward operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), rule, "matmul")


def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor; the matrix receives no gradient."""
    if matrix.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_matmul: incompatible shapes {matrix.shape} and {x.shape}")
    mt = matrix.T.tocsr()

    def rule(g):
        return (np.asarray(mt @ g),)

    return _record(np.asarray(matrix @ x.values), (x,), rule, "sparse_matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.values + b.values, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.values - b.values, (a, b), rule, "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "hadamard")
    av, bv = a.values, b.values

    def rule(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(av * bv, (a, b), rule, "hadamard")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.values * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _record(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.values > 0
    factor = np.where(mask, 1.0, slope)
    return _record(x.values * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    v = x.values
    # expm1 on the clipped branch only, so large positives never reach exp
    neg = alpha * np.expm1(np.minimum(v, 0.0))
    out = np.where(v > 0, v, neg)
    deriv = np.where(v > 0, 1.0, neg + alpha)
    return _record(out, (x,), lambda g: (g * deriv,), "elu")


def exp(x: Tensor) -> Tensor:
    """Elementwise exponential.

    Unbounded: callers shift inputs (e.g. subtract a row max) before calling.
    :func:`row_softmax` and :func:`segment_softmax` do this internally.
    """
    out = np.exp(x.values)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, eps: float = DEFAULT_LOG_EPS) -> Tensor:
    """``log(x + eps)``; the floor keeps near-zero probabilities finite."""
    if not eps > 0:
        raise ValueError(f"log: eps must be > 0, got {eps}")
    shifted = x.values + eps
    return _record(np.log(shifted), (x,), lambda g: (g / shifted,), "log")


def power(x: Tensor, exponent: float) -> Tensor:
    v = x.values
    out = np.power(v, exponent)
    return _record(out, (x,), lambda g: (g * exponent * np.power(v, exponent - 1.0),), "power")


def softplus(x: Tensor) -> Tensor:
    v = x.values
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _record(np.logaddexp(0.0, v), (x,), lambda g: (g * sig,), "softplus")


def row_softmax(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (x,), rule, "row_softmax")


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def rule(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _record(out, (x,), rule, "log_softmax")


def concat_cols(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ValueError("concat_cols needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors[1:]:
        if t.shape[0] != rows:
            raise ValueError(f"concat_cols: row mismatch {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def rule(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _record(np.concatenate([t.values for t in tensors], axis=1), tensors, rule, "concat_cols")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        out = np.array([[x.values.sum()]])
    else:
        out = x.values.sum(axis=axis, keepdims=True)
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    count = x.values.size if axis is None else shape[axis]
    if count == 0:
        raise ValueError(f"reduce_mean over an empty axis of shape {shape}")
    if axis is None:
        out = np.array([[x.values.mean()]])
    else:
        out = x.values.mean(axis=axis, keepdims=True)
    return _record(out, (x,), lambda g: (np.broadcast_to(g / count, shape).copy(),), "mean")


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows: index out of range for {n} rows")

    def rule(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.values[idx], (x,), rule, "gather_rows")


def _check_segments(seg: np.ndarray, num_segments: int, name: str) -> None:
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError(f"{name}: segment id out of range for {num_segments} segments")


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; empty segments give zero rows."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ValueError(f"segment_sum: {seg.shape[0]} segment ids for {x.shape[0]} rows")
    _check_segments(seg, num_segments, "segment_sum")
    out = np.zeros((num_segments, x.shape[1]))
    np.add.at(out, seg, x.values)
    return _record(out, (x,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax over rows of ``x`` grouped by segment, per column.

    Each group is shifted by its own max before exponentiation.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ValueError(f"segment_softmax: {seg.shape[0]} segment ids for {x.shape[0]} rows")
    _check_segments(seg, num_segments, "segment_softmax")
    v = x.values
    peak = np.full((num_segments, v.shape[1]), -np.inf)
    np.maximum.at(peak, seg, v)
    e = np.exp(v - peak[seg])
    denom = np.zeros((num_segments, v.shape[1]))
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def rule(g):
        weighted = np.zeros((num_segments, v.shape[1]))
        np.add.at(weighted, seg, g * out)
        return (out * (g - weighted[seg]),)

    return _record(out, (x,), rule, "segment_softmax")


def _edge_arrays(edges, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(edges, tuple) and len(edges) == 2:
        src, dst = (np.asarray(e, dtype=np.int64) for e in edges)
    else:
        arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src, dst = arr[:, 0], arr[:, 1]
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        raise ValueError(f"edge endpoint out of range for {num_nodes} nodes")
    return src, dst


def segment_aggregate(values: Tensor, edges, mode: str = "sum") -> Tensor:
    """Row ``i`` aggregates ``values[j]`` over edges ``(i, j)``.

    ``edges`` is an ``(E, 2)`` array or a ``(src, dst)`` pair.  Isolated nodes
    yield zero rows for every mode, including ``max``.  For ``max`` the
    gradient goes to the arg-max neighbour, ties to the lowest node index.
    """
    n = values.shape[0]
    src, dst = _edge_arrays(edges, n)
    if mode == "sum":
        return segment_sum(gather_rows(values, dst), src, n)
    if mode == "mean":
        deg = np.bincount(src, minlength=n).astype(np.float64)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)[:, None]
        return hadamard(segment_sum(gather_rows(values, dst), src, n), Tensor(inv))
    if mode == "max":
        return _segment_max(values, src, dst)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _segment_max(values: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    n, d = values.shape
    out = np.zeros((n, d))
    if src.size == 0:
        return _record(out, (values,), lambda g: (np.zeros((n, d)),), "segment_max")
    order = np.lexsort((dst, src))
    s, t = src[order], dst[order]
    gathered = values.values[t]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    owners = s[starts]
    peaks = np.maximum.reduceat(gathered, starts, axis=0)
    out[owners] = peaks
    # first edge (lowest neighbour id) attaining the max within each segment
    positions = np.where(gathered == peaks[np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(s)]))],
                         np.arange(len(s))[:, None], len(s))
    winners = np.minimum.reduceat(positions, starts, axis=0)
    winner_nodes = t[winners]
    cols = np.broadcast_to(np.arange(d), winner_nodes.shape)

    def rule(g):
        grad = np.zeros((n, d))
        np.add.at(grad, (winner_nodes, cols), g[owners])
        return (grad,)

    return _record(out, (values,), rule, "segment_max")
