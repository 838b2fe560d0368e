"""Dense and sparse numeric core with reverse-mode differentiation.

Tensors hold 2-D float64 arrays. Ops build a closure graph when any
input requires gradients; backward() replays the closures in reverse
topological order. Results that need no gradient skip graph building,
so evaluation passes stay cheap.

Forward kernels for graph ops are written so that relabeling the nodes
of a graph permutes the outputs bitwise: matmul runs row by row, sparse
products accumulate per row in stored-entry order, and segment
reductions keep each segment's rows in construction order. Backward
passes only need determinism, so they use plain BLAS calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ShapeError, TrainingError

__all__ = [
    "Tensor",
    "SparseAdjacency",
    "Segments",
    "as_tensor",
    "matmul",
    "spmm",
    "add",
    "add_const",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "relu",
    "leaky_relu",
    "sigmoid",
    "elu",
    "row_softmax",
    "dropout",
    "concat_cols",
    "concat_rows",
    "gather_rows",
    "segment_sum",
    "segment_max_const",
    "expand_segments",
    "scale_rows",
    "row_sum",
    "sum_all",
    "mean_all",
    "softmax_cross_entropy",
    "binary_cross_entropy_with_logits",
    "mse",
    "finite_difference_check",
]


def _as_2d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """2-D float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_2d(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._prev: tuple = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        # iterative postorder; training graphs get too deep for recursion
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # one-shot graph: closures capture their output tensor, a reference
        # cycle that keeps big intermediates alive until gc; break it now
        for node in topo:
            node._backward = None
            node._prev = ()

    def release_graph(self) -> None:
        """Free a graph that never gets a backward pass (eval losses)."""
        stack: list[Tensor] = [self]
        seen: set[int] = set()
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.extend(node._prev)
            node._backward = None
            node._prev = ()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap op output; the closure graph is built only when needed."""
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._prev = tuple(p for p in parents if p.requires_grad)
        out._backward = backward(out) if callable(backward) else None
    return out


def _row_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one small gemm per row: row i of the result never depends on row order
    return np.ascontiguousarray((a[:, None, :] @ b).reshape(a.shape[0], b.shape[1]))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    data = _row_matmul(a.data, b.data)

    def backward(out):
        def run():
            if a.requires_grad:
                a.accum_grad(out.grad @ b.data.T)
            if b.requires_grad:
                b.accum_grad(a.data.T @ out.grad)

        return run

    return _make(data, (a, b), backward)


@dataclass
class Segments:
    """Contiguous row groups: starts[k] .. starts[k+1] form segment k.

    Segments must be non-empty so reduceat sees strictly increasing
    boundaries.
    """

    starts: np.ndarray  # int64, starts[0] == 0, strictly increasing
    sizes: np.ndarray
    n_rows: int

    @classmethod
    def from_sorted_ids(cls, ids: np.ndarray, n_segments: int) -> "Segments":
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ShapeError("no rows to segment")
        counts = np.bincount(ids, minlength=n_segments)
        if np.any(counts == 0):
            raise ShapeError("empty segment")
        if np.any(np.diff(ids) < 0):
            raise ShapeError("segment ids not sorted")
        starts = np.zeros(n_segments, dtype=np.int64)
        starts[1:] = np.cumsum(counts)[:-1]
        return cls(starts=starts, sizes=counts, n_rows=int(ids.size))


class SparseAdjacency:
    """Square sparse matrix stored as (row, col, weight) entries grouped by
    row; within a row, entries keep the order they were appended in, which
    fixes the accumulation order of products."""

    def __init__(self, n: int, rows, cols, weights):
        self.n = int(n)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if not (rows.shape == cols.shape == weights.shape) or rows.ndim != 1:
            raise ShapeError("entry arrays must be 1-D and equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n or cols.min() < 0 or cols.max() >= self.n:
                raise ShapeError("entry index out of range")
            if np.any(np.diff(rows) < 0):
                raise ShapeError("entries not grouped by row")
            pairs = rows * self.n + cols
            if np.unique(pairs).size != pairs.size:
                raise ShapeError("duplicate (row, col) entry")
        if not np.all(np.isfinite(weights)):
            raise ShapeError("non-finite weight")
        self.rows = rows
        self.cols = cols
        self.weights = weights
        self._csr = None
        self._csr_t = None

    @classmethod
    def from_entries(cls, n: int, entries) -> "SparseAdjacency":
        """Build from (row, col, weight) tuples; a stable sort groups them by
        row while preserving within-row append order."""
        if entries:
            rows = np.array([e[0] for e in entries], dtype=np.int64)
            cols = np.array([e[1] for e in entries], dtype=np.int64)
            weights = np.array([e[2] for e in entries], dtype=np.float64)
            order = np.argsort(rows, kind="stable")
            rows, cols, weights = rows[order], cols[order], weights[order]
        else:
            rows = np.empty(0, dtype=np.int64)
            cols = np.empty(0, dtype=np.int64)
            weights = np.empty(0, dtype=np.float64)
        return cls(n, rows, cols, weights)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist()))

    def _matrix(self):
        if self._csr is None:
            indptr = np.zeros(self.n + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.rows, minlength=self.n), out=indptr[1:])
            # constructed directly so scipy never reorders the stored entries
            self._csr = sp.csr_matrix((self.weights, self.cols, indptr), shape=(self.n, self.n))
        return self._csr

    def _matrix_t(self):
        if self._csr_t is None:
            order = np.argsort(self.cols, kind="stable")
            indptr = np.zeros(self.n + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.cols[order], minlength=self.n), out=indptr[1:])
            self._csr_t = sp.csr_matrix(
                (self.weights[order], self.rows[order], indptr), shape=(self.n, self.n)
            )
        return self._csr_t

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=np.float64)
        dense[self.rows, self.cols] = self.weights
        return dense


def spmm(adj: SparseAdjacency, h) -> Tensor:
    """out[i] = sum_j w_ij * h[j], accumulated in stored-entry order."""
    h = as_tensor(h)
    if adj.n != h.shape[0]:
        raise ShapeError(f"adjacency n={adj.n} vs h rows {h.shape[0]}")
    data = adj._matrix() @ h.data

    def backward(out):
        def run():
            h.accum_grad(adj._matrix_t() @ out.grad)

        return run

    return _make(np.ascontiguousarray(data), (h,), backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce grad {grad.shape} to {shape}")
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    for ax in (0, 1):
        if a.shape[ax] != b.shape[ax] and 1 not in (a.shape[ax], b.shape[ax]):
            raise ShapeError(f"{opname} {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward(out):
        def run():
            if a.requires_grad:
                a.accum_grad(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(out.grad, b.shape))

        return run

    return _make(data, (a, b), backward)


def add_const(t, const) -> Tensor:
    t = as_tensor(t)
    data = t.data + np.asarray(const, dtype=np.float64)
    if data.shape != t.shape:
        raise ShapeError(f"add_const changed shape {t.shape} -> {data.shape}")

    def backward(out):
        def run():
            t.accum_grad(out.grad)

        return run

    return _make(data, (t,), backward)


def neg(t) -> Tensor:
    return scale(t, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward(out):
        def run():
            if a.requires_grad:
                a.accum_grad(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(out.grad * a.data, b.shape))

        return run

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    data = a.data / b.data

    def backward(out):
        def run():
            if a.requires_grad:
                a.accum_grad(_unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(-out.grad * data / b.data, b.shape))

        return run

    return _make(data, (a, b), backward)


def scale(t, s: float) -> Tensor:
    t = as_tensor(t)
    s = float(s)
    data = t.data * s

    def backward(out):
        def run():
            t.accum_grad(out.grad * s)

        return run

    return _make(data, (t,), backward)


def scale_rows(t, col) -> Tensor:
    """Multiply row i by the constant col[i]."""
    t = as_tensor(t)
    col = np.asarray(col, dtype=np.float64).reshape(-1, 1)
    if col.shape[0] != t.shape[0]:
        raise ShapeError(f"scale_rows {t.shape} vs {col.shape[0]} factors")
    data = t.data * col

    def backward(out):
        def run():
            t.accum_grad(out.grad * col)

        return run

    return _make(data, (t,), backward)


def exp(t) -> Tensor:
    t = as_tensor(t)
    data = np.exp(t.data)

    def backward(out):
        def run():
            t.accum_grad(out.grad * data)

        return run

    return _make(data, (t,), backward)


def relu(t) -> Tensor:
    t = as_tensor(t)
    data = np.maximum(t.data, 0.0)

    def backward(out):
        def run():
            t.accum_grad(out.grad * (t.data > 0))

        return run

    return _make(data, (t,), backward)


def leaky_relu(t, slope: float = 0.2) -> Tensor:
    t = as_tensor(t)
    slope = float(slope)
    data = np.where(t.data > 0, t.data, slope * t.data)

    def backward(out):
        def run():
            t.accum_grad(out.grad * np.where(t.data > 0, 1.0, slope))

        return run

    return _make(data, (t,), backward)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    data = _stable_sigmoid(t.data)

    def backward(out):
        def run():
            t.accum_grad(out.grad * data * (1.0 - data))

        return run

    return _make(data, (t,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def elu(t, alpha: float = 1.0) -> Tensor:
    t = as_tensor(t)
    alpha = float(alpha)
    # expm1 on the clipped input avoids overflow for large positives
    neg_part = alpha * np.expm1(np.minimum(t.data, 0.0))
    data = np.where(t.data > 0, t.data, neg_part)

    def backward(out):
        def run():
            t.accum_grad(out.grad * np.where(t.data > 0, 1.0, neg_part + alpha))

        return run

    return _make(data, (t,), backward)


def row_softmax(t) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(out):
        def run():
            g = out.grad
            dot = (g * data).sum(axis=1, keepdims=True)
            t.accum_grad(data * (g - dot))

        return run

    return _make(data, (t,), backward)


def dropout(t, p: float, seed, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    seed may be an int or a numpy Generator; passing a Generator lets a
    training loop consume one reproducible stream across epochs.
    """
    t = as_tensor(t)
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return t
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(t.shape) >= p) / (1.0 - p)
    data = t.data * mask

    def backward(out):
        def run():
            t.accum_grad(out.grad * mask)

        return run

    return _make(data, (t,), backward)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=1)
    na = a.shape[1]

    def backward(out):
        def run():
            if a.requires_grad:
                a.accum_grad(out.grad[:, :na])
            if b.requires_grad:
                b.accum_grad(out.grad[:, na:])

        return run

    return _make(data, (a, b), backward)


def concat_rows(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=0)
    na = a.shape[0]

    def backward(out):
        def run():
            if a.requires_grad:
                a.accum_grad(out.grad[:na])
            if b.requires_grad:
                b.accum_grad(out.grad[na:])

        return run

    return _make(data, (a, b), backward)


def gather_rows(t, indices) -> Tensor:
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather indices must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise ShapeError("gather index out of range")
    data = t.data[idx]

    def backward(out):
        def run():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add.at(t.grad, idx, out.grad)

        return run

    return _make(data, (t,), backward)


def segment_sum(t, seg: Segments) -> Tensor:
    t = as_tensor(t)
    if t.shape[0] != seg.n_rows:
        raise ShapeError(f"segment_sum rows {t.shape[0]} != {seg.n_rows}")
    data = np.add.reduceat(t.data, seg.starts, axis=0)

    def backward(out):
        def run():
            t.accum_grad(np.repeat(out.grad, seg.sizes, axis=0))

        return run

    return _make(data, (t,), backward)


def segment_max_const(t: Tensor, seg: Segments) -> np.ndarray:
    """Per-segment max as a constant array (used to shift softmax logits;
    the shift cancels in the gradient, so no backward is registered)."""
    if t.shape[0] != seg.n_rows:
        raise ShapeError(f"segment_max rows {t.shape[0]} != {seg.n_rows}")
    return np.maximum.reduceat(t.data, seg.starts, axis=0)


def expand_segments(t, seg: Segments) -> Tensor:
    """Repeat segment k's single row sizes[k] times."""
    t = as_tensor(t)
    if t.shape[0] != seg.starts.shape[0]:
        raise ShapeError(f"expand_segments rows {t.shape[0]} != {seg.starts.shape[0]}")
    data = np.repeat(t.data, seg.sizes, axis=0)

    def backward(out):
        def run():
            t.accum_grad(np.add.reduceat(out.grad, seg.starts, axis=0))

        return run

    return _make(data, (t,), backward)


def row_sum(t) -> Tensor:
    t = as_tensor(t)
    data = t.data.sum(axis=1, keepdims=True)

    def backward(out):
        def run():
            t.accum_grad(np.broadcast_to(out.grad, t.shape))

        return run

    return _make(data, (t,), backward)


def sum_all(t) -> Tensor:
    t = as_tensor(t)
    data = np.array([[t.data.sum()]])

    def backward(out):
        def run():
            t.accum_grad(np.full_like(t.data, out.grad[0, 0]))

        return run

    return _make(data, (t,), backward)


def mean_all(t) -> Tensor:
    t = as_tensor(t)
    return scale(sum_all(t), 1.0 / t.data.size)


def softmax_cross_entropy(logits, one_hot_labels) -> Tensor:
    """Mean cross-entropy between row softmax of logits and one-hot rows."""
    logits = as_tensor(logits)
    labels = np.asarray(one_hot_labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if not np.all((labels == 0) | (labels == 1)) or not np.all(labels.sum(axis=1) == 1):
        raise ShapeError("labels must be one-hot rows")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    per_row = lse[:, 0] - (x * labels).sum(axis=1)
    n = x.shape[0]
    data = np.array([[per_row.sum() / n]])

    def backward(out):
        def run():
            soft = np.exp(x - lse)
            logits.accum_grad((soft - labels) * (out.grad[0, 0] / n))

        return run

    return _make(data, (logits,), backward)


def binary_cross_entropy_with_logits(scores, labels) -> Tensor:
    """Mean BCE on raw logits, computed in the stable max/log1p form."""
    scores = as_tensor(scores)
    z = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    if not np.all((z == 0) | (z == 1)):
        raise ShapeError("labels must be 0 or 1")
    x = scores.data
    per = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    data = np.array([[per.sum() / n]])

    def backward(out):
        def run():
            scores.accum_grad((_stable_sigmoid(x) - z) * (out.grad[0, 0] / n))

        return run

    return _make(data, (scores,), backward)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.array([[(diff * diff).sum() / n]])

    def backward(out):
        def run():
            g = out.grad[0, 0] * 2.0 / n
            if a.requires_grad:
                a.accum_grad(g * diff)
            if b.requires_grad:
                b.accum_grad(-g * diff)

        return run

    return _make(data, (a, b), backward)


def check_finite_loss(loss: Tensor, context: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at {context}: {value!r}")
    return value


def finite_difference_check(f, t: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between f's analytic gradient at t and central
    finite differences, per coordinate: |a - n| / max(1e-12, |a| + |n|)."""
    if not t.requires_grad:
        raise ConfigError("finite_difference_check needs requires_grad on t")
    t.grad = None
    out = f(t)
    out.backward()
    analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    numeric = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = f(t).item()
        flat[i] = saved - eps
        down = f(t).item()
        flat[i] = saved
        num_flat[i] = (up - down) / (2.0 * eps)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
