"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: each operation returns a fresh :class:`Node`
holding the forward value, a zero-initialized gradient buffer of the same
shape, references to its parents, and a closure that maps the node's output
adjoint to per-parent adjoints. ``Node.backward()`` seeds a scalar root with
1, walks the graph once in reverse topological order using pass-local
adjoints, and adds each node's pass total into its persistent ``grad``
buffer -- so running backward twice without zeroing doubles every gradient.

Everything is float64. There is no broadcasting beyond the row-vector cases
the callers need (bias addition, row tiling), no higher-order derivatives,
and no view aliasing: every op materializes its output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateBatchError,
    NonFiniteError,
    NormalizationError,
    ShapeError,
)

# Guard added to norm denominators in backward rules only; keeps the
# subgradient at the origin equal to 0 instead of NaN.
_NORM_GUARD = 1e-30


def as_array(values, shape=None) -> np.ndarray:
    """Copy to a C-contiguous float64 array (0-d allowed), rejecting NaN/Inf."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("array contains non-finite values")
    return arr


def check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {context}")


class Node:
    """One vertex of the computation graph.

    ``value`` and ``grad`` always share a shape. Leaf nodes (parameters,
    constants) have no parents; ``value`` may be updated in place between
    forward passes, which is how the SGD loop mutates parameters.
    """

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node."""
        if self.value.shape != ():
            raise ShapeError(
                f"backward requires a scalar root, got shape {self.value.shape}"
            )
        order = _topo_order(self)
        adjoints: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(order):
            out_adj = adjoints.pop(id(node), None)
            if out_adj is None:  # unreachable side branch
                continue
            node.grad += out_adj
            if node._backward is None:
                continue
            for parent, contrib in zip(node.parents, node._backward(out_adj)):
                if contrib is None:
                    continue
                key = id(parent)
                prev = adjoints.get(key)
                adjoints[key] = contrib if prev is None else prev + contrib

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, leaf={self._backward is None})"


def _topo_order(root: Node) -> list[Node]:
    """Iterative post-order: parents appear before their consumers."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def leaf(values) -> Node:
    """Create a leaf node (parameter or constant) from array-like data."""
    return Node(as_array(values))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def zero_grads(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.zero_grad()


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeError(message)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"sub: shapes {a.shape} and {b.shape} differ")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape} differ")
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Node, c: float) -> Node:
    return Node(a.value + float(c), (a,), lambda g: (g,))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def add_rowvec(a: Node, v: Node) -> Node:
    """Add a length-C vector to every row of an (S, C) matrix."""
    _require(
        a.value.ndim == 2 and v.value.ndim == 1 and a.shape[1] == v.shape[0],
        f"add_rowvec: shapes {a.shape} and {v.shape} incompatible",
    )
    return Node(a.value + v.value, (a, v), lambda g: (g, g.sum(axis=0)))


def tile_rows(v: Node, n: int) -> Node:
    """Repeat a length-D vector as the rows of an (n, D) matrix."""
    _require(v.value.ndim == 1, f"tile_rows: expected vector, got {v.shape}")
    out = np.tile(v.value, (n, 1))
    return Node(out, (v,), lambda g: (g.sum(axis=0),))


def relu(x: Node) -> Node:
    mask = x.value > 0  # subgradient at exactly 0 is 0
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return Node(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    return Node(np.log(x.value), (x,), lambda g: (g / x.value,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    _require(
        a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
        f"matmul: shapes {a.shape} and {b.shape} incompatible",
    )
    return Node(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def matvec(m: Node, v: Node) -> Node:
    _require(
        m.value.ndim == 2 and v.value.ndim == 1 and m.shape[1] == v.shape[0],
        f"matvec: shapes {m.shape} and {v.shape} incompatible",
    )
    return Node(
        m.value @ v.value,
        (m, v),
        lambda g: (np.outer(g, v.value), m.value.T @ g),
    )


def transpose(x: Node) -> Node:
    _require(x.value.ndim == 2, f"transpose: expected matrix, got {x.shape}")
    return Node(np.ascontiguousarray(x.value.T), (x,), lambda g: (g.T,))


def inner(a: Node, b: Node) -> Node:
    _require(
        a.value.ndim == 1 and a.shape == b.shape,
        f"inner: shapes {a.shape} and {b.shape} incompatible",
    )
    return Node(
        np.asarray(a.value @ b.value),
        (a, b),
        lambda g: (g * b.value, g * a.value),
    )


# ---------------------------------------------------------------------------
# reductions, norms, normalization
# ---------------------------------------------------------------------------


def sum_all(x: Node) -> Node:
    shape = x.shape
    return Node(
        np.asarray(x.value.sum()),
        (x,),
        lambda g: (np.full(shape, float(g)),),
    )


def mean_axis(x: Node, axis: int) -> Node:
    _require(x.value.ndim >= 1, "mean_axis: scalar input")
    n = x.shape[axis]
    out = x.value.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return Node(out, (x,), backward)


def l2_norm(v: Node) -> Node:
    _require(v.value.ndim == 1, f"l2_norm: expected vector, got {v.shape}")
    norm = float(np.linalg.norm(v.value))
    return Node(
        np.asarray(norm),
        (v,),
        lambda g: (float(g) * v.value / max(norm, _NORM_GUARD),),
    )


def l2_distance(a: Node, b: Node) -> Node:
    return l2_norm(sub(a, b))


def row_norms(x: Node) -> Node:
    """Per-row Euclidean norms of an (S, D) matrix."""
    _require(x.value.ndim == 2, f"row_norms: expected matrix, got {x.shape}")
    norms = np.linalg.norm(x.value, axis=1)

    def backward(g):
        denom = np.maximum(norms, _NORM_GUARD)
        return (x.value * (g / denom)[:, None],)

    return Node(norms, (x,), backward)


def row_normalize(x: Node) -> Node:
    """Scale each row of an (S, D) matrix to unit Euclidean norm."""
    _require(x.value.ndim == 2, f"row_normalize: expected matrix, got {x.shape}")
    norms = np.linalg.norm(x.value, axis=1)
    small = np.nonzero(norms < 1e-12)[0]
    if small.size:
        raise NormalizationError(
            f"vector at index {int(small[0])} has near-zero norm {norms[small[0]]:.3e}"
        )
    out = x.value / norms[:, None]

    def backward(g):
        dots = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dots) / norms[:, None],)

    return Node(out, (x,), backward)


def softmax(x: Node) -> Node:
    """Softmax over the last axis of a vector or matrix.

    Max-subtraction keeps arbitrarily large inputs from overflowing; the
    output always sums to 1 along the last axis.
    """
    _require(x.value.ndim in (1, 2), f"softmax: expected 1-D or 2-D, got {x.shape}")
    _require(x.shape[-1] >= 1, "softmax: empty input")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Node(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    old = x.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    _require(len(parts) >= 1, "concat: no inputs")
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Node(np.concatenate(values, axis=axis), tuple(parts), backward)


def take_row(x: Node, i: int) -> Node:
    _require(x.value.ndim == 2, f"take_row: expected matrix, got {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return Node(x.value[i].copy(), (x,), backward)


def take_item(x: Node, i: int) -> Node:
    _require(x.value.ndim == 1, f"take_item: expected vector, got {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return Node(np.asarray(x.value[i]), (x,), backward)


def slice_rows(x: Node, start: int, stop: int) -> Node:
    _require(x.value.ndim == 2, f"slice_rows: expected matrix, got {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return Node(x.value[start:stop].copy(), (x,), backward)


def stack_rows(rows: Sequence[Node]) -> Node:
    _require(len(rows) >= 1, "stack_rows: no inputs")

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    return Node(np.stack([r.value for r in rows]), tuple(rows), backward)


# ---------------------------------------------------------------------------
# spatial ops for the toy encoders
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _wrap_patch_indices(h: int, w: int, c: int, kh: int, kw: int) -> np.ndarray:
    """Flat gather indices turning an (H, W, C) array into (H*W, kh*kw*C)
    patches centered at each position, with circular wraparound."""
    dr = np.arange(kh) - kh // 2
    dc = np.arange(kw) - kw // 2
    rows = (np.arange(h)[:, None] + dr[None, :]) % h  # (H, kh)
    cols = (np.arange(w)[:, None] + dc[None, :]) % w  # (W, kw)
    # index[i, j, a, b, ch] -> flat offset of x[rows[i, a], cols[j, b], ch]
    flat = (
        rows[:, None, :, None, None] * (w * c)
        + cols[None, :, None, :, None] * c
        + np.arange(c)[None, None, None, None, :]
    )
    return flat.reshape(h * w, kh * kw * c)


def im2col(x: Node, kh: int, kw: int) -> Node:
    """Extract circularly-padded kh x kw patches from an (H, W, C) array.

    Output is (H*W, kh*kw*C); a stride-1 'same' convolution is then a single
    matmul against a (kh*kw*C, C_out) filter matrix.
    """
    _require(x.value.ndim == 3, f"im2col: expected (H, W, C), got {x.shape}")
    h, w, c = x.shape
    idx = _wrap_patch_indices(h, w, c, kh, kw)
    flat = x.value.reshape(-1)

    def backward(g):
        out = np.zeros(h * w * c)
        np.add.at(out, idx, g)
        return (out.reshape(h, w, c),)

    return Node(flat[idx], (x,), backward)


def avg_pool2(x: Node) -> Node:
    """2x2 average pooling of an (H, W, C) array; odd extents are cropped."""
    _require(x.value.ndim == 3, f"avg_pool2: expected (H, W, C), got {x.shape}")
    h, w, c = x.shape
    h2, w2 = (h // 2) * 2, (w // 2) * 2
    _require(h2 >= 2 and w2 >= 2, f"avg_pool2: input {x.shape} too small")
    v = x.value[:h2, :w2]
    out = v.reshape(h2 // 2, 2, w2 // 2, 2, c).mean(axis=(1, 3))

    def backward(g):
        full = np.zeros((h, w, c))
        expanded = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
        full[:h2, :w2] = expanded
        return (full,)

    return Node(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics.

    ``gamma``/``beta`` are trainable leaf nodes; the running statistics are
    plain buffers updated with momentum in training mode. ``mode`` selects
    the default behaviour; callers may override it per invocation.
    """

    gamma: Node
    beta: Node
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "training"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=leaf(np.ones(channels)),
            beta=leaf(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batch_norm(
    x: Node,
    state: BatchNormState,
    mode: str | None = None,
    update_running: bool = True,
) -> Node:
    """Normalize the channels (columns) of an (S, C) matrix.

    Training mode normalizes with the biased statistics of the current rows
    and, when ``update_running`` is set, folds the unbiased variance into the
    running buffers. Inference mode is a per-channel affine map from the
    running statistics and never mutates state.
    """
    mode = state.mode if mode is None else mode
    _require(x.value.ndim == 2, f"batch_norm: expected (S, C), got {x.shape}")
    _require(
        x.shape[1] == state.channels,
        f"batch_norm: {x.shape[1]} columns vs {state.channels} channels",
    )
    gamma, beta = state.gamma, state.beta

    if mode == "training":
        s = x.shape[0]
        if s < 2:
            raise DegenerateBatchError(
                "batch statistics over a single row are undefined; need S >= 2"
            )
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.value - mu) * inv_std
        if update_running:
            m = state.momentum
            # in-place so external references to the buffers stay valid
            state.running_mean *= 1.0 - m
            state.running_mean += m * mu
            state.running_var *= 1.0 - m
            state.running_var += m * var * s / (s - 1)

        def backward(g):
            g_gamma = (g * xhat).sum(axis=0)
            g_beta = g.sum(axis=0)
            gx = (
                gamma.value
                * inv_std
                * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))
            )
            return (gx, g_gamma, g_beta)

    elif mode == "inference":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.value - state.running_mean) * inv_std

        def backward(g):
            return (
                g * (gamma.value * inv_std),
                (g * xhat).sum(axis=0),
                g.sum(axis=0),
            )

    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    return Node(gamma.value * xhat + beta.value, (x, gamma, beta), backward)
