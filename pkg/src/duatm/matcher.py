"""Dual attention matching of variable-length feature sequences.

For each reference vector x of one sequence, a transform layer produces a
shared nonnegative filter q = ReLU(BN(Wx + b)). Attending q over the
reference's own sequence yields a refined vector (corrupted positions get
down-weighted); attending the same q over the opposite sequence yields a
semantically aligned counterpart. Per-reference Euclidean distances between
refined and aligned vectors, averaged over both comparison directions, give
a symmetric holistic distance between the two sequences.

Two ablated variants isolate one attention pathway each: ``intra`` compares
the refined reference against the opposite sequence's plain mean (uniform
alignment), ``inter`` compares the raw reference against the attentively
aligned counterpart. ``avepool`` is the no-attention baseline: Euclidean
distance of sequence means.

The node-based functions build differentiable graphs for training; the
``pairwise_distances`` fast path evaluates whole batches in plain numpy
using inference-mode batch norm and never mutates state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node
from .data import FeatureSequence
from .errors import DataError, ShapeError

MODES = ("duatm", "avepool", "intra", "inter")


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MatcherParams:
    """Transform-layer weights plus batch-norm state.

    The filter must take inner products with memory vectors of dimension D,
    so the transform output width equals D.
    """

    weight: Node  # (D, D)
    bias: Node  # (D,)
    bn: BatchNormState

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator) -> "MatcherParams":
        return cls(
            weight=ad.leaf(init_uniform(rng, (dim, dim), dim)),
            bias=ad.leaf(init_uniform(rng, (dim,), dim)),
            bn=BatchNormState.create(dim),
        )

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self) -> dict[str, Node]:
        return {
            "matcher.weight": self.weight,
            "matcher.bias": self.bias,
            "matcher.bn.gamma": self.bn.gamma,
            "matcher.bn.beta": self.bn.beta,
        }

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            "matcher.bn.running_mean": self.bn.running_mean,
            "matcher.bn.running_var": self.bn.running_var,
        }

    def set_mode(self, mode: str) -> None:
        self.bn.mode = mode


@dataclass
class AttentionFilter:
    """Nonnegative attention filter produced by the transform layer."""

    q: np.ndarray

    def __post_init__(self):
        if np.any(self.q < 0):
            raise DataError("attention filter has negative entries")


@dataclass
class AlignedPair:
    refined: np.ndarray
    aligned: np.ndarray


@dataclass
class PairDistanceReport:
    """Per-direction elementwise distances and their aggregate."""

    d_a: np.ndarray
    d_b: np.ndarray
    distance: float

    def __post_init__(self):
        recomposed = 0.5 * float(np.mean(self.d_a)) + 0.5 * float(np.mean(self.d_b))
        if abs(recomposed - self.distance) > 1e-12:
            raise DataError("aggregate distance disagrees with its per-direction parts")
        if np.any(self.d_a < 0) or np.any(self.d_b < 0) or self.distance < 0:
            raise DataError("distances must be nonnegative")


def _seq_node(x) -> Node:
    if isinstance(x, Node):
        value = x.value
    elif isinstance(x, FeatureSequence):
        value = x.vectors
    else:
        value = np.asarray(x, dtype=np.float64)
    if value.ndim != 2 or value.shape[0] < 1:
        raise ShapeError(f"expected a nonempty (S, D) sequence, got shape {value.shape}")
    return x if isinstance(x, Node) else ad.leaf(value)


def _check_same_dim(a: Node, b: Node) -> None:
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sequence dims differ: {a.shape[1]} vs {b.shape[1]}")


# ---------------------------------------------------------------------------
# differentiable path
# ---------------------------------------------------------------------------


def compute_filters_node(
    x: Node,
    params: MatcherParams,
    mode: str | None = None,
    update_running: bool = True,
) -> Node:
    """Filters for every row of an (S, D) matrix of reference vectors."""
    if x.shape[1] != params.dim:
        raise ShapeError(f"reference dim {x.shape[1]} vs matcher dim {params.dim}")
    pre = ad.add_rowvec(ad.matmul(x, ad.transpose(params.weight)), params.bias)
    return ad.relu(ad.batch_norm(pre, params.bn, mode=mode, update_running=update_running))


def compute_filter(x_ref, params: MatcherParams) -> AttentionFilter:
    """Filter for a single reference vector (uses the BN state's mode)."""
    ref = np.asarray(x_ref, dtype=np.float64)
    if ref.ndim != 1:
        raise ShapeError(f"expected a vector reference, got shape {ref.shape}")
    q = compute_filters_node(ad.leaf(ref[None, :]), params, update_running=False)
    return AttentionFilter(q=q.value[0].copy())


def attend(q, memory) -> tuple[Node, Node]:
    """Soft attention of filter ``q`` over a memory sequence.

    Returns ``(weights, combined)`` nodes: softmax-normalized significances
    and the convex combination of memory vectors they induce. Differentiable
    through both arguments.
    """
    q = q if isinstance(q, Node) else ad.leaf(np.asarray(q, dtype=np.float64))
    memory = _seq_node(memory)
    if q.shape != (memory.shape[1],):
        raise ShapeError(f"filter shape {q.shape} vs memory dim {memory.shape[1]}")
    weights = ad.softmax(ad.matvec(memory, q))
    combined = ad.matvec(ad.transpose(memory), weights)
    return weights, combined


def dual_attention(x_ref, own_seq, other_seq, params: MatcherParams) -> AlignedPair:
    """Refine a reference within its own sequence and align it to the other."""
    own = _seq_node(own_seq)
    other = _seq_node(other_seq)
    _check_same_dim(own, other)
    q = ad.leaf(compute_filter(x_ref, params).q)
    _, refined = attend(q, own)
    _, aligned = attend(q, other)
    return AlignedPair(refined=refined.value.copy(), aligned=aligned.value.copy())


def refined_node(q_mat: Node, x: Node) -> Node:
    """Intra-sequence refinement of every row, given that row's filter."""
    weights = ad.softmax(ad.matmul(q_mat, ad.transpose(x)))
    return ad.matmul(weights, x)


def _direction_node(q_a: Node, x_a: Node, x_b: Node, mode: str, refined_a: Node | None) -> Node:
    """Per-reference distances d_a^i for the a->b comparison direction."""
    if mode in ("duatm", "intra") and refined_a is None:
        refined_a = refined_node(q_a, x_a)
    if mode == "duatm":
        weights = ad.softmax(ad.matmul(q_a, ad.transpose(x_b)))
        aligned = ad.matmul(weights, x_b)
        return ad.row_norms(ad.sub(refined_a, aligned))
    if mode == "intra":
        counterpart = ad.tile_rows(ad.mean_axis(x_b, axis=0), x_a.shape[0])
        return ad.row_norms(ad.sub(refined_a, counterpart))
    if mode == "inter":
        weights = ad.softmax(ad.matmul(q_a, ad.transpose(x_b)))
        aligned = ad.matmul(weights, x_b)
        return ad.row_norms(ad.sub(x_a, aligned))
    raise ValueError(f"unknown mode {mode!r}")


def distance_nodes(
    x_a: Node,
    x_b: Node,
    q_a: Node | None,
    q_b: Node | None,
    mode: str = "duatm",
    refined_a: Node | None = None,
    refined_b: Node | None = None,
) -> tuple[Node, Node, Node]:
    """Differentiable (d_a, d_b, distance) given precomputed filters.

    The aggregate averages each direction's elementwise distances and halves
    them, which makes the result symmetric in its arguments by construction.
    """
    _check_same_dim(x_a, x_b)
    if mode == "avepool":
        d = ad.l2_distance(ad.mean_axis(x_a, axis=0), ad.mean_axis(x_b, axis=0))
        return d, d, d
    d_a = _direction_node(q_a, x_a, x_b, mode, refined_a)
    d_b = _direction_node(q_b, x_b, x_a, mode, refined_b)
    dist = ad.add(ad.scale(ad.mean_axis(d_a, 0), 0.5), ad.scale(ad.mean_axis(d_b, 0), 0.5))
    return d_a, d_b, dist


def distance_report(x_a, x_b, params: MatcherParams | None, mode: str = "duatm") -> PairDistanceReport:
    """Inference-mode distance report for one sequence pair (pure)."""
    a, b = _seq_node(x_a), _seq_node(x_b)
    _check_same_dim(a, b)
    if mode == "avepool":
        _, _, dist = distance_nodes(a, b, None, None, mode="avepool")
        d = float(dist.value)
        return PairDistanceReport(
            d_a=np.full(a.shape[0], d), d_b=np.full(b.shape[0], d), distance=d
        )
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    q_a = compute_filters_node(a, params, mode="inference")
    q_b = compute_filters_node(b, params, mode="inference")
    d_a, d_b, dist = distance_nodes(a, b, q_a, q_b, mode=mode)
    return PairDistanceReport(
        d_a=d_a.value.copy(), d_b=d_b.value.copy(), distance=float(dist.value)
    )


def sequence_distance(x_a, x_b, params: MatcherParams) -> PairDistanceReport:
    """Holistic dual-attention distance between two sequences."""
    return distance_report(x_a, x_b, params, mode="duatm")


def intra_only_distance(x_a, x_b, params: MatcherParams) -> PairDistanceReport:
    """Refinement-only ablation: refined references vs the other mean."""
    return distance_report(x_a, x_b, params, mode="intra")


def inter_only_distance(x_a, x_b, params: MatcherParams) -> PairDistanceReport:
    """Alignment-only ablation: raw references vs aligned counterparts."""
    return distance_report(x_a, x_b, params, mode="inter")


def baseline_avepool_distance(x_a, x_b) -> float:
    """Euclidean distance between the two sequence means."""
    a, b = _seq_node(x_a), _seq_node(x_b)
    _check_same_dim(a, b)
    return float(np.linalg.norm(a.value.mean(axis=0) - b.value.mean(axis=0)))


# ---------------------------------------------------------------------------
# numpy fast path (inference only)
# ---------------------------------------------------------------------------


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def filters_inference_np(x: np.ndarray, params: MatcherParams) -> np.ndarray:
    """Inference-mode filters for (..., S, D) stacks of reference vectors."""
    bn = params.bn
    pre = x @ params.weight.value.T + params.bias.value
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    normed = (pre - bn.running_mean) * inv_std * bn.gamma.value + bn.beta.value
    return np.maximum(normed, 0.0)


def pairwise_distances(
    seqs: list[np.ndarray], params: MatcherParams | None, mode: str = "duatm"
) -> np.ndarray:
    """All-pairs distance matrix over a batch of sequences.

    Pure inference: batch norm on running statistics, no state mutation.
    Equal-length batches take a vectorized path; mixed lengths fall back to
    a per-pair loop. The result is exactly symmetric with a zero diagonal
    for the duatm and avepool modes (and for intra/inter by construction of
    the two-direction average).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = len(seqs)
    arrays = [np.asarray(s, dtype=np.float64) for s in seqs]
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise ShapeError(f"mixed sequence dims in batch: {sorted(dims)}")

    if mode == "avepool":
        means = np.stack([a.mean(axis=0) for a in arrays])
        diff = means[:, None, :] - means[None, :, :]
        return np.linalg.norm(diff, axis=2)

    lengths = {a.shape[0] for a in arrays}
    if len(lengths) == 1:
        x = np.stack(arrays)  # (B, S, D)
        q = filters_inference_np(x, params)
        if mode in ("duatm", "intra"):
            w_self = _softmax_np(np.einsum("bid,bjd->bij", q, x))
            refined = np.einsum("bij,bjd->bid", w_self, x)
        if mode in ("duatm", "inter"):
            w_cross = _softmax_np(np.einsum("aid,bjd->abij", q, x))
            aligned = np.einsum("abij,bjd->abid", w_cross, x)
        if mode == "duatm":
            diff = refined[:, None, :, :] - aligned
        elif mode == "intra":
            means = x.mean(axis=1)
            diff = refined[:, None, :, :] - means[None, :, None, :]
        else:
            diff = x[:, None, :, :] - aligned
        half = np.linalg.norm(diff, axis=3).mean(axis=2)  # (B, B): mean_i d^i for a->b
        return 0.5 * half + 0.5 * half.T

    out = np.zeros((n, n))
    qs = [filters_inference_np(a, params) for a in arrays]
    refined = (
        [np.einsum("ij,jd->id", _softmax_np(q @ a.T), a) for q, a in zip(qs, arrays)]
        if mode in ("duatm", "intra")
        else [None] * n
    )
    means = [a.mean(axis=0) for a in arrays]
    for i in range(n):
        for j in range(i + 1, n):
            half_ij = _direction_np(qs[i], arrays[i], arrays[j], refined[i], means[j], mode)
            half_ji = _direction_np(qs[j], arrays[j], arrays[i], refined[j], means[i], mode)
            out[i, j] = out[j, i] = 0.5 * half_ij + 0.5 * half_ji
    return out


def _direction_np(q, x_a, x_b, refined_a, mean_b, mode) -> float:
    if mode == "intra":
        d = np.linalg.norm(refined_a - mean_b, axis=1)
    else:
        aligned = _softmax_np(q @ x_b.T) @ x_b
        base = refined_a if mode == "duatm" else x_a
        d = np.linalg.norm(base - aligned, axis=1)
    return float(d.mean())


def _refined_np(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _softmax_np(np.einsum("...id,...jd->...ij", q, x)) @ x


def distances_to_gallery(
    query: np.ndarray,
    gallery: list[np.ndarray],
    params: MatcherParams | None,
    mode: str = "duatm",
) -> np.ndarray:
    """Distances from one query sequence to every gallery sequence.

    Same inference semantics as :func:`pairwise_distances`, vectorized over
    the gallery when all lengths agree, without materializing the full
    gallery-by-gallery matrix.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    q_seq = np.asarray(query, dtype=np.float64)
    arrays = [np.asarray(g, dtype=np.float64) for g in gallery]
    dims = {a.shape[1] for a in arrays} | {q_seq.shape[1]}
    if len(dims) != 1:
        raise ShapeError(f"mixed sequence dims: {sorted(dims)}")

    if mode == "avepool":
        means = np.stack([a.mean(axis=0) for a in arrays])
        return np.linalg.norm(means - q_seq.mean(axis=0), axis=1)

    lengths = {a.shape[0] for a in arrays}
    if len(lengths) == 1 and q_seq.shape[0] in lengths:
        x = np.stack(arrays)  # (G, S, D)
        fq = filters_inference_np(q_seq, params)  # (S, D)
        fx = filters_inference_np(x, params)  # (G, S, D)
        if mode in ("duatm", "intra"):
            refined_q = _refined_np(fq, q_seq)
            refined_x = _refined_np(fx, x)
        if mode in ("duatm", "inter"):
            w_qg = _softmax_np(np.einsum("id,gjd->gij", fq, x))
            aligned_g = np.einsum("gij,gjd->gid", w_qg, x)  # counterpart of q in each g
            w_gq = _softmax_np(np.einsum("gid,jd->gij", fx, q_seq))
            aligned_q = np.einsum("gij,jd->gid", w_gq, q_seq)  # counterpart of g in q
        if mode == "duatm":
            d_qg = np.linalg.norm(refined_q[None] - aligned_g, axis=2)
            d_gq = np.linalg.norm(refined_x - aligned_q, axis=2)
        elif mode == "intra":
            d_qg = np.linalg.norm(refined_q[None] - x.mean(axis=1)[:, None, :], axis=2)
            d_gq = np.linalg.norm(refined_x - q_seq.mean(axis=0), axis=2)
        else:
            d_qg = np.linalg.norm(q_seq[None] - aligned_g, axis=2)
            d_gq = np.linalg.norm(x - aligned_q, axis=2)
        return 0.5 * d_qg.mean(axis=1) + 0.5 * d_gq.mean(axis=1)

    fq = filters_inference_np(q_seq, params)
    refined_q = _refined_np(fq, q_seq) if mode in ("duatm", "intra") else None
    mean_q = q_seq.mean(axis=0)
    out = np.zeros(len(arrays))
    for i, g in enumerate(arrays):
        fg = filters_inference_np(g, params)
        refined_g = _refined_np(fg, g) if mode in ("duatm", "intra") else None
        half_qg = _direction_np(fq, q_seq, g, refined_q, g.mean(axis=0), mode)
        half_gq = _direction_np(fg, g, q_seq, refined_g, mean_q, mode)
        out[i] = 0.5 * half_qg + 0.5 * half_gq
    return out
