"""Training objectives: triplet hinge, de-correlation, identity cross-entropy.

The full objective is ``l0 + lambda1 * l1 + lambda2 * l2`` where l0 is a
margin hinge on sequence distances, l1 pushes each sequence's Gram matrix
toward the identity (less redundancy between positions), and l2 classifies
a randomly convex-pooled sequence vector against its identity label. The
losses deliberately touch different parameter sets: l1 reaches only the
extractor, l2 the extractor and classifier head, l0 the extractor and
matcher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import DataError
from .matcher import MatcherParams, compute_filters_node, distance_nodes, init_uniform

DEFAULT_GAMMA = 0.2
DEFAULT_LAMBDA1 = 0.1
DEFAULT_LAMBDA2 = 0.5
DEFAULT_P = 0.2


@dataclass
class LossConfig:
    gamma: float = DEFAULT_GAMMA
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    p: float = DEFAULT_P

    def __post_init__(self):
        if self.gamma <= 0:
            raise DataError(f"margin gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.p <= 1.0:
            raise DataError(f"zeroing probability p must lie in [0, 1], got {self.p}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DataError("tradeoff weights must be nonnegative")


@dataclass
class ClassifierHead:
    weight: Node  # (num_identities, D)
    bias: Node  # (num_identities,)

    @classmethod
    def create(cls, num_identities: int, dim: int, rng: np.random.Generator) -> "ClassifierHead":
        return cls(
            weight=ad.leaf(init_uniform(rng, (num_identities, dim), dim)),
            bias=ad.leaf(init_uniform(rng, (num_identities,), dim)),
        )

    @property
    def num_identities(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self) -> dict[str, Node]:
        return {"head.weight": self.weight, "head.bias": self.bias}


@dataclass
class PoolingWeights:
    """Convex pooling weights: nonnegative, summing to one."""

    omega: np.ndarray

    def __post_init__(self):
        if np.any(self.omega < 0) or abs(float(self.omega.sum()) - 1.0) > 1e-12:
            raise DataError("pooling weights must be nonnegative and sum to 1")


def _seq(x) -> Node:
    if isinstance(x, Node):
        return x
    vectors = getattr(x, "vectors", x)
    return ad.leaf(np.asarray(vectors, dtype=np.float64))


def convex_pool(
    x, p: float, rng: np.random.Generator | None, deterministic: bool = False
) -> tuple[Node, PoolingWeights]:
    """Pool a sequence with random convex weights.

    Raw weights are Uniform(0, 1), each independently reset to 0 with
    probability ``p``; if every weight is zeroed the pool falls back to the
    uniform average. Deterministic mode (evaluation) always uses the uniform
    average. The weights are constants: gradients flow into the sequence
    only.
    """
    x = _seq(x)
    s = x.shape[0]
    if deterministic:
        omega = np.full(s, 1.0 / s)
    else:
        if not 0.0 <= p <= 1.0:
            raise DataError(f"zeroing probability p must lie in [0, 1], got {p}")
        raw = rng.uniform(0.0, 1.0, size=s)
        raw[rng.random(s) < p] = 0.0
        total = raw.sum()
        omega = np.full(s, 1.0 / s) if total == 0.0 else raw / total
    z = ad.matvec(ad.transpose(x), ad.leaf(omega))
    return z, PoolingWeights(omega=omega)


def decorrelation_loss(x) -> Node:
    """Squared Frobenius deviation of the sequence Gram matrix from identity,
    divided by the squared sequence length.

    With unit-norm vectors the diagonal contributes nothing, so only
    cross-correlations between positions are penalized.
    """
    x = _seq(x)
    s = x.shape[0]
    gram = ad.matmul(x, ad.transpose(x))
    dev = ad.sub(ad.leaf(np.eye(s)), gram)
    return ad.scale(ad.sum_all(ad.mul(dev, dev)), 1.0 / (s * s))


def identity_ce_loss(
    x,
    label: int,
    head: ClassifierHead,
    p: float,
    rng: np.random.Generator | None,
    deterministic: bool = False,
) -> Node:
    """Cross-entropy of the convex-pooled sequence vector against its label."""
    if not 0 <= label < head.num_identities:
        raise DataError(f"label {label} outside [0, {head.num_identities})")
    z, _ = convex_pool(x, p, rng, deterministic)
    logits = ad.add(ad.matvec(head.weight, z), head.bias)
    return _cross_entropy(logits, label)


def _cross_entropy(logits: Node, label: int) -> Node:
    # log-sum-exp with a constant shift: the max is treated as a constant,
    # which leaves the gradient (softmax - onehot) untouched
    shift = float(logits.value.max())
    lse = ad.add_const(ad.log(ad.sum_all(ad.exp(ad.add_const(logits, -shift)))), shift)
    return ad.sub(lse, ad.take_item(logits, label))


def _hinge(d_pos: Node, d_neg: Node, gamma: float) -> Node:
    return ad.relu(ad.add_const(ad.sub(d_pos, d_neg), gamma))


def triplet_loss(
    anchor,
    positive,
    negative,
    params: MatcherParams | None,
    gamma: float = DEFAULT_GAMMA,
    mode: str = "duatm",
    training: bool = True,
) -> Node:
    """Margin hinge on the anchor-positive vs anchor-negative distances.

    In training mode the transform-layer batch norm runs jointly over all
    reference vectors of the three sequences (one stacked call), and the
    anchor's filters are shared between the two pair distances.
    """
    a, p, n = _seq(anchor), _seq(positive), _seq(negative)
    if mode == "avepool":
        _, _, d_ap = distance_nodes(a, p, None, None, mode="avepool")
        _, _, d_an = distance_nodes(a, n, None, None, mode="avepool")
        return _hinge(d_ap, d_an, gamma)
    bn_mode = "training" if training else "inference"
    stacked = ad.concat([a, p, n], axis=0)
    q_all = compute_filters_node(stacked, params, mode=bn_mode, update_running=training)
    s_a, s_p = a.shape[0], p.shape[0]
    q_a = ad.slice_rows(q_all, 0, s_a)
    q_p = ad.slice_rows(q_all, s_a, s_a + s_p)
    q_n = ad.slice_rows(q_all, s_a + s_p, q_all.shape[0])
    _, _, d_ap = distance_nodes(a, p, q_a, q_p, mode=mode)
    _, _, d_an = distance_nodes(a, n, q_a, q_n, mode=mode)
    return _hinge(d_ap, d_an, gamma)


def combined_loss(
    triplet: tuple,
    labels: tuple[int, int, int],
    params: MatcherParams | None,
    head: ClassifierHead | None,
    cfg: LossConfig,
    rng: np.random.Generator | None = None,
    mode: str = "duatm",
    training: bool = True,
) -> tuple[Node, dict[str, float]]:
    """Weighted sum of the three losses over one (anchor, positive, negative).

    The auxiliary losses are averaged over the triplet's three sequences.
    Returns the loss node plus the scalar parts for logging.
    """
    seqs = [_seq(s) for s in triplet]
    l0 = triplet_loss(*seqs, params=params, gamma=cfg.gamma, mode=mode, training=training)
    total = l0
    parts = {"triplet": float(l0.value), "decorr": 0.0, "ce": 0.0}
    if cfg.lambda1 > 0:
        l1 = _mean_nodes([decorrelation_loss(s) for s in seqs])
        parts["decorr"] = float(l1.value)
        total = ad.add(total, ad.scale(l1, cfg.lambda1))
    if cfg.lambda2 > 0:
        if head is None:
            raise DataError("lambda2 > 0 requires a classifier head")
        l2 = _mean_nodes(
            [
                identity_ce_loss(s, lab, head, cfg.p, rng, deterministic=not training)
                for s, lab in zip(seqs, labels)
            ]
        )
        parts["ce"] = float(l2.value)
        total = ad.add(total, ad.scale(l2, cfg.lambda2))
    parts["loss"] = float(total.value)
    return total, parts


def _mean_nodes(nodes: list[Node]) -> Node:
    total = nodes[0]
    for node in nodes[1:]:
        total = ad.add(total, node)
    return ad.scale(total, 1.0 / len(nodes))
