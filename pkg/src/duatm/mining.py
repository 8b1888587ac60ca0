"""PK mini-batch sampling and batch-hard triplet mining.

A batch holds P distinct identities with V instances each. Every batch
element serves as an anchor once; its positive is the same-identity element
at maximal distance and its negative the different-identity element at
minimal distance, ties broken toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest
from .errors import DataError

DEFAULT_P = 10
DEFAULT_V = 4


@dataclass
class BatchSpec:
    num_identities: int = DEFAULT_P  # P
    instances_per_identity: int = DEFAULT_V  # V

    def __post_init__(self):
        if self.num_identities < 2 or self.instances_per_identity < 2:
            raise DataError(
                "PK batches need P >= 2 and V >= 2 so every anchor has a positive and a negative"
            )

    @property
    def size(self) -> int:
        return self.num_identities * self.instances_per_identity


@dataclass
class MinedTriplet:
    anchor: int
    positive: int
    negative: int


def sample_pk_batch(
    manifest: DatasetManifest, spec: BatchSpec, rng: np.random.Generator
) -> list[int]:
    """Sample item indices for a PK batch.

    Identities with fewer than V instances are sampled with replacement so
    the batch shape stays invariant.
    """
    groups = manifest.by_identity()
    identities = sorted(groups)
    if len(identities) < spec.num_identities:
        raise DataError(
            f"need {spec.num_identities} identities, manifest has {len(identities)}"
        )
    chosen = rng.choice(len(identities), size=spec.num_identities, replace=False)
    batch: list[int] = []
    for pos in chosen:
        instances = groups[identities[int(pos)]]
        replace = len(instances) < spec.instances_per_identity
        picks = rng.choice(len(instances), size=spec.instances_per_identity, replace=replace)
        batch.extend(instances[int(i)] for i in picks)
    return batch


def mine_hard_triplets(distances: np.ndarray, labels: np.ndarray) -> list[MinedTriplet]:
    """Batch-hard selection from a symmetric zero-diagonal distance matrix."""
    d = np.asarray(distances, dtype=np.float64)
    labels = np.asarray(labels)
    n = d.shape[0]
    if d.shape != (n, n) or labels.shape != (n,):
        raise DataError(f"distance matrix {d.shape} and labels {labels.shape} disagree")
    if not np.allclose(d, d.T, atol=1e-9) or np.any(np.abs(np.diag(d)) > 1e-9):
        raise DataError("mining requires a symmetric distance matrix with zero diagonal")

    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    triplets: list[MinedTriplet] = []
    for a in range(n):
        if not same[a].any():
            raise DataError(f"anchor {a} has no same-identity partner in the batch")
        pos_row = np.where(same[a], d[a], -np.inf)
        neg_mask = labels != labels[a]
        if not neg_mask.any():
            raise DataError(f"anchor {a} has no different-identity element in the batch")
        neg_row = np.where(neg_mask, d[a], np.inf)
        # argmax/argmin return the first occurrence: lowest-index tie-break
        triplets.append(
            MinedTriplet(
                anchor=a,
                positive=int(pos_row.argmax()),
                negative=int(neg_row.argmin()),
            )
        )
    return triplets
