"""PK sampling and batch-hard mining against an exhaustive oracle."""

import numpy as np
import pytest

from duatm.data import DatasetManifest, ManifestItem
from duatm.errors import DataError
from duatm.mining import BatchSpec, MinedTriplet, mine_hard_triplets, sample_pk_batch


def manifest_with_counts(counts):
    """A manifest whose identity i has counts[i] instances (paths are fake)."""
    items = []
    for label, count in enumerate(counts):
        for k in range(count):
            items.append(ManifestItem(f"id{label}_{k}.fseq", label, k % 2, "image"))
    return DatasetManifest(len(counts), items)


def random_symmetric(gen, n):
    d = gen.uniform(0.1, 2.0, (n, n))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


def oracle_mine(distances, labels):
    """Exhaustive scan with strict comparisons and first-index tie-break."""
    out = []
    n = len(labels)
    for a in range(n):
        best_pos, best_pos_d = None, -np.inf
        best_neg, best_neg_d = None, np.inf
        for j in range(n):
            if j != a and labels[j] == labels[a] and distances[a, j] > best_pos_d:
                best_pos, best_pos_d = j, distances[a, j]
            if labels[j] != labels[a] and distances[a, j] < best_neg_d:
                best_neg, best_neg_d = j, distances[a, j]
        out.append(MinedTriplet(a, best_pos, best_neg))
    return out


class TestSamplePKBatch:
    def test_counting(self):
        manifest = manifest_with_counts([2, 2, 2])
        batch = sample_pk_batch(manifest, BatchSpec(2, 2), np.random.default_rng(0))
        assert len(batch) == 4
        labels = [manifest.items[i].identity_label for i in batch]
        assert sorted(np.unique(labels, return_counts=True)[1].tolist()) == [2, 2]

    def test_singleton_identity_sampled_with_replacement(self):
        manifest = manifest_with_counts([1, 3])
        batch = sample_pk_batch(manifest, BatchSpec(2, 3), np.random.default_rng(0))
        labels = [manifest.items[i].identity_label for i in batch]
        assert labels.count(0) == 3 and labels.count(1) == 3
        zero_items = {i for i in batch if manifest.items[i].identity_label == 0}
        assert len(zero_items) == 1  # the lone instance, repeated

    def test_deterministic_under_seed(self):
        manifest = manifest_with_counts([4, 4, 4, 4])
        spec = BatchSpec(3, 2)
        a = sample_pk_batch(manifest, spec, np.random.default_rng(7))
        b = sample_pk_batch(manifest, spec, np.random.default_rng(7))
        assert a == b

    def test_too_few_identities(self):
        manifest = manifest_with_counts([4, 4])
        with pytest.raises(DataError):
            sample_pk_batch(manifest, BatchSpec(3, 2), np.random.default_rng(0))

    def test_spec_invariants(self):
        with pytest.raises(DataError):
            BatchSpec(1, 4)
        with pytest.raises(DataError):
            BatchSpec(4, 1)


class TestMineHardTriplets:
    def test_hand_case(self):
        labels = np.array([0, 0, 1, 1])
        d = np.zeros((4, 4))
        d[0, 1] = d[1, 0] = 0.2
        d[0, 2] = d[2, 0] = 0.5
        d[0, 3] = d[3, 0] = 0.4
        d[1, 2] = d[2, 1] = 0.7
        d[1, 3] = d[3, 1] = 0.6
        d[2, 3] = d[3, 2] = 0.3
        mined = mine_hard_triplets(d, labels)
        assert mined[0] == MinedTriplet(anchor=0, positive=1, negative=3)

    def test_ties_break_to_lowest_index(self):
        labels = np.array([0, 0, 0, 1, 1])
        d = np.ones((5, 5)) * 0.5
        np.fill_diagonal(d, 0.0)
        mined = mine_hard_triplets(d, labels)
        assert mined[0].positive == 1 and mined[0].negative == 3
        assert mined[1].positive == 0 and mined[1].negative == 3
        assert mined[3].positive == 4 and mined[3].negative == 0

    def test_every_anchor_once_and_label_invariants(self):
        gen = np.random.default_rng(1)
        labels = np.repeat(np.arange(3), 3)
        d = random_symmetric(gen, 9)
        mined = mine_hard_triplets(d, labels)
        assert [t.anchor for t in mined] == list(range(9))
        for t in mined:
            assert labels[t.anchor] == labels[t.positive] and t.anchor != t.positive
            assert labels[t.anchor] != labels[t.negative]

    def test_matches_oracle_on_100_random_matrices(self):
        gen = np.random.default_rng(2)
        for _ in range(100):
            p = int(gen.integers(2, 5))
            v = int(gen.integers(2, 4))
            labels = np.repeat(np.arange(p), v)
            gen.shuffle(labels)
            d = random_symmetric(gen, p * v)
            assert mine_hard_triplets(d, labels) == oracle_mine(d, labels)

    def test_asymmetric_matrix_rejected(self):
        d = np.array([[0.0, 1.0], [0.5, 0.0]])
        with pytest.raises(DataError):
            mine_hard_triplets(d, np.array([0, 0]))

    def test_nonzero_diagonal_rejected(self):
        d = np.array([[0.1, 1.0], [1.0, 0.0]])
        with pytest.raises(DataError):
            mine_hard_triplets(d, np.array([0, 0]))

    def test_anchor_without_partner_rejected(self):
        d = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(DataError):
            mine_hard_triplets(d, np.array([0, 1]))
