import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from duatm.data import FeatureSequence, write_fseq, write_manifest
from duatm.data import DatasetManifest, ManifestItem


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, s, d):
    rows = rng.standard_normal((s, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@pytest.fixture
def make_fseq_dataset(tmp_path):
    """Write a small .fseq dataset + manifest; returns its manifest."""

    def build(
        num_identities=4,
        per_identity=4,
        seq_len=4,
        dim=4,
        num_cameras=2,
        seed=0,
        spread=0.1,
    ):
        gen = np.random.default_rng(seed)
        items = []
        for identity in range(num_identities):
            proto = unit_rows(gen, seq_len, dim)
            for k in range(per_identity):
                vecs = proto + spread * gen.standard_normal(proto.shape)
                vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
                rel = f"items/id{identity}_{k}.fseq"
                (tmp_path / "items").mkdir(exist_ok=True)
                write_fseq(FeatureSequence(vecs), tmp_path / rel)
                items.append(
                    ManifestItem(
                        path=rel,
                        identity_label=identity,
                        camera_id=k % num_cameras,
                        modality="image",
                    )
                )
        manifest = DatasetManifest(num_identities, items, root=tmp_path)
        write_manifest(manifest, tmp_path / "manifest.json")
        return manifest

    return build
