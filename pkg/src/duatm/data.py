"""Feature sequences, dataset manifests, and the synthetic benchmark generator.

A feature sequence is an ordered set of S unit-norm D-dimensional vectors
describing one item (spatial positions of an image or time steps of a
video). Sequences are stored in a small binary ``.fseq`` container:

    magic ``FSEQ`` | u16 version (=1) | u32 S | u32 D | S*D little-endian f32

Storage is float32; computation promotes to float64. Manifests are a single
JSON document listing items with identity label, camera id, and modality.

The synthetic generator builds a retrieval benchmark that injects the two
failure modes the matcher is meant to absorb: corrupted positions (random
unit vectors replacing prototype positions) and misalignment (a random
cyclic shift per instance).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    DataError,
    NonFiniteError,
    NormalizationError,
    PayloadMismatchError,
    TruncatedPayloadError,
)

FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1

MODALITIES = ("image", "video")


@dataclass
class FeatureSequence:
    """S unit-norm vectors of dimension D, row-major in ``vectors``."""

    vectors: np.ndarray  # (S, D) float64
    source_id: str = ""

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise DataError(f"feature sequence needs shape (S>=1, D>=1), got {self.vectors.shape}")

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def normalize_sequence(seq: FeatureSequence) -> FeatureSequence:
    """Scale every vector to unit Euclidean norm, preserving order.

    Raises :class:`NormalizationError` naming the first offending index if
    any vector has norm below 1e-12.
    """
    norms = np.linalg.norm(seq.vectors, axis=1)
    small = np.nonzero(norms < 1e-12)[0]
    if small.size:
        raise NormalizationError(
            f"vector at index {int(small[0])} has near-zero norm {norms[small[0]]:.3e}"
        )
    return FeatureSequence(seq.vectors / norms[:, None], seq.source_id)


# ---------------------------------------------------------------------------
# .fseq container
# ---------------------------------------------------------------------------


def write_fseq(seq: FeatureSequence, path) -> None:
    """Write a sequence to the binary container (float32 storage)."""
    payload = np.ascontiguousarray(seq.vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FSEQ_MAGIC)
        fh.write(struct.pack("<H", FSEQ_VERSION))
        fh.write(struct.pack("<II", seq.length, seq.dim))
        fh.write(payload.tobytes())


def read_fseq(path) -> FeatureSequence:
    """Read a sequence, promoting the float32 payload to float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_len = 4 + 2 + 8
    if len(blob) < header_len:
        raise TruncatedPayloadError(f"{path}: file shorter than the fixed header")
    if blob[:4] != FSEQ_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != FSEQ_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    s, d = struct.unpack("<II", blob[6:14])
    if s < 1 or d < 1:
        raise PayloadMismatchError(f"{path}: header declares empty extents {s}x{d}")
    expected = s * d * 4
    actual = len(blob) - header_len
    if actual < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {actual} bytes, header needs {expected}"
        )
    if actual != expected:
        raise PayloadMismatchError(
            f"{path}: payload holds {actual} bytes, header declares {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=s * d, offset=header_len)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return FeatureSequence(data.astype(np.float64).reshape(s, d), source_id=str(path))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestItem:
    path: str
    identity_label: int
    camera_id: int
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")


@dataclass
class DatasetManifest:
    """Items plus the identity count; labels must cover [0, num_identities)."""

    num_identities: int
    items: list[ManifestItem]
    root: Path = field(default_factory=Path)  # directory item paths resolve against

    def __post_init__(self):
        labels = {it.identity_label for it in self.items}
        expected = set(range(self.num_identities))
        if labels != expected:
            raise DataError(
                f"identity labels {sorted(labels)} do not cover [0, {self.num_identities})"
            )

    def resolve(self, item: ManifestItem) -> Path:
        return self.root / item.path

    def labels(self) -> np.ndarray:
        return np.array([it.identity_label for it in self.items], dtype=int)

    def cameras(self) -> np.ndarray:
        return np.array([it.camera_id for it in self.items], dtype=int)

    def by_identity(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {label: [] for label in range(self.num_identities)}
        for idx, item in enumerate(self.items):
            groups[item.identity_label].append(idx)
        return groups


def write_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "num_identities": manifest.num_identities,
        "items": [
            {
                "path": it.path,
                "identity_label": it.identity_label,
                "camera_id": it.camera_id,
                "modality": it.modality,
            }
            for it in manifest.items
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: not valid JSON ({err})") from err
    try:
        items = [
            ManifestItem(
                path=str(entry["path"]),
                identity_label=int(entry["identity_label"]),
                camera_id=int(entry["camera_id"]),
                modality=str(entry["modality"]),
            )
            for entry in doc["items"]
        ]
        manifest = DatasetManifest(
            num_identities=int(doc["num_identities"]),
            items=items,
            root=path.parent,
        )
    except KeyError as err:
        raise DataError(f"{path}: missing manifest key {err}") from err
    return manifest


def split_manifest(
    manifest: DatasetManifest, eval_per_identity: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Hold out the last ``eval_per_identity`` instances of every identity."""
    if eval_per_identity < 1:
        raise DataError("eval_per_identity must be >= 1")
    train_items: list[ManifestItem] = []
    eval_items: list[ManifestItem] = []
    for label, indices in manifest.by_identity().items():
        if len(indices) <= eval_per_identity:
            raise DataError(
                f"identity {label} has {len(indices)} instances, cannot hold out {eval_per_identity}"
            )
        for pos, idx in enumerate(indices):
            dest = eval_items if pos >= len(indices) - eval_per_identity else train_items
            dest.append(manifest.items[idx])
    make = lambda items: DatasetManifest(manifest.num_identities, items, manifest.root)
    return make(train_items), make(eval_items)


def load_raw(path) -> np.ndarray:
    """Load a raw tensor (.npy) for image/video items."""
    try:
        return np.load(path).astype(np.float64)
    except (ValueError, OSError) as err:
        raise DataError(f"{path}: cannot load raw tensor ({err})") from err


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic retrieval benchmark."""

    num_identities: int = 20
    sequences_per_identity: int = 8
    seq_len: int = 8
    dim: int = 16
    corruption_fraction: float = 0.25
    misalignment: bool = True
    noise_scale: float = 0.15
    num_cameras: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise DataError(
                f"corruption_fraction must lie in [0, 1], got {self.corruption_fraction}"
            )
        for name in ("num_identities", "sequences_per_identity", "seq_len", "dim"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.num_cameras < 2:
            raise DataError("need at least 2 cameras for the cross-camera protocol")
        if self.noise_scale < 0:
            raise DataError("noise_scale must be nonnegative")


def _random_unit_rows(rng: np.random.Generator, s: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((s, d))
    norms = np.linalg.norm(rows, axis=1)
    # standard-normal rows of any practical dimension never come out at
    # exactly zero norm; renormalize directly
    return rows / norms[:, None]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Generate sequences plus a manifest under ``out_dir``.

    Every identity gets a random unit prototype sequence; each instance adds
    Gaussian noise, replaces floor(corruption_fraction * S) positions with
    random unit vectors, optionally applies a random cyclic shift, and is
    unit-normalized. Camera ids round-robin over ``num_cameras``. The whole
    dataset is a pure function of ``spec.seed``.
    """
    out_dir = Path(out_dir)
    items_dir = out_dir / "items"
    items_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    n_corrupt = int(spec.corruption_fraction * spec.seq_len)

    items: list[ManifestItem] = []
    for identity in range(spec.num_identities):
        prototype = _random_unit_rows(rng, spec.seq_len, spec.dim)
        for instance in range(spec.sequences_per_identity):
            vectors = prototype + spec.noise_scale * rng.standard_normal(prototype.shape)
            if n_corrupt:
                positions = rng.choice(spec.seq_len, size=n_corrupt, replace=False)
                vectors[positions] = _random_unit_rows(rng, n_corrupt, spec.dim)
            if spec.misalignment:
                shift = int(rng.integers(spec.seq_len))
                vectors = np.roll(vectors, shift, axis=0)
            seq = normalize_sequence(FeatureSequence(vectors))
            rel_path = f"items/id{identity:04d}_{instance}.fseq"
            write_fseq(seq, out_dir / rel_path)
            items.append(
                ManifestItem(
                    path=rel_path,
                    identity_label=identity,
                    camera_id=instance % spec.num_cameras,
                    modality="image",
                )
            )

    manifest = DatasetManifest(spec.num_identities, items, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
