"""SGD training loop over mined triplets, with checkpoints and metric logs.

Each step samples a PK batch, extracts (or loads) its feature sequences,
mines batch-hard triplets on an inference-mode distance matrix, and
minimizes the mean triplet hinge plus the weighted auxiliary losses computed
over all P*V batch sequences. Updates are plain SGD with a two-level
learning-rate schedule. Runs are a pure function of the seed in
single-threaded mode.

Checkpoints are a versioned binary container: magic ``DMCK``, u16 version,
u32 header length, a JSON header (epoch, architecture, generator states,
tensor directory), then the named float64 buffers little-endian in header
order. A save/load round trip restores forward outputs bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import DatasetManifest, load_raw
from .errors import DataError, NonFiniteError, ShapeError
from .extractors import (
    SpatialExtractorParams,
    TemporalExtractorParams,
    extract_passthrough,
    extract_spatial_node,
    extract_temporal_node,
)
from .losses import ClassifierHead, LossConfig, decorrelation_loss, identity_ce_loss
from .matcher import (
    MODES,
    MatcherParams,
    compute_filters_node,
    distance_nodes,
    pairwise_distances,
    refined_node,
)
from .mining import BatchSpec, MinedTriplet, mine_hard_triplets, sample_pk_batch

CHECKPOINT_MAGIC = b"DMCK"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("step", "epoch", "lr", "loss", "triplet_loss", "decorr_loss", "ce_loss")


@dataclass
class TrainConfig:
    mode: str = "duatm"
    dim: int = 16
    epochs: int = 30
    steps_per_epoch: int = 50
    lr_initial: float = 0.01
    lr_final: float = 0.001
    lr_drop_epoch: int = 25
    seed: int = 42
    freeze_extractor: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)

    def __post_init__(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dim < 1:
            problems.append("dim must be positive")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            problems.append("epochs and steps_per_epoch must be positive")
        if self.lr_initial < 0 or self.lr_final < 0:
            problems.append("learning rates must be nonnegative")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            problems.append("lr_drop_epoch must lie in [0, epochs]")
        if problems:
            raise DataError("; ".join(problems))

    def lr_at(self, epoch: int) -> float:
        return self.lr_initial if epoch < self.lr_drop_epoch else self.lr_final


_SCHEMA = {
    "mode": str,
    "dim": int,
    "epochs": int,
    "steps_per_epoch": int,
    "lr_initial": (int, float),
    "lr_final": (int, float),
    "lr_drop_epoch": int,
    "seed": int,
    "freeze_extractor": bool,
    "loss": dict,
    "batch": dict,
}
_LOSS_SCHEMA = {"gamma": (int, float), "lambda1": (int, float), "lambda2": (int, float), "p": (int, float)}
_BATCH_SCHEMA = {"P": int, "V": int}


def config_from_dict(doc: dict) -> TrainConfig:
    """Validate a full config document, reporting every violation at once."""
    problems: list[str] = []

    def check_block(block, schema, prefix=""):
        values = {}
        for key, kind in schema.items():
            if key not in block:
                problems.append(f"missing key {prefix}{key}")
            elif not isinstance(block[key], kind) or isinstance(block[key], bool) and kind is not bool:
                problems.append(f"key {prefix}{key} has wrong type {type(block[key]).__name__}")
            else:
                values[key] = block[key]
        for key in block:
            if key not in schema:
                problems.append(f"unknown key {prefix}{key}")
        return values

    top = check_block(doc, _SCHEMA)
    loss_vals = check_block(doc.get("loss", {}), _LOSS_SCHEMA, "loss.") if isinstance(doc.get("loss"), dict) else {}
    batch_vals = check_block(doc.get("batch", {}), _BATCH_SCHEMA, "batch.") if isinstance(doc.get("batch"), dict) else {}
    if problems:
        raise DataError("config schema violations: " + "; ".join(problems))
    try:
        return TrainConfig(
            mode=top["mode"],
            dim=top["dim"],
            epochs=top["epochs"],
            steps_per_epoch=top["steps_per_epoch"],
            lr_initial=float(top["lr_initial"]),
            lr_final=float(top["lr_final"]),
            lr_drop_epoch=top["lr_drop_epoch"],
            seed=top["seed"],
            freeze_extractor=top["freeze_extractor"],
            loss=LossConfig(
                gamma=float(loss_vals["gamma"]),
                lambda1=float(loss_vals["lambda1"]),
                lambda2=float(loss_vals["lambda2"]),
                p=float(loss_vals["p"]),
            ),
            batch=BatchSpec(batch_vals["P"], batch_vals["V"]),
        )
    except DataError as err:
        raise DataError(f"config invariant violations: {err}") from err


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "mode": cfg.mode,
        "dim": cfg.dim,
        "epochs": cfg.epochs,
        "steps_per_epoch": cfg.steps_per_epoch,
        "lr_initial": cfg.lr_initial,
        "lr_final": cfg.lr_final,
        "lr_drop_epoch": cfg.lr_drop_epoch,
        "seed": cfg.seed,
        "freeze_extractor": cfg.freeze_extractor,
        "loss": {
            "gamma": cfg.loss.gamma,
            "lambda1": cfg.loss.lambda1,
            "lambda2": cfg.loss.lambda2,
            "p": cfg.loss.p,
        },
        "batch": {"P": cfg.batch.num_identities, "V": cfg.batch.instances_per_identity},
    }


# ---------------------------------------------------------------------------
# model container and sequence store
# ---------------------------------------------------------------------------


@dataclass
class Model:
    dim: int
    mode: str
    matcher: MatcherParams | None = None
    head: ClassifierHead | None = None
    extractor: SpatialExtractorParams | TemporalExtractorParams | None = None

    def named_parameters(self) -> dict[str, Node]:
        out: dict[str, Node] = {}
        if self.extractor is not None:
            out.update(self.extractor.named_parameters())
        if self.matcher is not None:
            out.update(self.matcher.named_parameters())
        if self.head is not None:
            out.update(self.head.named_parameters())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {} if self.matcher is None else self.matcher.named_buffers()

    def arch(self) -> dict:
        return {
            "dim": self.dim,
            "mode": self.mode,
            "num_identities": None if self.head is None else self.head.num_identities,
            "extractor": None if self.extractor is None else self.extractor.arch(),
        }

    def set_bn_mode(self, mode: str) -> None:
        if self.matcher is not None:
            self.matcher.set_mode(mode)


class SequenceStore:
    """Caches manifest items: precomputed sequences or raw tensors.

    Raw items (``.npy``) must all share one modality; ``node`` rebuilds the
    extraction graph per call so gradients reach the extractor parameters.
    """

    def __init__(self, manifest: DatasetManifest, dim: int):
        self.manifest = manifest
        self.dim = dim
        self.entries: list[tuple[str, np.ndarray]] = []
        self.raw_modality: str | None = None
        self.in_channels: int | None = None
        for item in manifest.items:
            path = manifest.resolve(item)
            if str(path).endswith(".fseq"):
                seq = extract_passthrough(path, dim=dim)
                self.entries.append(("seq", seq.vectors))
            else:
                raw = load_raw(path)
                expected_ndim = 3 if item.modality == "image" else 4
                if raw.ndim != expected_ndim:
                    raise ShapeError(
                        f"{path}: {item.modality} tensor must have {expected_ndim} dims, got {raw.ndim}"
                    )
                if self.raw_modality is None:
                    self.raw_modality = item.modality
                    self.in_channels = raw.shape[-1]
                elif self.raw_modality != item.modality:
                    raise DataError("manifests mixing raw image and video items are unsupported")
                self.entries.append((item.modality, raw))
        self.labels = manifest.labels()
        self.cameras = manifest.cameras()

    def node(self, index: int, extractor) -> Node:
        kind, value = self.entries[index]
        if kind == "seq":
            return ad.leaf(value)
        if extractor is None:
            raise DataError("manifest contains raw tensors but the model has no extractor")
        if kind == "image":
            return extract_spatial_node(value, extractor)
        return extract_temporal_node(value, extractor)


def create_model(
    config: TrainConfig, manifest: DatasetManifest, store: SequenceStore, rng: np.random.Generator
) -> Model:
    matcher = None if config.mode == "avepool" else MatcherParams.create(config.dim, rng)
    head = (
        ClassifierHead.create(manifest.num_identities, config.dim, rng)
        if config.loss.lambda2 > 0
        else None
    )
    extractor = None
    if store.raw_modality == "image":
        extractor = SpatialExtractorParams.create(store.in_channels, config.dim, rng)
    elif store.raw_modality == "video":
        extractor = TemporalExtractorParams.create(store.in_channels, config.dim, rng)
    return Model(dim=config.dim, mode=config.mode, matcher=matcher, head=head, extractor=extractor)


# ---------------------------------------------------------------------------
# loss assembly over one mined batch
# ---------------------------------------------------------------------------


def step_loss(
    nodes: list[Node],
    labels: list[int],
    triplets: list[MinedTriplet],
    model: Model,
    cfg: LossConfig,
    pool_rng: np.random.Generator | None,
    training: bool = True,
) -> tuple[Node, dict[str, float]]:
    """Mean triplet hinge over mined triplets plus auxiliary losses over the
    whole batch. Filters for every sequence come from one stacked batch-norm
    call, so training-mode statistics cover all reference vectors of the
    step's loss evaluation."""
    mode = model.mode
    filters: list[Node | None] = [None] * len(nodes)
    if mode != "avepool":
        stacked = ad.concat(nodes, axis=0)
        q_all = compute_filters_node(
            stacked,
            model.matcher,
            mode="training" if training else "inference",
            update_running=training,
        )
        offset = 0
        for i, node in enumerate(nodes):
            filters[i] = ad.slice_rows(q_all, offset, offset + node.shape[0])
            offset += node.shape[0]

    refined_cache: dict[int, Node] = {}

    def refined(i: int) -> Node | None:
        if mode not in ("duatm", "intra"):
            return None
        if i not in refined_cache:
            refined_cache[i] = refined_node(filters[i], nodes[i])
        return refined_cache[i]

    pair_cache: dict[tuple[int, int], Node] = {}

    def pair_distance(i: int, j: int) -> Node:
        key = (min(i, j), max(i, j))
        if key not in pair_cache:
            a, b = key
            _, _, dist = distance_nodes(
                nodes[a], nodes[b], filters[a], filters[b],
                mode=mode, refined_a=refined(a), refined_b=refined(b),
            )
            pair_cache[key] = dist
        return pair_cache[key]

    hinges = [
        ad.relu(ad.add_const(ad.sub(pair_distance(t.anchor, t.positive),
                                    pair_distance(t.anchor, t.negative)), cfg.gamma))
        for t in triplets
    ]
    l0 = _mean(hinges)
    total = l0
    parts = {"triplet": float(l0.value), "decorr": 0.0, "ce": 0.0}
    if cfg.lambda1 > 0:
        l1 = _mean([decorrelation_loss(n) for n in nodes])
        parts["decorr"] = float(l1.value)
        total = ad.add(total, ad.scale(l1, cfg.lambda1))
    if cfg.lambda2 > 0:
        if model.head is None:
            raise DataError("lambda2 > 0 requires a classifier head")
        l2 = _mean(
            [
                identity_ce_loss(n, int(lab), model.head, cfg.p, pool_rng, deterministic=not training)
                for n, lab in zip(nodes, labels)
            ]
        )
        parts["ce"] = float(l2.value)
        total = ad.add(total, ad.scale(l2, cfg.lambda2))
    parts["loss"] = float(total.value)
    return total, parts


def _mean(nodes: list[Node]) -> Node:
    total = nodes[0]
    for node in nodes[1:]:
        total = ad.add(total, node)
    return ad.scale(total, 1.0 / len(nodes))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    log_rows: list[dict]
    epoch: int
    rng_states: dict


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    log_path=None,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """Run the SGD loop; returns the model, per-step log, and generator states.

    ``resume`` continues from a checkpoint's epoch counter and generator
    states; the learning-rate schedule is a pure function of the epoch, so a
    resumed run follows the same schedule as an uninterrupted one.
    """
    store = SequenceStore(manifest, config.dim)
    seed_seq = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, pool_ss = seed_seq.spawn(3)
    batch_rng = np.random.Generator(np.random.Philox(batch_ss))
    pool_rng = np.random.Generator(np.random.Philox(pool_ss))

    if resume is not None:
        model = resume.model
        start_epoch = resume.epoch
        batch_rng.bit_generator.state = resume.rng_states["batch"]
        pool_rng.bit_generator.state = resume.rng_states["pool"]
    else:
        model = create_model(config, manifest, store, np.random.Generator(np.random.Philox(init_ss)))
        start_epoch = 0

    update_params = dict(model.named_parameters())
    if config.freeze_extractor:
        update_params = {k: v for k, v in update_params.items() if not k.startswith("extractor.")}
    all_params = list(model.named_parameters().values())

    model.set_bn_mode("training")
    log_file = None
    if log_path is not None:
        fresh = resume is None or not Path(log_path).exists()
        log_file = open(log_path, "a")
        if fresh:
            log_file.write(",".join(LOG_COLUMNS) + "\n")

    rows: list[dict] = []
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = config.lr_at(epoch)
            for step_in_epoch in range(config.steps_per_epoch):
                step = epoch * config.steps_per_epoch + step_in_epoch + 1
                batch = sample_pk_batch(manifest, config.batch, batch_rng)
                labels = [int(store.labels[i]) for i in batch]
                nodes = [store.node(i, model.extractor) for i in batch]
                values = [n.value for n in nodes]
                dist = pairwise_distances(values, model.matcher, config.mode)
                np.fill_diagonal(dist, 0.0)  # self-distance; excluded from mining anyway
                triplets = mine_hard_triplets(dist, np.array(labels))
                loss, parts = step_loss(nodes, labels, triplets, model, config.loss, pool_rng)
                if not np.isfinite(loss.value):
                    raise NonFiniteError(f"non-finite loss at step {step}")
                ad.zero_grads(all_params)
                loss.backward()
                for node in update_params.values():
                    node.value -= lr * node.grad
                row = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": parts["loss"],
                    "triplet_loss": parts["triplet"],
                    "decorr_loss": parts["decorr"],
                    "ce_loss": parts["ce"],
                }
                rows.append(row)
                if log_file is not None:
                    log_file.write(",".join(repr(row[c]) for c in LOG_COLUMNS) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    model.set_bn_mode("inference")
    rng_states = {
        "batch": batch_rng.bit_generator.state,
        "pool": pool_rng.bit_generator.state,
    }
    return TrainResult(model=model, log_rows=rows, epoch=config.epochs, rng_states=rng_states)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    rng_states: dict


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _unjsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _unjsonable(v) for k, v in obj.items()}
    return obj


def save_checkpoint(path, model: Model, epoch: int, rng_states: dict | None = None) -> None:
    tensors = {name: node.value for name, node in model.named_parameters().items()}
    tensors.update(model.named_buffers())
    header = {
        "epoch": epoch,
        "arch": model.arch(),
        "rng": _jsonable(rng_states or {}),
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _model_from_arch(arch: dict) -> Model:
    rng = np.random.Generator(np.random.Philox(key=0))  # placeholder values, overwritten below
    dim = int(arch["dim"])
    matcher = None if arch["mode"] == "avepool" else MatcherParams.create(dim, rng)
    head = (
        ClassifierHead.create(int(arch["num_identities"]), dim, rng)
        if arch["num_identities"] is not None
        else None
    )
    extractor = None
    ex = arch.get("extractor")
    if ex is not None:
        kwargs = dict(channels=tuple(ex["channels"]), kernel=int(ex["kernel"]))
        if ex["kind"] == "spatial":
            extractor = SpatialExtractorParams.create(int(ex["in_channels"]), dim, rng, **kwargs)
        else:
            extractor = TemporalExtractorParams.create(
                int(ex["in_channels"]), dim, rng, cell_type=ex.get("cell_type", "tanh"), **kwargs
            )
    return Model(dim=dim, mode=arch["mode"], matcher=matcher, head=head, extractor=extractor)


def load_checkpoint(path, model: Model | None = None) -> Checkpoint:
    """Load a checkpoint; with ``model`` given, tensors are copied into it
    and any name/shape disagreement raises a shape error."""
    from .errors import BadMagicError, BadVersionError, TruncatedPayloadError

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise TruncatedPayloadError(f"{path}: file shorter than the fixed header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + header_len:
        raise TruncatedPayloadError(f"{path}: truncated header")
    header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))

    if model is None:
        model = _model_from_arch(header["arch"])
    tensors = {name: node for name, node in model.named_parameters().items()}
    buffers = model.named_buffers()

    offset = 10 + header_len
    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise TruncatedPayloadError(f"{path}: tensor {name} extends past end of file")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset = end
        seen.add(name)
        if name in tensors:
            target = tensors[name].value
        elif name in buffers:
            target = buffers[name]
        else:
            raise ShapeError(f"checkpoint tensor {name} has no slot in the model")
        if target.shape != shape:
            raise ShapeError(
                f"checkpoint tensor {name} has shape {shape}, model expects {target.shape}"
            )
        target[...] = values
    missing = (set(tensors) | set(buffers)) - seen
    if missing:
        raise ShapeError(f"checkpoint is missing tensors: {sorted(missing)}")
    model.set_bn_mode("inference")
    return Checkpoint(model=model, epoch=int(header["epoch"]), rng_states=_unjsonable(header["rng"]))
