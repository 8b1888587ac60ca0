"""Toy trainable encoders turning raw inputs into feature sequences.

Spatial path (image H x W x C): two stages of stride-1 3x3 convolution with
circular padding, ReLU, and 2x2 average pooling, then a shared linear
embedding of every positional channel vector down to dimension D. Positions
are ordered row-major; every output vector is unit-normalized. Circular
padding keeps the stack exactly equivariant to cyclic translations at
pooling-stride granularity, which pins down the sequence-permutation
behaviour under shifts.

Temporal path (video T x H x W x C): the same conv stack runs per frame
with shared weights, global average pooling gives one vector per frame,
frames are embedded to D, and a forward plus a backward tanh recurrence over
the embedded frames produces hidden states whose concatenation is projected
back to D. The sequence length equals T.

Passthrough: load a precomputed ``.fseq`` sequence and re-normalize.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import FeatureSequence, normalize_sequence, read_fseq
from .errors import DataError, ShapeError
from .matcher import init_uniform

SUPPORTED_CELLS = ("tanh",)
DEFAULT_CHANNELS = (8, 16)
DEFAULT_KERNEL = 3


@dataclass
class ConvStage:
    weight: Node  # (k*k*C_in, C_out)
    bias: Node  # (C_out,)


@dataclass
class RecurrentCell:
    w_in: Node  # (D, D)
    w_h: Node  # (D, D)
    bias: Node  # (D,)


def _make_stages(in_channels: int, channels: tuple[int, ...], kernel: int, rng) -> list[ConvStage]:
    stages = []
    c_in = in_channels
    for c_out in channels:
        fan_in = kernel * kernel * c_in
        stages.append(
            ConvStage(
                weight=ad.leaf(init_uniform(rng, (fan_in, c_out), fan_in)),
                bias=ad.leaf(init_uniform(rng, (c_out,), fan_in)),
            )
        )
        c_in = c_out
    return stages


@dataclass
class SpatialExtractorParams:
    """Conv stages plus the shared positional embedding."""

    stages: list[ConvStage]
    embed_weight: Node  # (C_last, D)
    embed_bias: Node  # (D,)
    in_channels: int
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    kernel: int = DEFAULT_KERNEL

    kind = "spatial"

    @classmethod
    def create(
        cls,
        in_channels: int,
        dim: int,
        rng: np.random.Generator,
        channels: tuple[int, ...] = DEFAULT_CHANNELS,
        kernel: int = DEFAULT_KERNEL,
    ) -> "SpatialExtractorParams":
        stages = _make_stages(in_channels, channels, kernel, rng)
        c_last = channels[-1]
        return cls(
            stages=stages,
            embed_weight=ad.leaf(init_uniform(rng, (c_last, dim), c_last)),
            embed_bias=ad.leaf(init_uniform(rng, (dim,), c_last)),
            in_channels=in_channels,
            channels=tuple(channels),
            kernel=kernel,
        )

    @property
    def dim(self) -> int:
        return self.embed_weight.shape[1]

    def named_parameters(self) -> dict[str, Node]:
        out: dict[str, Node] = {}
        for i, stage in enumerate(self.stages):
            out[f"extractor.conv{i}.weight"] = stage.weight
            out[f"extractor.conv{i}.bias"] = stage.bias
        out["extractor.embed.weight"] = self.embed_weight
        out["extractor.embed.bias"] = self.embed_bias
        return out

    def arch(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "dim": self.dim,
        }


@dataclass
class TemporalExtractorParams(SpatialExtractorParams):
    """Adds the bidirectional recurrence and its output projection."""

    forward_cell: RecurrentCell = None
    backward_cell: RecurrentCell = None
    proj_weight: Node = None  # (2D, D)
    proj_bias: Node = None  # (D,)
    cell_type: str = "tanh"

    kind = "temporal"

    @classmethod
    def create(
        cls,
        in_channels: int,
        dim: int,
        rng: np.random.Generator,
        channels: tuple[int, ...] = DEFAULT_CHANNELS,
        kernel: int = DEFAULT_KERNEL,
        cell_type: str = "tanh",
    ) -> "TemporalExtractorParams":
        if cell_type not in SUPPORTED_CELLS:
            raise DataError(f"unsupported recurrent cell {cell_type!r}")
        base = SpatialExtractorParams.create(in_channels, dim, rng, channels, kernel)

        def make_cell():
            return RecurrentCell(
                w_in=ad.leaf(init_uniform(rng, (dim, dim), dim)),
                w_h=ad.leaf(init_uniform(rng, (dim, dim), dim)),
                bias=ad.leaf(init_uniform(rng, (dim,), dim)),
            )

        return cls(
            stages=base.stages,
            embed_weight=base.embed_weight,
            embed_bias=base.embed_bias,
            in_channels=in_channels,
            channels=tuple(channels),
            kernel=kernel,
            forward_cell=make_cell(),
            backward_cell=make_cell(),
            proj_weight=ad.leaf(init_uniform(rng, (2 * dim, dim), 2 * dim)),
            proj_bias=ad.leaf(init_uniform(rng, (dim,), 2 * dim)),
            cell_type=cell_type,
        )

    def named_parameters(self) -> dict[str, Node]:
        out = super().named_parameters()
        for tag, cell in (("fwd", self.forward_cell), ("bwd", self.backward_cell)):
            out[f"extractor.{tag}.w_in"] = cell.w_in
            out[f"extractor.{tag}.w_h"] = cell.w_h
            out[f"extractor.{tag}.bias"] = cell.bias
        out["extractor.proj.weight"] = self.proj_weight
        out["extractor.proj.bias"] = self.proj_bias
        return out

    def arch(self) -> dict:
        out = super().arch()
        out["cell_type"] = self.cell_type
        return out


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _conv_stack(x: Node, params: SpatialExtractorParams) -> Node:
    """(H, W, C_in) -> (H', W', C_last) through conv/ReLU/pool stages."""
    for stage in params.stages:
        h, w, _ = x.shape
        cols = ad.im2col(x, params.kernel, params.kernel)
        pre = ad.add_rowvec(ad.matmul(cols, stage.weight), stage.bias)
        act = ad.relu(ad.reshape(pre, (h, w, stage.weight.shape[1])))
        x = ad.avg_pool2(act)
    return x


def _embed_rows(rows: Node, params: SpatialExtractorParams) -> Node:
    return ad.add_rowvec(ad.matmul(rows, params.embed_weight), params.embed_bias)


def spatial_output_length(height: int, width: int, num_stages: int = 2) -> int:
    """Sequence length produced by the conv schedule; content-independent."""
    h, w = height, width
    for _ in range(num_stages):
        h, w = h // 2, w // 2
    return h * w


def extract_spatial_node(image, params: SpatialExtractorParams) -> Node:
    img = image if isinstance(image, Node) else ad.leaf(np.asarray(image, dtype=np.float64))
    if img.value.ndim != 3:
        raise ShapeError(f"image must be (H, W, C), got {img.shape}")
    if img.shape[2] != params.in_channels:
        raise ShapeError(f"image has {img.shape[2]} channels, extractor expects {params.in_channels}")
    feat = _conv_stack(img, params)
    h, w, c = feat.shape
    rows = ad.reshape(feat, (h * w, c))
    return ad.row_normalize(_embed_rows(rows, params))


def extract_spatial(image, params: SpatialExtractorParams) -> FeatureSequence:
    return FeatureSequence(extract_spatial_node(image, params).value.copy())


def _frame_vectors(video: Node, params: SpatialExtractorParams) -> list[Node]:
    t = video.shape[0]
    flat = ad.reshape(video, (t, -1))
    vecs = []
    for i in range(t):
        frame = ad.reshape(ad.slice_rows(flat, i, i + 1), video.shape[1:])
        feat = _conv_stack(frame, params)
        h, w, c = feat.shape
        vecs.append(ad.mean_axis(ad.reshape(feat, (h * w, c)), axis=0))
    return vecs


def _recur(cell: RecurrentCell, inputs: list[Node]) -> list[Node]:
    dim = cell.bias.shape[0]
    h = ad.leaf(np.zeros(dim))
    states = []
    for e in inputs:
        h = ad.tanh(ad.add(ad.add(ad.matvec(cell.w_in, e), ad.matvec(cell.w_h, h)), cell.bias))
        states.append(h)
    return states


def extract_temporal_node(video, params: TemporalExtractorParams) -> Node:
    vid = video if isinstance(video, Node) else ad.leaf(np.asarray(video, dtype=np.float64))
    if vid.value.ndim != 4:
        raise ShapeError(f"video must be (T, H, W, C), got {vid.shape}")
    if vid.shape[3] != params.in_channels:
        raise ShapeError(f"video has {vid.shape[3]} channels, extractor expects {params.in_channels}")
    frames = _frame_vectors(vid, params)
    embedded = _embed_rows(ad.stack_rows(frames), params)
    per_step = [ad.take_row(embedded, i) for i in range(len(frames))]
    fwd_states = _recur(params.forward_cell, per_step)
    bwd_states = list(reversed(_recur(params.backward_cell, list(reversed(per_step)))))
    merged = ad.concat([ad.stack_rows(fwd_states), ad.stack_rows(bwd_states)], axis=1)
    out = ad.add_rowvec(ad.matmul(merged, params.proj_weight), params.proj_bias)
    return ad.row_normalize(out)


def extract_temporal(video, params: TemporalExtractorParams) -> FeatureSequence:
    return FeatureSequence(extract_temporal_node(video, params).value.copy())


def extract_passthrough(path, dim: int | None = None) -> FeatureSequence:
    """Load a precomputed sequence from disk and unit-normalize it."""
    seq = normalize_sequence(read_fseq(path))
    if dim is not None and seq.dim != dim:
        raise ShapeError(f"{path}: sequence dim {seq.dim} does not match configured dim {dim}")
    return seq
