"""Spatial/temporal encoders: shape contracts, equivariances, gradient flow."""

import numpy as np
import pytest

import duatm.autodiff as ad
from duatm.data import FeatureSequence, write_fseq
from duatm.errors import DataError, NormalizationError, ShapeError
from duatm.extractors import (
    SpatialExtractorParams,
    TemporalExtractorParams,
    extract_passthrough,
    extract_spatial,
    extract_spatial_node,
    extract_temporal,
    extract_temporal_node,
    spatial_output_length,
)

from gradcheck import random_projection_loss


@pytest.fixture
def gen():
    return np.random.Generator(np.random.Philox(key=99))


class TestSpatial:
    def test_sequence_length_is_shape_arithmetic(self, gen):
        params = SpatialExtractorParams.create(in_channels=1, dim=5, rng=gen)
        for h, w in [(12, 8), (8, 8), (9, 13)]:
            out = extract_spatial(gen.standard_normal((h, w, 1)), params)
            assert out.length == spatial_output_length(h, w)
            assert out.dim == 5

    def test_length_is_content_independent(self, gen):
        params = SpatialExtractorParams.create(1, 4, gen)
        a = extract_spatial(gen.standard_normal((8, 12, 1)), params)
        b = extract_spatial(10.0 * gen.standard_normal((8, 12, 1)), params)
        assert a.length == b.length == spatial_output_length(8, 12)

    def test_unit_norm_outputs(self, gen):
        params = SpatialExtractorParams.create(2, 6, gen)
        out = extract_spatial(gen.standard_normal((8, 8, 2)), params)
        np.testing.assert_allclose(np.linalg.norm(out.vectors, axis=1), 1.0, atol=1e-9)

    def test_cyclic_shift_permutes_sequence(self, gen):
        # circular padding + two 2x2 pools: shifting the input by 4 pixels
        # rolls the position grid by one row
        params = SpatialExtractorParams.create(1, 5, gen)
        img = gen.standard_normal((12, 8, 1))
        base = extract_spatial(img, params).vectors.reshape(3, 2, 5)
        shifted = extract_spatial(np.roll(img, 4, axis=0), params).vectors.reshape(3, 2, 5)
        np.testing.assert_allclose(shifted, np.roll(base, 1, axis=0), atol=1e-12)

    def test_zero_input_zero_bias_hits_normalization_guard(self, gen):
        params = SpatialExtractorParams.create(1, 4, gen)
        for stage in params.stages:
            stage.bias.value[...] = 0.0
        params.embed_bias.value[...] = 0.0
        with pytest.raises(NormalizationError):
            extract_spatial(np.zeros((8, 8, 1)), params)

    def test_too_small_input(self, gen):
        params = SpatialExtractorParams.create(1, 4, gen)
        with pytest.raises(ShapeError):
            extract_spatial(np.ones((2, 2, 1)), params)

    def test_channel_mismatch(self, gen):
        params = SpatialExtractorParams.create(1, 4, gen)
        with pytest.raises(ShapeError):
            extract_spatial(np.ones((8, 8, 3)), params)

    def test_gradients_reach_every_parameter(self, gen):
        params = SpatialExtractorParams.create(2, 4, gen)
        out = extract_spatial_node(gen.standard_normal((8, 8, 2)), params)
        project = random_projection_loss(out.shape, gen)
        project(out).backward()
        for name, node in params.named_parameters().items():
            assert np.any(node.grad != 0), f"dead parameter {name}"


class TestTemporal:
    def test_single_frame(self, gen):
        params = TemporalExtractorParams.create(1, 4, gen)
        out = extract_temporal(gen.standard_normal((1, 8, 8, 1)), params)
        assert out.length == 1 and out.dim == 4

    def test_sequence_length_equals_frames(self, gen):
        params = TemporalExtractorParams.create(1, 4, gen)
        out = extract_temporal(gen.standard_normal((5, 8, 8, 1)), params)
        assert out.length == 5

    def test_reversal_symmetry(self, gen):
        """Reversing frames while swapping the two recurrences (and the
        projection's column blocks) reverses the output sequence."""
        dim = 4
        params = TemporalExtractorParams.create(1, dim, gen)
        video = gen.standard_normal((5, 8, 8, 1))

        swapped = TemporalExtractorParams(
            stages=params.stages,
            embed_weight=params.embed_weight,
            embed_bias=params.embed_bias,
            in_channels=params.in_channels,
            channels=params.channels,
            kernel=params.kernel,
            forward_cell=params.backward_cell,
            backward_cell=params.forward_cell,
            proj_weight=ad.leaf(
                np.vstack([params.proj_weight.value[dim:], params.proj_weight.value[:dim]])
            ),
            proj_bias=params.proj_bias,
        )
        base = extract_temporal(video, params).vectors
        rev = extract_temporal(video[::-1].copy(), swapped).vectors
        np.testing.assert_allclose(rev, base[::-1], atol=1e-12)

    def test_constant_video_memoryless_recurrence(self, gen):
        # with the recurrent weights zeroed the cell is memoryless, so a
        # constant video maps to T identical output vectors
        params = TemporalExtractorParams.create(1, 4, gen)
        for cell in (params.forward_cell, params.backward_cell):
            cell.w_h.value[...] = 0.0
        frame = gen.standard_normal((8, 8, 1))
        video = np.stack([frame] * 4)
        out = extract_temporal(video, params).vectors
        for row in out[1:]:
            np.testing.assert_allclose(row, out[0], atol=1e-9)

    def test_gradients_reach_every_parameter(self, gen):
        params = TemporalExtractorParams.create(1, 3, gen)
        out = extract_temporal_node(gen.standard_normal((3, 8, 8, 1)), params)
        project = random_projection_loss(out.shape, gen)
        project(out).backward()
        for name, node in params.named_parameters().items():
            assert np.any(node.grad != 0), f"dead parameter {name}"

    def test_unsupported_cell_type(self, gen):
        with pytest.raises(DataError):
            TemporalExtractorParams.create(1, 4, gen, cell_type="gru")


class TestPassthrough:
    def test_round_trip(self, gen, tmp_path):
        rows = gen.standard_normal((4, 6))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        path = tmp_path / "seq.fseq"
        write_fseq(FeatureSequence(rows), path)
        out = extract_passthrough(path, dim=6)
        np.testing.assert_allclose(out.vectors, rows, atol=1e-6)  # f32 storage
        np.testing.assert_allclose(np.linalg.norm(out.vectors, axis=1), 1.0, atol=1e-12)

    def test_dim_mismatch(self, gen, tmp_path):
        path = tmp_path / "seq.fseq"
        write_fseq(FeatureSequence(gen.standard_normal((4, 6))), path)
        with pytest.raises(ShapeError):
            extract_passthrough(path, dim=5)

    def test_normalization_idempotent(self, gen, tmp_path):
        path = tmp_path / "seq.fseq"
        write_fseq(FeatureSequence(gen.standard_normal((3, 4))), path)
        once = extract_passthrough(path)
        np.testing.assert_allclose(
            np.linalg.norm(once.vectors, axis=1), 1.0, atol=1e-12
        )
