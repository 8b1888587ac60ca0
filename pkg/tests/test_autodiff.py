"""Contract tests for the reverse-mode engine: op semantics, backward rules
against central finite differences, and graph-traversal semantics."""

import numpy as np
import pytest

import duatm.autodiff as ad
from duatm.errors import DegenerateBatchError, NonFiniteError, ShapeError

from gradcheck import assert_grads_match, fd_gradient, random_projection_loss


class TestArrayInvariants:
    def test_as_array_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            ad.as_array([1.0, np.nan])

    def test_as_array_rejects_inf(self):
        with pytest.raises(NonFiniteError):
            ad.as_array([np.inf, 0.0])

    def test_leaf_is_float64_contiguous(self):
        node = ad.leaf([[1, 2], [3, 4]])
        assert node.value.dtype == np.float64
        assert node.value.flags["C_CONTIGUOUS"]
        assert node.grad.shape == node.value.shape
        assert np.all(node.grad == 0)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.leaf(np.eye(2)), ad.leaf(a))
        np.testing.assert_array_equal(out.value, a)

    def test_hand_dot_product(self):
        out = ad.matmul(ad.leaf([[1.0, 2.0]]), ad.leaf([[3.0], [4.0]]))
        assert out.value.tolist() == [[11.0]]

    def test_grad_of_sum_is_ones_bt(self, rng):
        a = ad.leaf(rng.uniform(-1, 1, (3, 4)))
        b = ad.leaf(rng.uniform(-1, 1, (4, 2)))
        ad.sum_all(ad.matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.value.T, atol=1e-12)

    def test_grads_match_fd(self, rng):
        project = random_projection_loss((3, 2), rng)
        assert_grads_match(
            lambda leaves: project(ad.matmul(leaves["a"], leaves["b"])),
            {"a": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, (4, 2))},
        )

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((2, 2))))


class TestRelu:
    def test_sign_cases(self):
        out = ad.relu(ad.leaf([-1.0, 0.0, 2.0]))
        assert out.value.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        out = ad.relu(ad.leaf([-3.0, -0.5]))
        assert np.all(out.value == 0.0)

    def test_gradient_mask(self, rng):
        x = rng.uniform(-1, 1, 20)
        x = x[np.abs(x) > 0.1]  # stay away from the kink
        node = ad.leaf(x)
        ad.sum_all(ad.relu(node)).backward()
        np.testing.assert_array_equal(node.grad, (x > 0).astype(float))
        numeric = fd_gradient(lambda v: float(np.maximum(v, 0).sum()), x)
        np.testing.assert_allclose(node.grad, numeric, atol=1e-9)

    def test_subgradient_zero_at_zero(self):
        node = ad.leaf([0.0])
        ad.sum_all(ad.relu(node)).backward()
        assert node.grad.tolist() == [0.0]


class TestBatchNorm:
    def test_training_normalizes_channels(self, rng):
        x = ad.leaf(rng.uniform(-1, 1, (16, 3)))
        state = ad.BatchNormState.create(3)
        out = ad.batch_norm(x, state, mode="training")
        np.testing.assert_allclose(out.value.mean(axis=0), 0.0, atol=1e-12)
        # variance shrinks by var/(var+eps)
        np.testing.assert_allclose(out.value.var(axis=0), 1.0, atol=1e-4)

    def test_inference_identity(self, rng):
        x = rng.uniform(-1, 1, (5, 3))
        state = ad.BatchNormState.create(3)
        out = ad.batch_norm(ad.leaf(x), state, mode="inference")
        np.testing.assert_allclose(out.value, x, rtol=1e-5, atol=1e-9)

    def test_permuting_rows_permutes_outputs(self, rng):
        x = rng.uniform(-1, 1, (8, 4))
        perm = rng.permutation(8)
        state_a = ad.BatchNormState.create(4)
        state_b = ad.BatchNormState.create(4)
        out = ad.batch_norm(ad.leaf(x), state_a, mode="training")
        out_p = ad.batch_norm(ad.leaf(x[perm]), state_b, mode="training")
        np.testing.assert_allclose(out_p.value, out.value[perm], atol=1e-12)
        np.testing.assert_allclose(state_a.running_mean, state_b.running_mean, atol=1e-12)
        np.testing.assert_allclose(state_a.running_var, state_b.running_var, atol=1e-12)

    def test_degenerate_batch(self):
        state = ad.BatchNormState.create(3)
        with pytest.raises(DegenerateBatchError):
            ad.batch_norm(ad.leaf(np.ones((1, 3))), state, mode="training")

    def test_running_stats_update(self, rng):
        x = rng.uniform(-1, 1, (10, 2))
        state = ad.BatchNormState.create(2)
        ad.batch_norm(ad.leaf(x), state, mode="training")
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(
            state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1), atol=1e-12
        )

    @pytest.mark.parametrize("mode", ["training", "inference"])
    def test_grads_match_fd(self, rng, mode):
        project = random_projection_loss((6, 3), rng)

        def make_loss(leaves):
            state = ad.BatchNormState(
                gamma=leaves["gamma"],
                beta=leaves["beta"],
                running_mean=np.array([0.1, -0.2, 0.3]),
                running_var=np.array([1.5, 0.7, 1.0]),
            )
            return project(ad.batch_norm(leaves["x"], state, mode=mode, update_running=False))

        assert_grads_match(
            make_loss,
            {
                "x": rng.uniform(-1, 1, (6, 3)),
                "gamma": rng.uniform(0.5, 1.5, 3),
                "beta": rng.uniform(-0.5, 0.5, 3),
            },
        )


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(ad.leaf([0.0, 0.0]))
        assert out.value.tolist() == [0.5, 0.5]

    def test_large_inputs_no_overflow(self):
        out = ad.softmax(ad.leaf([1000.0, 1000.0, 1000.0]))
        np.testing.assert_allclose(out.value, [1 / 3] * 3, atol=1e-15)
        assert np.all(np.isfinite(out.value))

    def test_ln2_case(self):
        # direct exp-normalization: e^{ln 2} = 2, so weights are (2/3, 1/3)
        out = ad.softmax(ad.leaf([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out.value, [2 / 3, 1 / 3], atol=1e-12)

    def test_sum_and_shift_invariance(self, rng):
        for _ in range(50):
            x = rng.uniform(-30, 30, rng.integers(1, 9))
            base = ad.softmax(ad.leaf(x)).value
            assert abs(base.sum() - 1.0) < 1e-12
            shifted = ad.softmax(ad.leaf(x + 123.456)).value
            np.testing.assert_allclose(base, shifted, atol=1e-12)

    def test_rows_variant(self, rng):
        x = rng.uniform(-2, 2, (4, 5))
        out = ad.softmax(ad.leaf(x)).value
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_grads_match_fd(self, rng):
        project = random_projection_loss((5,), rng)
        assert_grads_match(
            lambda leaves: project(ad.softmax(leaves["x"])),
            {"x": rng.uniform(-1, 1, 5)},
        )


class TestInnerAndNorms:
    def test_inner_basis(self):
        e1, e2 = np.eye(2)
        assert float(ad.inner(ad.leaf(e1), ad.leaf(e1)).value) == 1.0
        assert float(ad.inner(ad.leaf(e1), ad.leaf(e2)).value) == 0.0

    def test_inner_hand(self):
        assert float(ad.inner(ad.leaf([1.0, 2.0]), ad.leaf([3.0, 4.0])).value) == 11.0

    def test_inner_length_mismatch(self):
        with pytest.raises(ShapeError):
            ad.inner(ad.leaf([1.0]), ad.leaf([1.0, 2.0]))

    def test_l2_distance_identity(self, rng):
        x = rng.uniform(-1, 1, 4)
        assert float(ad.l2_distance(ad.leaf(x), ad.leaf(x)).value) == 0.0

    def test_l2_distance_pythagorean(self):
        d = ad.l2_distance(ad.leaf([0.0, 0.0]), ad.leaf([3.0, 4.0]))
        assert float(d.value) == 5.0

    def test_l2_grads_match_fd(self, rng):
        assert_grads_match(
            lambda leaves: ad.l2_distance(leaves["a"], leaves["b"]),
            {"a": rng.uniform(-1, 1, 4), "b": rng.uniform(-1, 1, 4)},
        )

    def test_row_norms_match_fd(self, rng):
        project = random_projection_loss((3,), rng)
        assert_grads_match(
            lambda leaves: project(ad.row_norms(leaves["x"])),
            {"x": rng.uniform(0.2, 1, (3, 4))},
        )

    def test_row_normalize_unit_output(self, rng):
        out = ad.row_normalize(ad.leaf(rng.uniform(0.5, 1.5, (4, 3))))
        np.testing.assert_allclose(np.linalg.norm(out.value, axis=1), 1.0, atol=1e-12)

    def test_row_normalize_match_fd(self, rng):
        project = random_projection_loss((3, 4), rng)
        assert_grads_match(
            lambda leaves: project(ad.row_normalize(leaves["x"])),
            {"x": rng.uniform(0.3, 1.2, (3, 4))},
        )


class TestElementwiseAndShape:
    def test_mean_axis_constant(self):
        out = ad.mean_axis(ad.leaf(np.full((3, 4), 2.5)), axis=0)
        np.testing.assert_array_equal(out.value, np.full(4, 2.5))

    @pytest.mark.parametrize(
        "name,build,shapes",
        [
            ("add", lambda lv: ad.add(lv["a"], lv["b"]), {"a": (3, 2), "b": (3, 2)}),
            ("sub", lambda lv: ad.sub(lv["a"], lv["b"]), {"a": (3, 2), "b": (3, 2)}),
            ("mul", lambda lv: ad.mul(lv["a"], lv["b"]), {"a": (3, 2), "b": (3, 2)}),
            ("scale", lambda lv: ad.scale(lv["a"], -1.7), {"a": (3, 2)}),
            ("add_const", lambda lv: ad.add_const(lv["a"], 0.3), {"a": (4,)}),
            ("add_rowvec", lambda lv: ad.add_rowvec(lv["a"], lv["b"]), {"a": (3, 2), "b": (2,)}),
            ("tile_rows", lambda lv: ad.tile_rows(lv["b"], 4), {"b": (3,)}),
            ("tanh", lambda lv: ad.tanh(lv["a"]), {"a": (3, 2)}),
            ("exp", lambda lv: ad.exp(lv["a"]), {"a": (4,)}),
            ("mean0", lambda lv: ad.mean_axis(lv["a"], 0), {"a": (3, 4)}),
            ("mean1", lambda lv: ad.mean_axis(lv["a"], 1), {"a": (3, 4)}),
            ("transpose", lambda lv: ad.transpose(lv["a"]), {"a": (3, 2)}),
            ("reshape", lambda lv: ad.reshape(lv["a"], (2, 3)), {"a": (3, 2)}),
            ("take_row", lambda lv: ad.take_row(lv["a"], 1), {"a": (3, 4)}),
            ("take_item", lambda lv: ad.take_item(lv["a"], 2), {"a": (5,)}),
            ("slice_rows", lambda lv: ad.slice_rows(lv["a"], 1, 3), {"a": (4, 2)}),
            ("matvec", lambda lv: ad.matvec(lv["a"], lv["b"]), {"a": (3, 4), "b": (4,)}),
            (
                "concat0",
                lambda lv: ad.concat([lv["a"], lv["b"]], axis=0),
                {"a": (2, 3), "b": (4, 3)},
            ),
            (
                "concat1",
                lambda lv: ad.concat([lv["a"], lv["b"]], axis=1),
                {"a": (2, 3), "b": (2, 2)},
            ),
            (
                "stack_rows",
                lambda lv: ad.stack_rows([lv["a"], lv["b"]]),
                {"a": (3,), "b": (3,)},
            ),
        ],
    )
    def test_grads_match_fd(self, rng, name, build, shapes):
        params = {k: rng.uniform(-1, 1, shp) for k, shp in shapes.items()}
        out_shape = build({k: ad.leaf(v) for k, v in params.items()}).shape
        project = random_projection_loss(out_shape, rng)
        assert_grads_match(lambda lv: project(build(lv)), params)

    def test_log_grads_match_fd(self, rng):
        project = random_projection_loss((4,), rng)
        assert_grads_match(
            lambda lv: project(ad.log(lv["a"])), {"a": rng.uniform(0.2, 2.0, 4)}
        )

    def test_im2col_grads_match_fd(self, rng):
        project = random_projection_loss((12, 18), rng)
        assert_grads_match(
            lambda lv: project(ad.im2col(lv["x"], 3, 3)),
            {"x": rng.uniform(-1, 1, (4, 3, 2))},
        )

    def test_avg_pool_grads_match_fd(self, rng):
        project = random_projection_loss((2, 2, 3), rng)
        assert_grads_match(
            lambda lv: project(ad.avg_pool2(lv["x"])),
            {"x": rng.uniform(-1, 1, (5, 4, 3))},  # odd height exercises cropping
        )


class TestBackwardSemantics:
    def test_sum_gradient_is_ones(self, rng):
        x = ad.leaf(rng.uniform(-1, 1, (3, 2)))
        ad.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_inner_self_gradient(self, rng):
        v = rng.uniform(-1, 1, 5)
        x = ad.leaf(v)
        ad.inner(x, x).backward()
        np.testing.assert_allclose(x.grad, 2 * v, atol=1e-12)
        numeric = fd_gradient(lambda u: float(u @ u), v)
        np.testing.assert_allclose(x.grad, numeric, rtol=1e-6, atol=1e-9)

    def test_diamond_graph_gradients_add(self, rng):
        v = rng.uniform(0.2, 1.0, 4)

        def make_loss(leaves):
            doubled = ad.scale(leaves["x"], 2.0)
            gated = ad.relu(leaves["x"])
            return ad.inner(doubled, gated)

        assert_grads_match(make_loss, {"x": v})

    def test_double_backward_doubles(self, rng):
        x = ad.leaf(rng.uniform(-1, 1, 4))
        loss = ad.inner(x, x)
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_zero_grads(self, rng):
        x = ad.leaf(rng.uniform(-1, 1, 4))
        ad.sum_all(x).backward()
        ad.zero_grads([x])
        assert np.all(x.grad == 0)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ShapeError):
            ad.leaf([1.0, 2.0]).backward()

    def test_composed_pipeline_matches_fd(self, rng):
        """End-to-end composition touching most ops at once."""
        project = random_projection_loss((3,), rng)

        def make_loss(leaves):
            h = ad.tanh(ad.matmul(leaves["x"], leaves["w"]))
            att = ad.softmax(ad.matvec(h, leaves["q"]))
            pooled = ad.matvec(ad.transpose(h), att)
            return ad.add(project(pooled), ad.l2_norm(pooled))

        assert_grads_match(
            make_loss,
            {
                "x": rng.uniform(-1, 1, (4, 5)),
                "w": rng.uniform(-1, 1, (5, 3)),
                "q": rng.uniform(-1, 1, 3),
            },
        )
