"""Tensor/graph core: primitive semantics, backward correctness, the
parameter store and the gradcheck oracle."""

import numpy as np
import pytest

from frustumfusion import autodiff as ad
from frustumfusion import gradcheck as gc


class TestPrimitiveForward:
    def test_sigmoid_at_zero(self):
        out = ad.sigmoid(ad.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.5)

    def test_softmax_uniform_logits(self):
        out = ad.softmax(ad.Tensor(np.zeros(2)), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_softmax_normalized_and_nonnegative(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.standard_normal((5, 7)) * 3)
        out = ad.softmax(x, axis=1)
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 6))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w))
        np.testing.assert_array_equal(out.data, x.astype(np.float64))

    def test_conv_transpose3d_matches_direct_scatter(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 2, 3, 2))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        y = ad.conv_transpose3d(ad.Tensor(x), ad.Tensor(w), None,
                                stride=2, padding=1, output_padding=1)
        ref = np.zeros_like(y.data)
        for ci in range(2):
            for z in range(2):
                for yy in range(3):
                    for xx in range(2):
                        for co in range(2):
                            for dz in range(3):
                                for dy in range(3):
                                    for dx in range(3):
                                        zo = z * 2 + dz - 1
                                        yo = yy * 2 + dy - 1
                                        xo = xx * 2 + dx - 1
                                        if (0 <= zo < ref.shape[2]
                                                and 0 <= yo < ref.shape[3]
                                                and 0 <= xo < ref.shape[4]):
                                            ref[0, co, zo, yo, xo] += \
                                                x[0, ci, z, yy, xx] \
                                                * w[ci, co, dz, dy, dx]
        np.testing.assert_allclose(y.data, ref, atol=1e-12)

    def test_shape_errors_report_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(3, 4\)"):
            ad.matmul(ad.Tensor(np.zeros((3, 4))),
                      ad.Tensor(np.zeros((3, 4))))

    def test_finite_check_flags_nonfinite(self):
        with ad.finite_checks():
            with pytest.raises(ad.FiniteCheckError, match="log"):
                ad.log(ad.Tensor(np.array([-1.0])))

    def test_apply_primitive_dispatch(self):
        out = ad.apply_primitive("add", [ad.Tensor(np.ones(3)),
                                         ad.Tensor(np.ones(3))])
        np.testing.assert_array_equal(out.data, 2 * np.ones(3))
        with pytest.raises(KeyError):
            ad.apply_primitive("nope", [])


class TestBackward:
    def test_square_gradient(self):
        x = ad.Tensor(np.array(3.0), requires_grad=True)
        loss = x * x
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 6.0)

    def test_sigmoid_sum_gradient_at_zero(self):
        x = ad.Tensor(np.zeros(5), requires_grad=True)
        ad.backward(ad.sigmoid(x).sum())
        np.testing.assert_allclose(x.grad, 0.25)

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.backward(x * 2.0)

    def test_repeated_backward_accumulates_on_leaves(self):
        x = ad.Tensor(np.array(2.0), requires_grad=True)
        ad.backward(x * x)
        ad.backward(x * x)
        np.testing.assert_allclose(x.grad, 8.0)

    def test_shared_subgraph_terms_are_independent(self):
        # intermediate grads must not leak between backward calls
        x = ad.Tensor(np.array([1.5]), requires_grad=True)
        y = x * 2.0
        a = (y * y).sum()
        b = (y * 3.0).sum()
        ad.backward(a)
        ga = x.grad.copy()
        x.zero_grad()
        ad.backward(b)
        np.testing.assert_allclose(ga, 2 * 2.0 * 2.0 * 1.5)
        np.testing.assert_allclose(x.grad, 6.0)

    def test_diamond_graph(self):
        x = ad.Tensor(np.array(1.0), requires_grad=True)
        y = x * 3.0
        loss = (y * y + y).sum()
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * 3.0 * 3.0 + 3.0)

    def test_random_composition_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((4, 3))

        def fn(ts):
            h = ad.relu(ad.matmul(ts[0], ts[1]))
            s = ad.sigmoid(h).sum() + ad.exp(ts[0] * 0.1).mean()
            return s
        x = rng.standard_normal((2, 4)) + 0.3
        err = ad.finite_diff_check(fn, [ad.Tensor(x), ad.Tensor(w)],
                                   eps=1e-5)
        assert err < 1e-4


class TestFiniteDiffCheck:
    def test_sum_of_squares_tight(self):
        def fn(ts):
            return (ts[0] * ts[0]).sum()
        err = ad.finite_diff_check(
            fn, [ad.Tensor(np.random.default_rng(0).standard_normal(6))])
        assert err < 1e-8

    def test_trilinear_sample_at_cell_center(self):
        vol = np.random.default_rng(1).standard_normal((1, 2, 4, 4, 4))
        xyz = np.array([[[1.5, 1.5, 1.5]]])

        def fn(ts):
            out, _ = ad.grid_sample_3d(ts[0], ts[1])
            return out.sum()
        err = ad.finite_diff_check(fn, [ad.Tensor(vol), ad.Tensor(xyz)])
        assert err < 1e-6

    def test_constant_function_zero_error(self):
        def fn(ts):
            return ad.Tensor(np.zeros(())) + 0.0 * ts[0].sum()
        err = ad.finite_diff_check(fn, [ad.Tensor(np.ones(3))])
        assert err == 0.0


class TestGradcheckSuite:
    def test_every_primitive_has_a_case(self):
        assert set(gc.CASES) >= set(ad.PRIMITIVES)

    def test_full_suite_passes(self):
        report, ok = gc.run_all(seed=0)
        worst = max(report.items(), key=lambda kv: kv[1]["error"])
        assert ok, f"worst primitive: {worst}"


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = ad.ParameterStore()
        store.register("w", np.zeros(2))
        with pytest.raises(ValueError):
            store.register("w", np.zeros(2))

    def test_iteration_order_is_insertion_order(self):
        store = ad.ParameterStore()
        for name in ("zeta", "alpha", "mid"):
            store.register(name, np.zeros(1))
        assert store.names() == ["zeta", "alpha", "mid"]

    def test_state_roundtrip_and_mismatch(self):
        store = ad.ParameterStore()
        store.register("a", np.arange(3, dtype=np.float32))
        state = {k: v.copy() for k, v in store.state_arrays().items()}
        state["a"] += 1
        store.load_state_arrays(state)
        np.testing.assert_array_equal(store["a"].data, [1, 2, 3])
        with pytest.raises(KeyError):
            store.load_state_arrays({})


class TestDeterminism:
    def test_forward_bit_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 8, 6, 6)).astype(np.float32)
        w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
        a = ad.conv2d(ad.Tensor(x), ad.Tensor(w), padding=1)
        b = ad.conv2d(ad.Tensor(x), ad.Tensor(w), padding=1)
        assert np.array_equal(a.data, b.data)

    def test_conv3d_tiling_invariant(self):
        # different tile sizes must not change values
        rng = np.random.default_rng(4)
        x = ad.Tensor(rng.standard_normal((2, 4, 6, 10, 12))
                      .astype(np.float32))
        w = ad.Tensor(rng.standard_normal((4, 4, 3, 3, 3))
                      .astype(np.float32))
        old = ad._CONV3D_TILE
        try:
            ad._CONV3D_TILE = 24576
            a = ad.conv3d(x, w, padding=1)
            ad._CONV3D_TILE = 120
            b = ad.conv3d(x, w, padding=1)
        finally:
            ad._CONV3D_TILE = old
        np.testing.assert_allclose(a.data, b.data, rtol=2e-6, atol=2e-6)
