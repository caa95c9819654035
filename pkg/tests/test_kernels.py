"""Cross-backend equivalence of the hot kernels: the compiled extension and
the pure-numpy fallback must agree bit-for-bit."""

import numpy as np
import pytest

from frustumfusion import _kernels

npb = _kernels.get_backend("python")
try:
    cb = _kernels.get_backend("compiled")
except RuntimeError:
    cb = None

pytestmark = pytest.mark.skipif(cb is None,
                                reason="compiled backend unavailable")


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def test_active_backend_is_one_of_the_two(dtype):
    assert _kernels.BACKEND in ("compiled", "python")


def test_unfold_fold_2d(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 9)).astype(dtype)
    a = npb.unfold2d(x, 3, 3, 2, 2, 3, 4)
    b = cb.unfold2d(x, 3, 3, 2, 2, 3, 4)
    assert np.array_equal(a, b)
    g = rng.standard_normal(a.shape).astype(dtype)
    fa = npb.fold2d(g, 2, 3, 7, 9, 3, 3, 2, 2, 3, 4)
    fb = cb.fold2d(g, 2, 3, 7, 9, 3, 3, 2, 2, 3, 4)
    assert np.array_equal(fa, fb)


def test_unfold_fold_3d(dtype):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 7, 9)).astype(dtype)
    a = npb.unfold3d(x, 3, 3, 3, 1, 1, 1, 3, 5, 7)
    b = cb.unfold3d(x, 3, 3, 3, 1, 1, 1, 3, 5, 7)
    assert np.array_equal(a, b)
    g = rng.standard_normal(a.shape).astype(dtype)
    fa = npb.fold3d(g, 2, 3, 5, 7, 9, 3, 3, 3, 1, 1, 1, 3, 5, 7)
    fb = cb.fold3d(g, 2, 3, 5, 7, 9, 3, 3, 3, 1, 1, 1, 3, 5, 7)
    assert np.array_equal(fa, fb)


def test_unfold_fold_3d_range(dtype):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 8, 10)).astype(dtype)
    full_np = npb.unfold3d(x, 3, 3, 3, 1, 1, 1, 4, 6, 8)
    lo, hi = 2 * 8, 30 * 8
    a = npb.unfold3d_range(x, 3, 3, 3, 1, 1, 1, 4, 6, 8, lo, hi)
    b = cb.unfold3d_range(x, 3, 3, 3, 1, 1, 1, 4, 6, 8, lo, hi)
    assert np.array_equal(a, b)
    assert np.array_equal(a, full_np[:, lo:hi])
    g = rng.standard_normal(a.shape).astype(dtype)
    oa = np.zeros_like(x)
    ob = np.zeros_like(x)
    npb.fold3d_add_range(oa, g, 3, 3, 3, 1, 1, 1, 4, 6, 8, lo, hi)
    cb.fold3d_add_range(ob, g, 3, 3, 3, 1, 1, 1, 4, 6, 8, lo, hi)
    assert np.array_equal(oa, ob)


def _sampler_inputs(dtype, seed):
    rng = np.random.default_rng(seed)
    vol2 = rng.standard_normal((2, 4, 6, 8)).astype(dtype)
    xy = (rng.random((2, 64, 2)) * np.array([9.0, 7.0]) - 1).astype(dtype)
    vol3 = rng.standard_normal((2, 4, 5, 6, 8)).astype(dtype)
    xyz = (rng.random((2, 64, 3)) * np.array([9.0, 7.0, 6.0]) - 1) \
        .astype(dtype)
    return rng, vol2, xy, vol3, xyz


def test_bilinear_parity(dtype):
    rng, vol, xy, _, _ = _sampler_inputs(dtype, 3)
    oa, ca = npb.bilinear_gather(vol, xy)
    ob, cbv = cb.bilinear_gather(vol, xy)
    assert np.array_equal(oa, ob) and np.array_equal(ca, cbv)
    g = rng.standard_normal(oa.shape).astype(dtype)
    assert np.array_equal(npb.bilinear_scatter(xy, g, 4, 6, 8),
                          cb.bilinear_scatter(xy, g, 4, 6, 8))
    assert np.array_equal(npb.bilinear_coord_grad(vol, xy, g),
                          cb.bilinear_coord_grad(vol, xy, g))


def test_trilinear_parity(dtype):
    rng, _, _, vol, xyz = _sampler_inputs(dtype, 4)
    oa, ca = npb.trilinear_gather(vol, xyz)
    ob, cbv = cb.trilinear_gather(vol, xyz)
    assert np.array_equal(oa, ob) and np.array_equal(ca, cbv)
    g = rng.standard_normal(oa.shape).astype(dtype)
    assert np.array_equal(npb.trilinear_scatter(xyz, g, 4, 5, 6, 8),
                          cb.trilinear_scatter(xyz, g, 4, 5, 6, 8))
    assert np.array_equal(npb.trilinear_coord_grad(vol, xyz, g),
                          cb.trilinear_coord_grad(vol, xyz, g))


def test_frustum_parity(dtype):
    rng = np.random.default_rng(5)
    for _ in range(3):
        start = (rng.random((2, 5, 6)) + 1).astype(dtype)
        step = np.asarray([0.3, 0.4], dtype=dtype)
        uvz = np.stack([rng.random((2, 80)) * 6 - 0.5,
                        rng.random((2, 80)) * 5 - 0.5,
                        rng.random((2, 80)) * 2 + 0.8], axis=-1).astype(dtype)
        vol = rng.standard_normal((2, 4, 4, 5, 6)).astype(dtype)
        oa, ca = npb.frustum_gather(vol, uvz, start, step)
        ob, cbv = cb.frustum_gather(vol, uvz, start, step)
        assert np.array_equal(oa, ob) and np.array_equal(ca, cbv)
        g = rng.standard_normal(oa.shape).astype(dtype)
        assert np.array_equal(
            npb.frustum_scatter(uvz, start, step, g, 4, 4, 5, 6),
            cb.frustum_scatter(uvz, start, step, g, 4, 4, 5, 6))
        assert np.array_equal(
            npb.frustum_coord_grad(vol, uvz, start, step, g),
            cb.frustum_coord_grad(vol, uvz, start, step, g))


def test_out_of_bounds_reads_are_zero(dtype):
    vol = np.ones((1, 1, 4, 4), dtype=dtype)
    xy = np.asarray([[[-5.0, -5.0], [10.0, 1.0]]], dtype=dtype)
    for backend in (npb, cb):
        out, cover = backend.bilinear_gather(vol, xy)
        assert np.all(out == 0)
        assert np.all(cover == 0)
