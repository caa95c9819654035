"""Camera model, projection round trips, plane-sweep warping and cascade
depth hypotheses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frustumfusion import autodiff as ad
from frustumfusion import cameras as cg


def random_camera(rng, width=96, height=80):
    pos = rng.uniform(-3, 3, 3)
    pos = pos / np.linalg.norm(pos) * rng.uniform(2.0, 3.0)
    return cg.make_lookat_camera(pos, rng.uniform(-0.2, 0.2, 3), (0, 0, 1),
                                 rng.uniform(80, 160), width, height,
                                 1.0, 4.0)


class TestCameraValidation:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(cg.CameraError, match="orthonormal"):
            cg.Camera(np.eye(3), np.eye(3) * 1.01, np.zeros(3), 8, 8, 1, 2)

    def test_rejects_lower_triangular_intrinsics(self):
        k = np.eye(3)
        k[1, 0] = 0.5
        with pytest.raises(cg.CameraError, match="upper-triangular"):
            cg.Camera(k, np.eye(3), np.zeros(3), 8, 8, 1, 2)

    def test_rejects_bad_depth_range(self):
        with pytest.raises(cg.CameraError):
            cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 2, 1)


class TestProjection:
    def test_identity_camera_example(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 4, 4, 0.5, 2.0)
        uv, z = cg.project(cam, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(uv, [0.0, 0.0])
        assert z == 1.0

    def test_roundtrip_at_three_depths(self):
        cam = random_camera(np.random.default_rng(0))
        for depth in (0.5, 1.0, 2.0):
            x = cg.back_project(cam, 12.5, 40.25, depth)
            uv, z = cg.project(cam, x)
            np.testing.assert_allclose(uv, [12.5, 40.25], atol=1e-9)
            np.testing.assert_allclose(z, depth, atol=1e-9)

    def test_matches_4x4_matrix_pipeline(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            cam = random_camera(rng)
            x = rng.uniform(-1, 1, 3)
            e = np.eye(4)
            e[:3, :3] = cam.r
            e[:3, 3] = cam.t
            k4 = np.eye(4)
            k4[:3, :3] = cam.k
            hom = (k4 @ e) @ np.append(x, 1.0)
            uv, z = cg.project(cam, x)
            np.testing.assert_allclose(uv, hom[:2] / hom[2], atol=1e-10)
            np.testing.assert_allclose(z, hom[2], atol=1e-10)

    def test_behind_camera_flagged(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 4, 4, 0.5, 2.0)
        _, z = cg.project(cam, np.array([0.0, 0.0, -1.0]))
        assert z <= 0

    def test_back_project_rejects_nonpositive_depth(self):
        cam = random_camera(np.random.default_rng(2))
        with pytest.raises(cg.CameraError):
            cg.back_project(cam, 1.0, 1.0, 0.0)


class TestWarp:
    def test_self_warp_is_identity(self):
        cam = random_camera(np.random.default_rng(3))
        pix = cg.pixel_grid(10, 8)
        for depth in (1.1, 2.0, 3.5):
            uv, valid = cg.warp_to_source(cam, cam, pix,
                                          np.full(len(pix), depth))
            assert valid.all()
            np.testing.assert_allclose(uv, pix, atol=1e-9)

    def test_translation_disparity_inverse_in_depth(self):
        k = np.array([[100.0, 0, 32], [0, 100.0, 32], [0, 0, 1]])
        ref = cg.Camera(k, np.eye(3), np.zeros(3), 64, 64, 0.5, 10.0)
        src = cg.Camera(k, np.eye(3), np.array([-0.2, 0.0, 0.0]),
                        64, 64, 0.5, 10.0)
        pix = np.array([[32.0, 32.0]])
        disps = []
        for depth in (1.0, 2.0, 4.0):
            uv, _ = cg.warp_to_source(ref, src, pix, np.array([depth]))
            disps.append(uv[0, 0] - 32.0)
        # disparity = f * baseline / depth
        np.testing.assert_allclose(disps, [100 * 0.2 / 1, 100 * 0.2 / 2,
                                           100 * 0.2 / 4], rtol=1e-9)

    def test_warp_equals_per_pixel_backproject_project(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            ref, src = random_camera(rng), random_camera(rng)
            pix = rng.uniform(0, 80, (25, 2))
            depths = rng.uniform(1.0, 4.0, 25)
            uv, valid = cg.warp_to_source(ref, src, pix, depths)
            for i in range(25):
                x = cg.back_project(ref, pix[i, 0], pix[i, 1], depths[i])
                uvi, z = cg.project(src, x)
                if z > 0:
                    worst = max(worst, np.abs(uvi - uv[i]).max())
        assert worst < 1e-6

    def test_warp_tensor_gradient(self):
        rng = np.random.default_rng(5)
        ref, src = random_camera(rng), random_camera(rng)
        pix = rng.uniform(10, 70, (6, 2))
        w = rng.standard_normal((6, 2))

        def fn(ts):
            uv = cg.warp_tensor(ref, src, pix, ts[0])
            return (uv * ad.Tensor(w)).sum()
        err = ad.finite_diff_check(fn, [ad.Tensor(rng.uniform(1.5, 3.0, 6))],
                                   eps=1e-6)
        assert err < 1e-4


class TestHypotheses:
    def test_level0_uniform_ladder(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 1.0, 2.0)
        hyp = cg.generate_hypotheses(0, None, cam, (4,), (1.0,), (8, 8))
        np.testing.assert_allclose(hyp.ladder_1d(),
                                   [1.0, 4.0 / 3, 5.0 / 3, 2.0])
        assert hyp.is_uniform()

    def test_level1_centered_on_midpoint(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 1.0, 2.0)
        prev = np.full((4, 4), 1.5)
        hyp = cg.generate_hypotheses(1, prev, cam, (4, 4), (1.0, 0.5),
                                     (8, 8))
        vals = hyp.values()
        np.testing.assert_allclose(vals.mean(axis=0), 1.5)
        np.testing.assert_allclose(vals[:, 0, 0],
                                   1.5 + np.linspace(-0.25, 0.25, 4))

    def test_clamp_keeps_window_inside_margin(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 1.0, 2.0)
        prev = np.full((4, 4), 1.0)      # at depth_min
        hyp = cg.generate_hypotheses(1, prev, cam, (4, 4), (1.0, 0.5),
                                     (8, 8))
        vals = hyp.values()
        assert vals.min() >= 1.0 * 0.95 - 1e-12
        assert vals.max() <= 2.0 * 1.05 + 1e-12

    def test_nonpositive_prev_replaced_and_flagged(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 1.0, 2.0)
        prev = np.full((4, 4), 1.5)
        prev[1, 1] = -1.0
        hyp = cg.generate_hypotheses(1, prev, cam, (4, 4), (1.0, 0.5),
                                     (4, 4))
        assert hyp.replaced[1, 1]
        np.testing.assert_allclose(hyp.values()[:, 1, 1].mean(), 1.5)

    @given(st.integers(2, 32), st.floats(0.05, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_strictly_increasing_everywhere(self, count, scale):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 1.0, 2.0)
        rng = np.random.default_rng(count)
        prev = rng.uniform(0.9, 2.1, (4, 4))
        hyp = cg.generate_hypotheses(1, prev, cam, (4, count), (1.0, scale),
                                     (8, 8))
        assert np.all(np.diff(hyp.values(), axis=0) > 0)

    def test_level0_needs_no_prev_but_level1_does(self):
        cam = cg.Camera(np.eye(3), np.eye(3), np.zeros(3), 8, 8, 1.0, 2.0)
        with pytest.raises(ValueError):
            cg.generate_hypotheses(1, None, cam, (4, 4), (1.0, 0.5), (8, 8))


class TestRays:
    def test_unit_direction_invariant(self):
        cam = random_camera(np.random.default_rng(6))
        _, dirs, dir_z = cg.rays_for_pixels(cam, cg.pixel_grid(8, 8))
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0,
                                   atol=1e-12)
        assert (dir_z > 0).all()
        with pytest.raises(cg.CameraError):
            cg.Ray(origin=np.zeros(3), direction=np.array([1.0, 1.0, 0.0]),
                   pixel=(0, 0))

    def test_ray_depth_consistency(self):
        cam = random_camera(np.random.default_rng(7))
        pix = np.array([[10.0, 20.0]])
        origins, dirs, dir_z = cg.rays_for_pixels(cam, pix)
        t = 2.0 / dir_z[0]
        world = origins[0] + t * dirs[0]
        _, z = cg.project(cam, world)
        np.testing.assert_allclose(z, 2.0, atol=1e-12)


class TestCameraFiles:
    def test_write_read_write_bit_identical(self, tmp_path):
        cam = random_camera(np.random.default_rng(8))
        path = tmp_path / "cam.txt"
        cg.write_camera_file(path, cam, depth_count=48)
        cam2, count = cg.read_camera_file(path, cam.width, cam.height)
        assert count == 48
        text1 = path.read_text()
        cg.write_camera_file(path, cam2, depth_count=48)
        assert path.read_text() == text1
        np.testing.assert_array_equal(cam.k, cam2.k)
        np.testing.assert_array_equal(cam.r, cam2.r)
        np.testing.assert_array_equal(cam.t, cam2.t)

    def test_malformed_rejected(self):
        with pytest.raises(cg.CameraError):
            cg.camera_from_text("nonsense", 8, 8)
