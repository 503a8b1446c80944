import filecmp
import os

import numpy as np
import pytest

from epirecon import geometry as geo
from epirecon import imgio, scenegen as sg
from epirecon.losses import global_triplet_loss
from epirecon.diffcore import DualArray


def sphere_hit_depth(cam, px, radius=1.0):
    """Closed-form camera-frame z of the first ray/sphere intersection."""
    ray = geo.pixel_to_ray(cam, px)
    o, d = ray.origin, ray.direction
    b = np.dot(d, o)
    disc = b * b - (np.dot(o, o) - radius ** 2)
    if disc <= 0:
        return None
    t = -b - np.sqrt(disc)
    p = ray.at(t)
    return (p @ cam.rotation.T + cam.translation)[2]


class TestAnalyticSdf:
    def test_sphere_values(self):
        s = sg.build_scene("sphere")
        np.testing.assert_allclose(s.sdf(np.array([[0, 0, 0]])), [-1.0])
        np.testing.assert_allclose(s.sdf(np.array([[1, 0, 0]])), [0.0], atol=1e-15)
        np.testing.assert_allclose(s.sdf(np.array([[2, 0, 0]])), [1.0])

    def test_box_face_distance(self):
        box = sg.make_box([0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(box.sdf(np.array([[2, 0, 0]])), [1.0])

    def test_union_is_min(self):
        scene = sg.build_scene("union")
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(50, 3)) * 1.5
        a = scene.primitives[0].sdf(pts)
        b = scene.primitives[1].sdf(pts)
        np.testing.assert_array_equal(scene.sdf(pts), np.minimum(a, b))

    def test_smooth_union_below_min(self):
        scene = sg.build_scene("smooth-union")
        pts = np.random.default_rng(1).normal(size=(50, 3))
        hard = np.minimum(scene.primitives[0].sdf(pts), scene.primitives[1].sdf(pts))
        assert np.all(scene.sdf(pts) <= hard + 1e-12)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            sg.make_sphere([0, 0, 0], -1.0)


class TestGroundTruthRender:
    def test_on_axis_depth(self):
        scene = sg.build_scene("sphere")
        cam = geo.look_at_camera([0, 0, -4], [0, 0, 0], [0, 1, 0], 76.8, 76.8,
                                 31.5, 31.5, 64, 64)
        img, dep, mask = sg.render_ground_truth(scene, cam)
        # principal point sits between the four central pixels
        for y in (31, 32):
            for x in (31, 32):
                assert mask[y, x]
                assert abs(dep[y, x] - 3.0) < 1e-3

    def test_traced_matches_closed_form(self):
        scene = sg.build_scene("sphere")
        cam = sg.default_rig(1, width=64, height=64)[0]
        img, dep, mask = sg.render_ground_truth(scene, cam)
        worst = 0.0
        for y in range(0, 64, 2):
            for x in range(0, 64, 2):
                z = sphere_hit_depth(cam, (x, y))
                if z is not None and mask[y, x]:
                    worst = max(worst, abs(z - dep[y, x]))
        assert worst < 1e-4 * scene.scale

    def test_mask_iff_intersection(self):
        # compare away from the tracer tolerance band at the silhouette
        scene = sg.build_scene("sphere")
        cam = sg.default_rig(1, width=48, height=48)[0]
        _, _, mask = sg.render_ground_truth(scene, cam)
        for y in range(0, 48, 3):
            for x in range(0, 48, 3):
                ray = geo.pixel_to_ray(cam, (x, y))
                b = np.dot(ray.direction, ray.origin)
                disc = b * b - (np.dot(ray.origin, ray.origin) - 1.0)
                margin = 1e-3
                if disc > margin:
                    assert mask[y, x], (x, y)
                elif disc < -margin:
                    assert not mask[y, x], (x, y)

    def test_miss_leaves_background(self):
        scene = sg.build_scene("sphere")
        cam = sg.default_rig(1)[0]
        img, dep, mask = sg.render_ground_truth(scene, cam)
        assert not mask[0, 0]
        np.testing.assert_array_equal(img[0, 0], 0.0)
        assert dep[0, 0] == 0.0

    def test_light_facing_color(self):
        light = np.array([0.0, 0.0, -1.0])
        scene = sg.AnalyticScene((sg.make_sphere([0, 0, 0], 1.0, albedo=(0.6, 0.4, 0.2)),), light)
        cam = sg.default_rig(1, width=64, height=64, spacing_deg=0, elevation_deg=0)[0]
        img, dep, mask = sg.render_ground_truth(scene, cam)
        # the point facing the light exactly is the one nearest the camera
        got = img[31:33, 31:33].reshape(-1, 3).max(axis=0)
        np.testing.assert_allclose(got, np.clip(np.array([0.6, 0.4, 0.2]) + 0.1, 0, 1), atol=5e-3)

    def test_camera_inside_rejected(self):
        scene = sg.build_scene("sphere")
        cam = geo.look_at_camera([0.1, 0, 0], [1, 0, 0], [0, 1, 0], 10, 10, 1.5, 1.5, 4, 4)
        with pytest.raises(ValueError):
            sg.render_ground_truth(scene, cam)


class TestPseudoMono:
    def test_identity(self):
        gt = np.array([[2.0, 3.0], [4.0, 5.0]])
        mask = np.ones((2, 2), bool)
        out = sg.pseudo_mono_depth(gt, mask, 1.0, 0.0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, gt)

    def test_affine_example(self):
        gt = np.array([[5.0]])
        out = sg.pseudo_mono_depth(gt, np.ones((1, 1), bool), 2.0, 1.0, 0.0,
                                   np.random.default_rng(0))
        np.testing.assert_allclose(out, [[2.0]])

    def test_zero_alpha_rejected(self):
        with pytest.raises(ValueError):
            sg.pseudo_mono_depth(np.ones((2, 2)), np.ones((2, 2), bool), 0.0, 0.0,
                                 0.0, np.random.default_rng(0))

    def test_invalid_pixels_stay_zero(self):
        gt = np.full((2, 2), 7.0)
        mask = np.array([[True, False], [False, True]])
        out = sg.pseudo_mono_depth(gt, mask, 2.0, 1.0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out[~mask], 0.0)

    def test_least_squares_recovers_affine(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(2.0, 6.0, size=(32, 32))
        mask = np.ones((32, 32), bool)
        alpha, beta = 1.3, 0.2
        out = sg.pseudo_mono_depth(gt, mask, alpha, beta, 0.0, rng)
        A = np.stack([gt.ravel(), np.ones(gt.size)], axis=1)
        coef, *_ = np.linalg.lstsq(A, out.ravel(), rcond=None)
        np.testing.assert_allclose(coef, [1 / alpha, -beta / alpha], atol=1e-9)

    def test_triplet_loss_zero_on_oracle(self):
        # affine-invariance of the triplet loss, evaluated directly
        rng = np.random.default_rng(3)
        gt = rng.uniform(2.0, 6.0, size=(4, 4))
        out = sg.pseudo_mono_depth(gt, np.ones((4, 4), bool), 2.0, 1.0, 0.0, rng)
        triples = [tuple(rng.choice(16, 3, replace=False)) for _ in range(20)]
        loss = global_triplet_loss(DualArray(gt.ravel()), out.ravel(), triples)
        assert loss.item() < 1e-18


class TestBundleIO:
    def test_round_trip_bit_identical(self, tmp_path):
        bundle, _ = sg.generate_bundle(seed=5, width=32, height=32)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        sg.write_bundle(bundle, d1)
        back = sg.read_bundle(d1)
        sg.write_bundle(back, d2)
        files = sorted(os.listdir(d1))
        assert files == sorted(os.listdir(d2))
        for f in files:
            assert filecmp.cmp(d1 / f, d2 / f, shallow=False), f
        for i in range(bundle.n_views):
            assert np.array_equal(bundle.images[i], back.images[i])
            assert np.array_equal(bundle.gt_depths[i], back.gt_depths[i])
            assert np.array_equal(bundle.mono_depths[i], back.mono_depths[i])
            assert np.array_equal(bundle.gt_masks[i], back.gt_masks[i])
            assert np.array_equal(bundle.cameras[i].world_to_cam,
                                  back.cameras[i].world_to_cam)
        assert np.array_equal(bundle.bbox.lo, back.bbox.lo)

    def test_file_inventory(self, tmp_path):
        bundle, _ = sg.generate_bundle(seed=0, width=16, height=16)
        sg.write_bundle(bundle, tmp_path / "s")
        names = sorted(os.listdir(tmp_path / "s"))
        expected = ["bbox.txt", "cameras.txt"]
        for i in range(3):
            expected += [f"depth_{i}.pfm", f"mask_{i}.pgm", f"mono_{i}.pfm", f"view_{i}.ppm"]
        assert names == sorted(expected)

    def test_missing_cameras_named(self, tmp_path):
        with pytest.raises(FileNotFoundError) as exc:
            sg.read_bundle(tmp_path)
        assert "cameras.txt" in str(exc.value)

    def test_wrong_depth_dims_names_view(self, tmp_path):
        bundle, _ = sg.generate_bundle(seed=0, width=16, height=16)
        sg.write_bundle(bundle, tmp_path / "s")
        imgio.write_pfm(tmp_path / "s" / "depth_1.pfm", np.zeros((8, 8)))
        with pytest.raises(ValueError) as exc:
            sg.read_bundle(tmp_path / "s")
        assert "depth_1" in str(exc.value)

    def test_seeded_bundles_identical(self, tmp_path):
        b1, _ = sg.generate_bundle(seed=9, width=16, height=16)
        b2, _ = sg.generate_bundle(seed=9, width=16, height=16)
        for i in range(3):
            assert np.array_equal(b1.mono_depths[i], b2.mono_depths[i])
            assert np.array_equal(b1.images[i], b2.images[i])


class TestImageFormats:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((5, 7, 3))
        img = np.rint(img * 255) / 255
        imgio.write_ppm(tmp_path / "x.ppm", img)
        back = imgio.read_ppm(tmp_path / "x.ppm")
        np.testing.assert_allclose(back, img, atol=1e-12)

    def test_pfm_round_trip(self, tmp_path):
        dep = np.random.default_rng(1).random((6, 4)).astype(np.float32).astype(np.float64)
        imgio.write_pfm(tmp_path / "x.pfm", dep)
        back = imgio.read_pfm(tmp_path / "x.pfm")
        assert np.array_equal(back, dep)

    def test_pgm_round_trip(self, tmp_path):
        mask = np.random.default_rng(2).random((5, 5)) > 0.5
        imgio.write_pgm(tmp_path / "x.pgm", mask)
        assert np.array_equal(imgio.read_pgm(tmp_path / "x.pgm"), mask)

    def test_pfm_endianness_marker(self, tmp_path):
        imgio.write_pfm(tmp_path / "x.pfm", np.ones((2, 2)))
        head = (tmp_path / "x.pfm").read_bytes()[:20]
        assert head.startswith(b"Pf\n2 2\n-1.0\n")
