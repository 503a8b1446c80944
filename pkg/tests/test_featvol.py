import numpy as np
import pytest

from epirecon import diffcore as dc
from epirecon import featvol as fv
from epirecon import geometry as geo
from epirecon import scenegen as sg
from epirecon.diffcore import DualArray


def rig(n=3, size=16):
    return sg.default_rig(n, width=size, height=size)


def const_maps(cams, value, c=4, size=16):
    return [
        (cam, fv.FeatureMap2D(DualArray(np.full((size, size, c), value))))
        for cam in cams
    ]


BBOX = geo.BoundingBox([-1.5] * 3, [1.5] * 3)


class TestFeatureEncoder:
    def test_output_shape(self):
        store = dc.ParamStore()
        enc = fv.FeatureEncoder(store, np.random.default_rng(0), channels=16)
        fmap = enc.apply(DualArray(np.random.default_rng(1).random((64, 64, 3))))
        assert fmap.values.values.shape == (16, 16, 16)

    def test_zero_image_zero_features(self):
        store = dc.ParamStore()
        enc = fv.FeatureEncoder(store, np.random.default_rng(0), channels=8)
        fmap = enc.apply(DualArray(np.zeros((16, 16, 3))))
        np.testing.assert_array_equal(fmap.values.values, 0.0)

    def test_small_image_rejected(self):
        store = dc.ParamStore()
        enc = fv.FeatureEncoder(store, np.random.default_rng(0), channels=8)
        with pytest.raises(ValueError):
            enc.apply(DualArray(np.zeros((4, 4, 3))))

    def test_gradients_vs_finite_differences(self):
        img = np.random.default_rng(2).random((8, 8, 3))
        probe = np.random.default_rng(3).normal(size=(2, 2, 4))

        def f(w):
            store = dc.ParamStore()
            enc = fv.FeatureEncoder(store, np.random.default_rng(0), channels=4)
            enc.w1 = dc.reshape(w, enc.w1.values.shape)
            out = enc.apply(DualArray(img))
            return dc.sum_(dc.mul(out.values, DualArray(probe)))

        store = dc.ParamStore()
        ref = fv.FeatureEncoder(store, np.random.default_rng(0), channels=4)
        assert dc.grad_check(f, DualArray(ref.w1.values.copy()), step=1e-5) < 1e-5


class TestCostVolume:
    def test_constant_sources(self):
        cams = rig()
        vol = fv.build_cost_volume(BBOX, 8, const_maps(cams, 2.5))
        vals = vol.values.values
        assert vol.valid.any()
        np.testing.assert_allclose(vals[..., :4][vol.valid], 0.0, atol=1e-12)
        np.testing.assert_allclose(vals[..., 4:][vol.valid], 2.5)
        np.testing.assert_array_equal(vals[~vol.valid], 0.0)

    def test_two_source_variance(self):
        cams = rig(2)
        sources = [
            (cams[0], fv.FeatureMap2D(DualArray(np.full((16, 16, 1), 1.0)))),
            (cams[1], fv.FeatureMap2D(DualArray(np.full((16, 16, 1), 3.0)))),
        ]
        vol = fv.build_cost_volume(BBOX, 6, sources)
        np.testing.assert_allclose(vol.values.values[..., 0][vol.valid], 1.0)
        np.testing.assert_allclose(vol.values.values[..., 1][vol.valid], 2.0)

    def test_needs_two_sources(self):
        cams = rig(1)
        with pytest.raises(ValueError):
            fv.build_cost_volume(BBOX, 4, const_maps(cams, 1.0))

    def test_permutation_invariance(self):
        cams = rig(3)
        rng = np.random.default_rng(4)
        maps = [fv.FeatureMap2D(DualArray(rng.random((16, 16, 4)))) for _ in cams]
        v1 = fv.build_cost_volume(BBOX, 8, list(zip(cams, maps)))
        order = [2, 0, 1]
        v2 = fv.build_cost_volume(BBOX, 8, [(cams[i], maps[i]) for i in order])
        assert np.abs(v1.values.values - v2.values.values).max() < 1e-12
        assert np.array_equal(v1.valid, v2.valid)

    def test_variance_nonnegative(self):
        cams = rig(3)
        rng = np.random.default_rng(5)
        maps = [fv.FeatureMap2D(DualArray(rng.random((16, 16, 4)))) for _ in cams]
        vol = fv.build_cost_volume(BBOX, 8, list(zip(cams, maps)))
        assert np.all(vol.values.values[..., :4] >= 0.0)

    def test_cells_outside_frustum_masked(self):
        # push the box partly behind the cameras
        box = geo.BoundingBox([-1.5, -1.5, -6.0], [1.5, 1.5, 1.5])
        cams = rig(2)
        vol = fv.build_cost_volume(box, 8, const_maps(cams, 1.0))
        assert (~vol.valid).any()
        np.testing.assert_array_equal(vol.values.values[~vol.valid], 0.0)


class TestRegularizer:
    def _volume(self, r=5, c=3, seed=6):
        vals = np.random.default_rng(seed).random((r, r, r, 2 * c))
        valid = np.ones((r, r, r), bool)
        valid[0, 0, 0] = False
        vals[0, 0, 0] = 0.0
        return fv.FeatureVolume(BBOX, r, DualArray(vals), valid)

    def test_zero_weights_zero_output(self):
        store = dc.ParamStore()
        psi = fv.VolumeRegularizer(store, np.random.default_rng(0), channels=3)
        psi.w1.values[:] = 0.0
        psi.w2.values[:] = 0.0
        out = psi.apply(self._volume())
        np.testing.assert_array_equal(out.values.values, 0.0)

    def test_identity_kernel_passes_variance_channels(self):
        store = dc.ParamStore()
        c = 3
        psi = fv.VolumeRegularizer(store, np.random.default_rng(0), channels=c)
        w1 = np.zeros((27 * 2 * c, c))
        w2 = np.zeros((27 * c, c))
        center = 13
        for i in range(c):
            w1[center * 2 * c + i, i] = 1.0
            w2[center * c + i, i] = 1.0
        psi.w1.values = w1
        psi.w2.values = w2
        vol = self._volume()
        out = psi.apply(vol)
        expect = vol.values.values[..., :c] * vol.valid[..., None]
        np.testing.assert_allclose(out.values.values, expect, atol=1e-14)
        assert np.array_equal(out.valid, vol.valid)

    def test_channel_mismatch_rejected(self):
        store = dc.ParamStore()
        psi = fv.VolumeRegularizer(store, np.random.default_rng(0), channels=4)
        with pytest.raises(ValueError):
            psi.apply(self._volume(c=3))

    def test_gradients(self):
        vol = self._volume(r=4)
        probe = np.random.default_rng(7).normal(size=(4, 4, 4, 3))

        def f(w):
            store = dc.ParamStore()
            psi = fv.VolumeRegularizer(store, np.random.default_rng(0), channels=3)
            psi.w1 = dc.reshape(w, psi.w1.values.shape)
            out = psi.apply(vol)
            return dc.sum_(dc.mul(out.values, DualArray(probe)))

        store = dc.ParamStore()
        ref = fv.VolumeRegularizer(store, np.random.default_rng(0), channels=3)
        assert dc.grad_check(f, DualArray(ref.w1.values.copy()), step=1e-5,
                             max_coords=60) < 1e-5


class TestTrilinear:
    def _volume(self, r=4, c=2, seed=8, holes=()):
        vals = np.random.default_rng(seed).random((r, r, r, c))
        valid = np.ones((r, r, r), bool)
        for h in holes:
            valid[h] = False
            vals[h] = 0.0
        return fv.FeatureVolume(BBOX, r, DualArray(vals), valid)

    def test_node_exact(self):
        vol = self._volume()
        nodes = vol.node_positions()
        feat, ok = fv.trilinear_sample(vol, nodes[13])
        assert ok
        np.testing.assert_allclose(feat.values, vol.values.values.reshape(-1, 2)[13])

    def test_edge_midpoint_average(self):
        vol = self._volume()
        nodes = vol.node_positions()
        mid = 0.5 * (nodes[0] + nodes[1])
        feat, ok = fv.trilinear_sample(vol, mid)
        flat = vol.values.values.reshape(-1, 2)
        np.testing.assert_allclose(feat.values, 0.5 * (flat[0] + flat[1]))

    def test_constant_volume(self):
        r = 4
        vol = fv.FeatureVolume(BBOX, r, DualArray(np.full((r, r, r, 3), 1.7)),
                               np.ones((r, r, r), bool))
        rng = np.random.default_rng(9)
        pts = rng.uniform(-1.4, 1.4, size=(20, 3))
        feats, ok = fv.trilinear_sample_many(vol, pts)
        assert ok.all()
        np.testing.assert_allclose(feats.values, 1.7)

    def test_outside_invalid(self):
        vol = self._volume()
        feat, ok = fv.trilinear_sample(vol, [5.0, 0.0, 0.0])
        assert not ok
        np.testing.assert_array_equal(feat.values, 0.0)

    def test_renormalized_weights_skip_invalid(self):
        vol = self._volume(holes=[(0, 0, 0)])
        nodes = vol.node_positions()
        mid = 0.5 * (nodes[0] + nodes[1])  # corners: node 0 (invalid), node 1
        feat, ok = fv.trilinear_sample(vol, mid)
        assert ok
        np.testing.assert_allclose(feat.values, vol.values.values.reshape(-1, 2)[1])

    def test_all_invalid_corners(self):
        holes = [(i, j, k) for i in range(2) for j in range(2) for k in range(2)]
        vol = self._volume(holes=holes)
        nodes = vol.node_positions()
        center = nodes[0] + 0.4 * (nodes[1 + 4 + 16] - nodes[0])
        feat, ok = fv.trilinear_sample(vol, center)
        assert not ok
        np.testing.assert_array_equal(feat.values, 0.0)

    def test_dual_path_matches_fast_path(self):
        vol = self._volume(holes=[(1, 1, 1)])
        pts = np.random.default_rng(10).uniform(-1.4, 1.4, size=(10, 3))
        fast, ok_fast = fv.trilinear_sample_many(vol, pts)
        with dc.Tape():
            pd = DualArray(pts, requires_grad=True)
            dual, ok_dual = fv.trilinear_sample_dual(vol, pd)
        assert np.array_equal(ok_fast, ok_dual)
        np.testing.assert_allclose(fast.values, dual.values, atol=1e-12)


class TestEndToEndDifferentiability:
    def test_trilinear_of_regularized_cost_volume_wrt_encoder(self):
        # d(trilinear o regularize o build) / d(encoder params) via the oracle
        cams = rig(2, size=8)
        imgs = [np.random.default_rng(20 + i).random((8, 8, 3)) for i in range(2)]
        pts = np.random.default_rng(22).uniform(-0.8, 0.8, size=(5, 3))
        probe = np.random.default_rng(23).normal(size=(5, 4))

        def f(w):
            store = dc.ParamStore()
            enc = fv.FeatureEncoder(store, np.random.default_rng(0), channels=4)
            psi = fv.VolumeRegularizer(store, np.random.default_rng(1), channels=4)
            enc.w1 = dc.reshape(w, enc.w1.values.shape)
            sources = [(cam, enc.apply(DualArray(img))) for cam, img in zip(cams, imgs)]
            cost = fv.build_cost_volume(BBOX, 4, sources)
            vol = psi.apply(cost)
            feats, _ = fv.trilinear_sample_many(vol, pts)
            return dc.sum_(dc.mul(feats, DualArray(probe)))

        store = dc.ParamStore()
        ref = fv.FeatureEncoder(store, np.random.default_rng(0), channels=4)
        err = dc.grad_check(f, DualArray(ref.w1.values.copy()), step=1e-5, max_coords=40)
        assert err < 1e-4
