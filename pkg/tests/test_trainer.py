import numpy as np
import pytest

from epirecon import diffcore as dc
from epirecon import scenegen as sg
from epirecon import trainer as tr
from epirecon.diffcore import ParamStore


@pytest.fixture(scope="module")
def small_bundle():
    bundle, _ = sg.generate_bundle(seed=1, width=24, height=24)
    return bundle


def small_config(**kw):
    base = dict(
        iterations=2, seed=3, rays_per_batch=32, patch_size=3, n_coarse=4,
        n_fine=4, channels=8, heads=2, emb_freqs=1, volume_res=6,
        eikonal_points=4, free_space_points=8, patches_per_iteration=2,
        checkpoint_every=1000,
    )
    base.update(kw)
    return tr.TrainConfig(**base)


class TestAdam:
    def _store(self):
        store = ParamStore()
        store.add("w", np.zeros(4))
        return store

    def test_first_step_magnitude(self):
        store = self._store()
        state = tr.AdamState(store)
        g = {"w": np.full(4, 0.37)}
        tr.adam_step(store, g, state, lr=1e-2)
        # bias-corrected first step is ~lr * sign(g)
        np.testing.assert_allclose(store["w"].values, -1e-2, rtol=1e-6)

    def test_zero_gradient_no_motion(self):
        store = self._store()
        state = tr.AdamState(store)
        for _ in range(5):
            tr.adam_step(store, {"w": np.zeros(4)}, state, lr=1e-2)
        np.testing.assert_array_equal(store["w"].values, 0.0)

    def test_nan_gradient_names_parameter(self):
        store = self._store()
        state = tr.AdamState(store)
        with pytest.raises(ValueError) as exc:
            tr.adam_step(store, {"w": np.full(4, np.nan)}, state, lr=1e-2)
        assert "'w'" in str(exc.value)

    def test_deterministic(self):
        def run():
            store = self._store()
            state = tr.AdamState(store)
            rng = np.random.default_rng(0)
            for _ in range(10):
                tr.adam_step(store, {"w": rng.normal(size=4)}, state, lr=1e-3)
            return store["w"].values

        assert np.array_equal(run(), run())


class TestSamplePatch:
    def test_contiguous_grid(self, small_bundle):
        rng = np.random.default_rng(0)
        vi, pixels, colors, mono, mask = tr.sample_patch(small_bundle, rng, 5)
        assert pixels.shape == (25, 2)
        xs = pixels[:, 0].reshape(5, 5)
        ys = pixels[:, 1].reshape(5, 5)
        assert np.all(np.diff(xs, axis=1) == 1)
        assert np.all(np.diff(ys, axis=0) == 1)

    def test_foreground_fraction(self, small_bundle):
        rng = np.random.default_rng(1)
        for _ in range(20):
            _, _, _, _, mask = tr.sample_patch(small_bundle, rng, 5)
            assert mask.mean() >= 0.6

    def test_colors_in_range(self, small_bundle):
        rng = np.random.default_rng(2)
        _, _, colors, _, _ = tr.sample_patch(small_bundle, rng, 3)
        assert np.all(colors >= 0.0) and np.all(colors <= 1.0)

    def test_seeded_determinism(self, small_bundle):
        a = tr.sample_patch(small_bundle, np.random.default_rng(5), 5)
        b = tr.sample_patch(small_bundle, np.random.default_rng(5), 5)
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])

    def test_unsatisfiable_rejected(self, small_bundle):
        # demand full-foreground patches on a mostly background image
        with pytest.raises(RuntimeError):
            tr.sample_patch(small_bundle, np.random.default_rng(0), 5,
                            min_foreground=1.01)


class TestConfig:
    def test_patch_size_must_be_odd(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(patch_size=4)

    def test_file_round_trip(self, tmp_path):
        cfg = small_config(learning_rate=3e-4, tau=8.0)
        path = tmp_path / "config.txt"
        cfg.to_file(path)
        back = tr.TrainConfig.from_file(path)
        assert back == cfg

    def test_overrides(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "config.txt"
        cfg.to_file(path)
        back = tr.TrainConfig.from_file(path, {"iterations": 7, "tau": "2.5"})
        assert back.iterations == 7 and back.tau == 2.5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "config.txt"
        path.write_text("bogus_key = 3\n")
        with pytest.raises(ValueError):
            tr.TrainConfig.from_file(path)


class TestTraining:
    def test_zero_iterations_checkpoint_is_init(self, small_bundle, tmp_path):
        cfg = small_config(iterations=0)
        res = tr.train(small_bundle, cfg, out_dir=tmp_path)
        from epirecon.model import SurfaceModel

        fresh = SurfaceModel(cfg.model_config(), seed=cfg.seed)
        for name, values in fresh.store.state_dict().items():
            assert np.array_equal(res.checkpoint[name], values), name
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 1  # header only

    def test_metrics_rows(self, small_bundle, tmp_path):
        cfg = small_config(iterations=3)
        tr.train(small_bundle, cfg, out_dir=tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().strip().split("\n")
        assert lines[0].192 if False else lines[0] == ",".join(tr.METRIC_COLUMNS)
        assert len(lines) == 4

    def test_bit_identical_reruns(self, small_bundle):
        cfg = small_config(iterations=3)
        a = tr.train(small_bundle, cfg)
        b = tr.train(small_bundle, cfg)
        assert list(a.checkpoint) == list(b.checkpoint)
        for k in a.checkpoint:
            assert np.array_equal(a.checkpoint[k], b.checkpoint[k]), k
        assert a.metrics == b.metrics

    def test_resume_matches_uninterrupted(self, small_bundle):
        cfg = small_config(iterations=4)
        full = tr.train(small_bundle, cfg)
        first = tr.train(small_bundle, small_config(iterations=2))
        resumed = tr.train(small_bundle, cfg, resume=first.checkpoint)
        for k in full.checkpoint:
            assert np.array_equal(full.checkpoint[k], resumed.checkpoint[k]), k

    def test_gradient_reaches_every_group(self, small_bundle):
        cfg = small_config(iterations=1)
        from epirecon.model import SurfaceModel

        model = SurfaceModel(cfg.model_config(), seed=cfg.seed)
        rng = tr.iteration_rng(cfg.seed, 0)
        parts = tr._run_iteration(
            small_bundle, model, cfg, cfg.render_config(), cfg.loss_weights(), rng, 0
        )
        norms = tr.group_grad_norms(model, parts["grads"])
        for group, norm in norms.items():
            assert norm > 0.0, f"dead parameter group: {group}"

    def test_needs_two_views(self, small_bundle):
        solo = sg.SceneBundle(
            small_bundle.cameras[:1], small_bundle.images[:1],
            small_bundle.gt_depths[:1], small_bundle.gt_masks[:1],
            small_bundle.mono_depths[:1], small_bundle.bbox,
        )
        with pytest.raises(ValueError):
            tr.train(solo, small_config())

    def test_checkpoint_files_written(self, small_bundle, tmp_path):
        cfg = small_config(iterations=2, checkpoint_every=1)
        tr.train(small_bundle, cfg, out_dir=tmp_path)
        assert (tmp_path / "checkpoint_000001.ckpt").exists()
        assert (tmp_path / "checkpoint_000002.ckpt").exists()
        assert (tmp_path / "checkpoint.ckpt").exists()
        state = dc.load_checkpoint(tmp_path / "checkpoint.ckpt")
        assert state["train.iteration"] == 2.0
