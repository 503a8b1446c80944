"""Optimization loop: Adam over the parameter store, patch-based ray
batching, the five-term objective, checkpointing, and metric logging.

Per-iteration randomness is drawn from a stateless schedule keyed by
(seed, iteration), so identical (seed, config, bundle) runs are bit
reproducible and training can resume from a checkpoint mid-stream.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from . import losses, renderer
from .diffcore import DualArray
from .model import ModelConfig, SurfaceModel

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "L_color", "L_eik", "L_sparse", "L_global", "L_local", "total")


class DivergenceError(RuntimeError):
    """Total loss went non-finite; carries the last good parameter state."""

    def __init__(self, iteration, last_good):
        self.iteration = iteration
        self.last_good = last_good
        super().__init__(f"training diverged at iteration {iteration}")


@dataclass
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-4
    rays_per_batch: int = 256
    patch_size: int = 5
    n_coarse: int = 16
    n_fine: int = 16
    lambda_eikonal: float = 0.1
    lambda_sparse: float = 0.02
    lambda_global: float = 0.05
    lambda_local: float = 0.05
    tau: float = 16.0
    seed: int = 0
    checkpoint_every: int = 1000
    channels: int = 16
    heads: int = 4
    emb_freqs: int = 4
    volume_res: int = 32
    init_sharpness: float = 0.3
    eikonal_points: int = 32
    eikonal_delta: float = 1e-3
    triples_per_patch: int = 8
    free_space_points: int = 128
    patches_per_iteration: int = 5
    stratified: bool = True

    def __post_init__(self):
        for name in ("rays_per_batch", "patch_size", "n_coarse", "n_fine",
                     "channels", "volume_res", "checkpoint_every",
                     "patches_per_iteration"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")
        if self.patches_per_iteration * self.patch_size ** 2 > self.rays_per_batch:
            raise ValueError(
                "patches_per_iteration * patch_size^2 exceeds rays_per_batch"
            )

    def loss_weights(self):
        return losses.LossWeights(
            self.lambda_eikonal, self.lambda_sparse,
            self.lambda_global, self.lambda_local, self.tau,
        )

    def model_config(self):
        return ModelConfig(
            channels=self.channels, heads=self.heads, emb_freqs=self.emb_freqs,
            volume_res=self.volume_res, init_sharpness=self.init_sharpness,
        )

    def render_config(self):
        return renderer.RenderConfig(self.n_coarse, self.n_fine, self.stratified)

    def to_file(self, path):
        with open(path, "w") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    @classmethod
    def from_file(cls, path, overrides=None):
        values = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, raw = (s.strip() for s in text.split("=", 1))
                values[key] = raw
        if overrides:
            values.update({k: str(v) for k, v in overrides.items()})
        return cls.from_strings(values, source=path)

    @classmethod
    def from_strings(cls, values, source="<config>"):
        typed = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in by_name:
                raise ValueError(f"{source}: unknown config key '{key}'")
            ftype = by_name[key].type
            if ftype == "bool" or ftype is bool:
                typed[key] = str(raw).lower() in ("1", "true", "yes", "on")
            elif ftype == "int" or ftype is int:
                typed[key] = int(raw)
            else:
                typed[key] = float(raw)
        return cls(**typed)


class AdamState:
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, store):
        self.m = {name: np.zeros_like(p.values) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in store.items()}
        self.step = 0


def adam_step(store, grads, state, lr):
    """Bias-corrected Adam update applied in-place to the store.

    ``grads`` is either a GradientMap or a plain name -> ndarray dict."""
    state.step += 1
    t = state.step
    for name, p in store.items():
        g = grads[name] if isinstance(grads, dict) else grads.get(p).values
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient for parameter '{name}'")
        state.m[name] = AdamState.beta1 * state.m[name] + (1 - AdamState.beta1) * g
        state.v[name] = AdamState.beta2 * state.v[name] + (1 - AdamState.beta2) * g * g
        m_hat = state.m[name] / (1 - AdamState.beta1 ** t)
        v_hat = state.v[name] / (1 - AdamState.beta2 ** t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + AdamState.eps)


def sample_patch(bundle, rng, patch_size, view=None, min_foreground=0.6, retries=100):
    """A contiguous patch on one view with enough foreground coverage.

    Returns (view index, pixel coords [p^2, 2] row-major, gt colors [p^2, 3],
    mono depths [p^2], gt mask [p^2]).
    """
    w, h = bundle.image_size
    if patch_size > min(w, h):
        raise ValueError(f"patch_size {patch_size} exceeds image size {w}x{h}")
    for _ in range(retries):
        vi = int(rng.integers(bundle.n_views)) if view is None else view
        x0 = int(rng.integers(0, w - patch_size + 1))
        y0 = int(rng.integers(0, h - patch_size + 1))
        sub = bundle.gt_masks[vi][y0:y0 + patch_size, x0:x0 + patch_size]
        if sub.mean() >= min_foreground:
            ys, xs = np.mgrid[y0:y0 + patch_size, x0:x0 + patch_size]
            pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
            colors = bundle.images[vi][ys.ravel(), xs.ravel()]
            mono = bundle.mono_depths[vi][ys.ravel(), xs.ravel()]
            mask = bundle.gt_masks[vi][ys.ravel(), xs.ravel()]
            return vi, pixels, colors, mono, mask
    raise RuntimeError(
        f"sample_patch: no patch with >= {min_foreground:.0%} foreground after {retries} draws"
    )


def iteration_rng(seed, iteration, stream=7):
    return np.random.default_rng(np.random.SeedSequence((seed, stream, iteration)))


def checkpoint_state(model, adam, iteration):
    """Flat name -> array dict storing parameters, optimizer moments,
    counters, and the model hyperparameters needed to rebuild it."""
    out = dict(model.store.state_dict())
    for name in model.store.names():
        out[f"opt.m.{name}"] = adam.m[name].copy()
        out[f"opt.v.{name}"] = adam.v[name].copy()
    out["opt.step"] = np.array(float(adam.step))
    out["train.iteration"] = np.array(float(iteration))
    cfg = model.config
    for key in ("channels", "heads", "emb_freqs", "volume_res"):
        out[f"model.{key}"] = np.array(float(getattr(cfg, key)))
    return out


def restore_state(model, adam, state):
    params = {
        k: v for k, v in state.items()
        if not k.startswith(("opt.", "train.", "model."))
    }
    model.store.load_values(params, strict=True)
    for name in model.store.names():
        adam.m[name] = state[f"opt.m.{name}"].reshape(adam.m[name].shape).copy()
        adam.v[name] = state[f"opt.v.{name}"].reshape(adam.v[name].shape).copy()
    adam.step = int(state["opt.step"])
    return int(state["train.iteration"])


class TrainResult:
    def __init__(self, model, adam, metrics, checkpoint):
        self.model = model
        self.adam = adam
        self.metrics = metrics        # list of METRIC_COLUMNS rows
        self.checkpoint = checkpoint  # final checkpoint_state dict


def train(bundle, config, out_dir=None, resume=None, on_iteration=None):
    """Run the per-iteration pipeline; returns model, metrics, checkpoint.

    ``resume`` may be a checkpoint_state dict (from a prior run); training
    continues at the stored iteration with identical trajectory to an
    uninterrupted run of the same seed.
    """
    if bundle.n_views < 2:
        raise ValueError("training needs at least 2 views (target + sources)")
    model = SurfaceModel(config.model_config(), seed=config.seed)
    adam = AdamState(model.store)
    start = 0
    if resume is not None:
        start = restore_state(model, adam, resume)
    weights = config.loss_weights()
    rcfg = config.render_config()
    metrics = []
    writer = _MetricsWriter(out_dir)

    last_good = checkpoint_state(model, adam, start)
    for it in range(start, config.iterations):
        rng = iteration_rng(config.seed, it)
        target = it % bundle.n_views
        parts = _run_iteration(bundle, model, config, rcfg, weights, rng, target)
        if not np.isfinite(parts["total"]):
            writer.close()
            raise DivergenceError(it, last_good)
        adam_step(model.store, parts["grads"], adam, config.learning_rate)
        row = [it] + [parts[k] for k in METRIC_COLUMNS[1:]]
        metrics.append(row)
        writer.write(row)
        last_good = checkpoint_state(model, adam, it + 1)
        if out_dir and (it + 1) % config.checkpoint_every == 0:
            dc.save_checkpoint(
                os.path.join(out_dir, f"checkpoint_{it + 1:06d}.ckpt"), last_good
            )
        if on_iteration:
            on_iteration(it, row)

    final = checkpoint_state(model, adam, config.iterations)
    if out_dir:
        dc.save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), final)
    writer.close()
    return TrainResult(model, adam, metrics, final)


class _MetricsWriter:
    def __init__(self, out_dir):
        self._fh = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
            self._csv = csv.writer(self._fh)
            self._csv.writerow(METRIC_COLUMNS)

    def write(self, row):
        if self._fh:
            self._csv.writerow([row[0]] + [f"{x:.10g}" for x in row[1:]])

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _run_iteration(bundle, model, config, rcfg, weights, rng, target):
    """One forward/backward pass over one sampled patch."""
    src_ids = [i for i in range(bundle.n_views) if i != target]
    if len(src_ids) < 2:
        src_ids = list(range(bundle.n_views))  # 2-view bundle: reuse target as source
    target_cam = bundle.cameras[target]
    ps = config.patch_size

    with dc.Tape():
        prepared = model.prepare(
            [bundle.cameras[i] for i in src_ids],
            [bundle.images[i] for i in src_ids],
            bundle.bbox,
        )
        n_patches = config.patches_per_iteration
        patches = [sample_patch(bundle, rng, ps, view=target) for _ in range(n_patches)]
        pixels = np.concatenate([p[1] for p in patches])
        gt_colors = np.concatenate([p[2] for p in patches])
        mono = np.concatenate([p[3] for p in patches])
        gt_mask = np.concatenate([p[4] for p in patches])

        rays = renderer.rays_for_pixels(target_cam, pixels, bundle.bbox)
        live = [i for i, r in enumerate(rays) if r is not None]
        out = renderer.render_rays(
            renderer.make_model_field(model, prepared, target_cam),
            [rays[i] for i in live], rcfg, rng,
        )

        k = len(pixels)
        color, depth_t, acc = _scatter_outputs(out, live, k)
        cosf = _ray_cos_factors(rays, target_cam)
        depth_z = dc.mul(depth_t, DualArray(cosf))

        l_color = losses.color_loss(color, gt_colors, gt_mask)
        point_field = model.point_sdf(prepared)
        # free-space samples extend the sparse/eikonal point sets beyond the
        # patch rays so unobserved pockets of the box get carved too
        free = _uniform_box_points(bundle.bbox, config.free_space_points, rng)
        if config.free_space_points > 0:
            sdf_all = dc.concat([dc.reshape(out.sdf, (-1,)), point_field(free)], axis=0)
        else:
            sdf_all = dc.reshape(out.sdf, (-1,))
        l_sparse = losses.sparse_loss(sdf_all, weights.tau)
        eik_pts = _eikonal_points(out.positions, config.eikonal_points, rng)
        if config.free_space_points > 0:
            eik_pts = np.concatenate([eik_pts, free[: max(config.eikonal_points // 2, 1)]])
        l_eik = losses.eikonal_loss(point_field, eik_pts, config.eikonal_delta)
        depth_ok = gt_mask & (acc.values > renderer.ACC_GATE)
        triples = _patch_triples(depth_ok, n_patches, ps * ps, config.triples_per_patch, rng)
        l_global = losses.global_triplet_loss(depth_z, mono, triples)
        l_local = _local_loss_over_patches(depth_z, mono, depth_ok, n_patches, ps)
        total = losses.total_loss(l_color, l_eik, l_sparse, l_global, l_local, weights)
        gmap = dc.backward(total)
        # materialize per-parameter gradients so the tape (and every forward
        # buffer its closures hold) can be freed before the next iteration
        grads = {name: gmap.get(p).values for name, p in model.store.items()}

    return {
        "L_color": l_color.item(), "L_eik": l_eik.item(), "L_sparse": l_sparse.item(),
        "L_global": l_global.item(), "L_local": l_local.item(),
        "total": total.item(), "grads": grads,
    }


def _scatter_outputs(out, live, k):
    """Spread rendered values of bbox-hitting rays back to patch order;
    missing rays read as fully transparent."""
    cmap = np.zeros((k, 3))
    dmap = np.zeros(k)
    amap = np.zeros(k)
    live = np.asarray(live, dtype=np.int64)
    if live.size == 0:
        return DualArray(cmap), DualArray(dmap), DualArray(amap)
    scatter = dc.make_sparse_gather(live, np.arange(live.size), np.ones(live.size), live.size, n_rows=k)
    color = dc.sparse_matmul(scatter, out.color)
    depth = dc.sparse_matmul(scatter, dc.reshape(out.depth, (-1, 1)))
    acc = dc.sparse_matmul(scatter, dc.reshape(out.acc, (-1, 1)))
    return color, dc.reshape(depth, (k,)), dc.reshape(acc, (k,))


def _ray_cos_factors(rays, cam):
    fwd = cam.forward_axis()
    return np.array([r.direction @ fwd if r is not None else 1.0 for r in rays])


def _uniform_box_points(bbox, count, rng):
    return bbox.lo + rng.random((count, 3)) * bbox.extent


def _eikonal_points(positions, count, rng):
    flat = positions.reshape(-1, 3)
    take = min(count, flat.shape[0])
    idx = rng.choice(flat.shape[0], size=take, replace=False)
    return flat[idx]


def _patch_triples(depth_ok, n_patches, patch_len, per_patch, rng):
    triples = []
    for p in range(n_patches):
        base = p * patch_len
        valid = np.flatnonzero(depth_ok[base:base + patch_len]) + base
        if valid.size < 3:
            continue
        for _ in range(per_patch):
            triples.append(tuple(rng.choice(valid, size=3, replace=False)))
    return triples


def _local_loss_over_patches(depth_z, mono, depth_ok, n_patches, ps):
    terms = []
    for p in range(n_patches):
        sl = slice(p * ps * ps, (p + 1) * ps * ps)
        m = depth_ok[sl].reshape(ps, ps)
        if not (m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1]).any():
            continue
        terms.append(
            losses.local_gradient_loss(
                dc.reshape(depth_z[sl], (ps, ps)), mono[sl].reshape(ps, ps), m
            )
        )
    if not terms:
        logger.warning("no patch had valid interior pixels for the local loss")
        return DualArray(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return dc.div(out, float(len(terms)))


def group_grad_norms(model, grads):
    """L2 gradient norm per parameter group (dead-branch diagnostic)."""
    norms = {}
    for group, names in model.param_groups().items():
        total = 0.0
        for name in names:
            g = grads[name] if isinstance(grads, dict) else grads.get(model.store[name]).values
            total += float(np.sum(g ** 2))
        norms[group] = np.sqrt(total)
    return norms
