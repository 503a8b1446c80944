"""Command-line surface: scene generation, training, rendering, mesh
extraction, evaluation, and the gradient verification suites.

Exit codes: 0 ok, 1 verification failure, 2 usage, 3 I/O error,
4 training divergence, 5 checkpoint/config mismatch.
"""

import argparse
import os
import sys

import numpy as np

from . import diffcore as dc
from . import meshing, renderer, scenegen, trainer, verify
from .diffcore import CheckpointError, CheckpointMismatch
from .model import ModelConfig, SurfaceModel

EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5

MODEL_KEYS = ("channels", "heads", "emb_freqs", "volume_res")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CheckpointMismatch,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except trainer.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, CheckpointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def build_parser():
    parser = argparse.ArgumentParser(
        prog="epirecon",
        description="Sparse-view neural surface reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic multi-view bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default="sphere", choices=["sphere", "box", "union"])
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--res", default="64x64", help="image size WxH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mono-alpha", type=float, default=1.3)
    p.add_argument("--mono-beta", type=float, default=0.2)
    p.add_argument("--mono-sigma", type=float, default=None,
                   help="noise std of the pseudo-mono oracle (default 0.01 * scale)")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="optimize the model on a scene bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render bundle views from a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", default=None, help="comma-separated view ids")
    p.add_argument("--samples", type=int, default=None,
                   help="coarse=fine sample count override")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract-mesh", help="marching cubes over the learned field")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("eval-depth", help="depth metrics against bundle ground truth")
    p.add_argument("--scene", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--pred", help="directory of depth_{i}.pfm predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", default="0.01,0.02,0.04")
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-chamfer", help="Chamfer distance for a mesh")
    p.add_argument("--scene", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--mesh", help="OBJ mesh instead of extraction")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--gt-mesh", default=None,
                   help="sample this OBJ as ground truth instead of bundle depths")
    p.set_defaults(func=cmd_eval_chamfer)

    p = sub.add_parser("grad-check", help="finite-difference verification suites")
    p.add_argument("--module", default="all",
                   choices=["all", "diffcore", "epiattn", "renderer", "losses"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def cmd_gen_scene(args):
    try:
        width, height = (int(x) for x in args.res.lower().split("x"))
    except ValueError:
        print(f"error: bad --res '{args.res}', expected WxH", file=sys.stderr)
        return EXIT_USAGE
    if args.views < 2:
        print("error: need at least 2 views (cost volume requires >= 2 sources)",
              file=sys.stderr)
        return EXIT_USAGE
    bundle, scene = scenegen.generate_bundle(
        shape=args.shape, n_views=args.views, width=width, height=height,
        seed=args.seed, mono_alpha=args.mono_alpha, mono_beta=args.mono_beta,
        mono_sigma=args.mono_sigma,
    )
    scenegen.write_bundle(bundle, args.out)
    n_files = len(os.listdir(args.out))
    fg = np.mean([m.mean() for m in bundle.gt_masks])
    print(f"wrote {args.shape} bundle: {args.views} views {width}x{height}, "
          f"{n_files} files, foreground {100 * fg:.1f}%")
    return 0


def cmd_train(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: bad --set '{item}', expected KEY=VALUE", file=sys.stderr)
            return EXIT_USAGE
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        config = trainer.TrainConfig.from_file(args.config, overrides)
    else:
        config = trainer.TrainConfig.from_strings({k: str(v) for k, v in overrides.items()})
    bundle = scenegen.read_bundle(args.scene)
    os.makedirs(args.out, exist_ok=True)
    config.to_file(os.path.join(args.out, "config.txt"))
    resume = dc.load_checkpoint(args.resume) if args.resume else None
    try:
        result = trainer.train(bundle, config, out_dir=args.out, resume=resume)
    except trainer.DivergenceError as exc:
        dc.save_checkpoint(os.path.join(args.out, "checkpoint_last_good.ckpt"), exc.last_good)
        print(f"error: {exc}; last good state saved", file=sys.stderr)
        return EXIT_DIVERGED
    if result.metrics:
        last = result.metrics[-1]
        print("final losses: " + " ".join(
            f"{k}={v:.5g}" for k, v in zip(trainer.METRIC_COLUMNS[1:], last[1:])
        ))
    else:
        print("no iterations run; checkpoint equals initialization")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.ckpt')}")
    return 0


def load_model(checkpoint_path):
    """Rebuild a SurfaceModel from a checkpoint (hyperparameters included)."""
    state = dc.load_checkpoint(checkpoint_path)
    missing = [k for k in MODEL_KEYS if f"model.{k}" not in state]
    if missing:
        raise CheckpointMismatch(f"model.{missing[0]}", "missing from checkpoint")
    config = ModelConfig(
        channels=int(state["model.channels"]),
        heads=int(state["model.heads"]),
        emb_freqs=int(state["model.emb_freqs"]),
        volume_res=int(state["model.volume_res"]),
    )
    model = SurfaceModel(config, seed=0)
    params = {
        k: v for k, v in state.items()
        if not k.startswith(("opt.", "train.", "model."))
    }
    model.store.load_values(params, strict=True)
    return model, state


def _render_views(model, bundle, views, n_samples, batch):
    """Render per-view color/depth(z)/acc maps with the bundle's cameras."""
    results = {}
    cfg = renderer.RenderConfig(n_samples, n_samples, stratified=False)
    with dc.no_grad():
        for vi in views:
            src = [i for i in range(bundle.n_views) if i != vi]
            if len(src) < 2:
                src = list(range(bundle.n_views))
            prepared = model.prepare(
                [bundle.cameras[i] for i in src],
                [bundle.images[i] for i in src], bundle.bbox,
            )
            cam = bundle.cameras[vi]
            w, h = cam.width, cam.height
            ys, xs = np.mgrid[0:h, 0:w]
            pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
            rays = renderer.rays_for_pixels(cam, pixels, bundle.bbox)
            live = [i for i, r in enumerate(rays) if r is not None]
            color = np.zeros((h * w, 3))
            depth = np.zeros(h * w)
            acc = np.zeros(h * w)
            fwd = cam.forward_axis()
            field = renderer.make_model_field(model, prepared, cam)
            for lo in range(0, len(live), batch):
                chunk = live[lo:lo + batch]
                out = renderer.render_rays(
                    field, [rays[i] for i in chunk], cfg, np.random.default_rng(0)
                )
                cosf = np.array([rays[i].direction @ fwd for i in chunk])
                color[chunk] = out.color.values
                depth[chunk] = out.depth.values * cosf
                acc[chunk] = out.acc.values
            results[vi] = (
                color.reshape(h, w, 3), depth.reshape(h, w), acc.reshape(h, w)
            )
    return results


def _parse_views(arg, n_views):
    if arg is None:
        return list(range(n_views))
    views = [int(x) for x in arg.split(",") if x.strip()]
    bad = [v for v in views if not 0 <= v < n_views]
    if bad:
        raise ValueError(f"view index {bad[0]} out of range (bundle has {n_views})")
    return views


def cmd_render(args):
    bundle = scenegen.read_bundle(args.scene)
    model, state = load_model(args.checkpoint)
    views = _parse_views(args.views, bundle.n_views)
    n = args.samples or int(state.get("model.n_samples", 16))
    os.makedirs(args.out, exist_ok=True)
    from . import imgio

    rendered = _render_views(model, bundle, views, n, batch=1024)
    for vi, (color, depth, acc) in rendered.items():
        imgio.write_ppm(os.path.join(args.out, f"render_{vi}.ppm"), color)
        imgio.write_pfm(os.path.join(args.out, f"depth_{vi}.pfm"), depth)
        print(f"view {vi}: mean acc {acc.mean():.3f}")
    return 0


def cmd_extract_mesh(args):
    bundle = scenegen.read_bundle(args.scene)
    model, _ = load_model(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    with dc.no_grad():
        prepared = model.prepare(bundle.cameras, bundle.images, bundle.bbox)
        sdf_fn = model.point_sdf(prepared)
        mesh = meshing.marching_cubes(
            lambda p: sdf_fn(p).values, bundle.bbox, args.grid
        )
    path = os.path.join(args.out, "mesh.obj")
    meshing.write_obj(path, mesh)
    if mesh.is_empty:
        print(f"warning: empty mesh (field has no zero crossing); wrote {path}")
    else:
        print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {path}")
    return 0


def cmd_eval_depth(args):
    bundle = scenegen.read_bundle(args.scene)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    from . import imgio

    preds, masks = {}, {}
    if args.pred:
        for vi in range(bundle.n_views):
            path = os.path.join(args.pred, f"depth_{vi}.pfm")
            preds[vi] = imgio.read_pfm(path)
            masks[vi] = bundle.gt_masks[vi]
    else:
        model, state = load_model(args.checkpoint)
        n = args.samples or 16
        rendered = _render_views(model, bundle, range(bundle.n_views), n, batch=1024)
        for vi, (_, depth, acc) in rendered.items():
            preds[vi] = depth
            masks[vi] = bundle.gt_masks[vi] & (acc > renderer.ACC_GATE)

    rows = []
    agg_err, agg_rel, agg_n = 0.0, 0.0, 0
    per_thresh = {float(t): 0.0 for t in thresholds}
    for vi in range(bundle.n_views):
        m = meshing.depth_metrics(preds[vi], bundle.gt_depths[vi], masks[vi], thresholds)
        n_px = int(masks[vi].sum())
        rows.append((f"view{vi}.abs_err", m.abs_err))
        rows.append((f"view{vi}.rel_err", m.rel_err))
        for t, v in m.pct_below.items():
            rows.append((f"view{vi}.pct_below_{t:g}", v))
            per_thresh[t] += v * n_px
        agg_err += m.abs_err * n_px
        agg_rel += m.rel_err * n_px
        agg_n += n_px
    rows.append(("mean.abs_err", agg_err / agg_n))
    rows.append(("mean.rel_err", agg_rel / agg_n))
    for t in per_thresh:
        rows.append((f"mean.pct_below_{t:g}", per_thresh[t] / agg_n))
    os.makedirs(args.out, exist_ok=True)
    report = os.path.join(args.out, "depth_metrics.txt")
    meshing.write_report(report, rows)
    print(f"mean abs err {agg_err / agg_n:.6g}, mean rel err {agg_rel / agg_n:.4f}% -> {report}")
    return 0


def backproject_gt_cloud(bundle, stride=1):
    """World points from every masked ground-truth depth pixel."""
    pts = []
    for vi in range(bundle.n_views):
        cam = bundle.cameras[vi]
        ys, xs = np.nonzero(bundle.gt_masks[vi])
        ys, xs = ys[::stride], xs[::stride]
        z = bundle.gt_depths[vi][ys, xs]
        d_cam = np.stack(
            [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(z)], axis=1
        )
        cam_pts = d_cam * z[:, None]
        pts.append((cam_pts - cam.translation) @ cam.rotation)
    return np.concatenate(pts)


def cmd_eval_chamfer(args):
    bundle = scenegen.read_bundle(args.scene)
    rng = np.random.default_rng(0)
    if args.mesh:
        mesh = meshing.read_obj(args.mesh)
    else:
        model, _ = load_model(args.checkpoint)
        with dc.no_grad():
            prepared = model.prepare(bundle.cameras, bundle.images, bundle.bbox)
            sdf_fn = model.point_sdf(prepared)
            mesh = meshing.marching_cubes(
                lambda p: sdf_fn(p).values, bundle.bbox, args.grid
            )
    os.makedirs(args.out, exist_ok=True)
    if mesh.is_empty:
        meshing.write_report(
            os.path.join(args.out, "chamfer.txt"), [("empty_mesh", 1)]
        )
        print("warning: empty mesh, no Chamfer computed")
        return 0
    pred_pts = meshing.sample_mesh(mesh, args.samples, rng)
    if args.gt_mesh:
        gt_pts = meshing.sample_mesh(meshing.read_obj(args.gt_mesh), args.samples, rng)
    else:
        gt_pts = backproject_gt_cloud(bundle)
    acc, comp, mean = meshing.chamfer(pred_pts, gt_pts)
    meshing.write_xyz(os.path.join(args.out, "pred_points.xyz"), pred_pts)
    meshing.write_report(
        os.path.join(args.out, "chamfer.txt"),
        [("accuracy", acc), ("completeness", comp), ("mean", mean)],
    )
    print(f"chamfer accuracy {acc:.6g} completeness {comp:.6g} mean {mean:.6g}")
    return 0


def cmd_grad_check(args):
    results = verify.run_suites(args.module, seed=args.seed)
    width = max(len(f"{suite}/{name}") for suite, name, _, _ in results)
    failed = 0
    for suite, name, err, tol in results:
        ok = err < tol
        failed += not ok
        print(f"{(suite + '/' + name).ljust(width)}  {err:.3e}  (tol {tol:.0e})  "
              f"{'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else EXIT_VERIFY
