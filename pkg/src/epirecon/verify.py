"""Finite-difference verification suites across the differentiable stack.

Each suite returns a list of (name, max_rel_error, threshold) triples; the
CLI grad-check subcommand prints them as a pass/fail table and tests assert
on them directly.
"""

import numpy as np

from . import diffcore as dc
from . import epiattn, featvol, geometry as geo, losses, renderer, scenegen
from .diffcore import DualArray
from .model import ModelConfig, SurfaceModel

OP_TOL = 1e-5
MODULE_TOL = 1e-4


def _probe(f, rng, shape, n_instances=5, positive=False, step=1e-5, tol=OP_TOL):
    """Worst grad_check error of f over several random inputs (>=100 coords
    total across instances)."""
    worst = 0.0
    for _ in range(n_instances):
        x = rng.normal(size=shape)
        if positive:
            x = np.abs(x) + 0.5
        worst = max(worst, dc.grad_check(f, DualArray(x), step=step))
    return worst


def diffcore_suite(seed=0):
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, f, shape=(24,), **kw):
        checks.append((name, _probe(f, rng, shape, **kw), OP_TOL))

    y24 = rng.normal(size=(24,))
    m46 = rng.normal(size=(4, 6))
    m63 = rng.normal(size=(6, 3))
    probe_rows = rng.normal(size=(4, 3))
    sp = dc.make_sparse_gather([0, 0, 1, 2], [1, 3, 0, 2], [0.5, 0.5, 1.0, 2.0], 4, 3)

    add("add", lambda x: dc.sum_(dc.square(dc.add(x, DualArray(y24)))))
    add("sub", lambda x: dc.sum_(dc.square(dc.sub(x, DualArray(y24)))))
    add("mul", lambda x: dc.sum_(dc.mul(x, DualArray(y24))))
    add("div", lambda x: dc.sum_(dc.div(x, DualArray(np.abs(y24) + 1.0))))
    add("div_denom", lambda x: dc.sum_(dc.div(DualArray(y24), x)), positive=True)
    add("matmul", lambda x: dc.sum_(dc.square(dc.matmul(dc.reshape(x, (4, 6)), DualArray(m63)))))
    add("matmul_rhs", lambda x: dc.sum_(dc.square(dc.matmul(DualArray(m46), dc.reshape(x, (6, 4))))))
    add("matmul_batched", lambda x: dc.sum_(dc.square(dc.matmul(dc.reshape(x, (2, 3, 4)), dc.reshape(DualArray(y24), (2, 4, 3))))))
    add("sparse_matmul", lambda x: dc.sum_(dc.square(dc.sparse_matmul(sp, dc.reshape(x, (4, 6))))))
    add("exp", lambda x: dc.sum_(dc.exp(dc.mul(x, 0.5))))
    add("log", lambda x: dc.sum_(dc.log(x)), positive=True)
    add("sqrt", lambda x: dc.sum_(dc.sqrt(x)), positive=True)
    add("sin", lambda x: dc.sum_(dc.sin(x)))
    add("cos", lambda x: dc.sum_(dc.cos(x)))
    add("elu", lambda x: dc.sum_(dc.square(dc.elu(x))))
    add("sigmoid", lambda x: dc.sum_(dc.square(dc.sigmoid(x))))
    add("sum_axis", lambda x: dc.sum_(dc.square(dc.sum_(dc.reshape(x, (4, 6)), axis=1))))
    add("mean_axis", lambda x: dc.sum_(dc.square(dc.mean(dc.reshape(x, (4, 6)), axis=0))))
    add("variance", lambda x: dc.sum_(dc.variance(dc.reshape(x, (4, 6)), axis=1)))
    add("concat", lambda x: dc.sum_(dc.square(dc.concat([x, dc.mul(x, 2.0)], axis=0))))
    add("permute", lambda x: dc.sum_(dc.mul(dc.permute(dc.reshape(x, (2, 3, 4)), (2, 0, 1)), DualArray(np.arange(24.0).reshape(4, 2, 3)))))
    add("reshape", lambda x: dc.sum_(dc.square(dc.reshape(x, (3, 8)))))
    add("broadcast", lambda x: dc.sum_(dc.square(dc.broadcast_to(dc.reshape(x, (1, 24)), (3, 24)))))
    add("slice", lambda x: dc.sum_(dc.square(x[3:17:2])))
    add("pad", lambda x: dc.sum_(dc.square(dc.pad(dc.reshape(x, (4, 6)), ((1, 2), (0, 1))))))
    add("take", lambda x: dc.sum_(dc.square(dc.take(x, np.array([1, 1, 3, 20]), axis=0))))
    add("maximum_const", lambda x: dc.sum_(dc.maximum_const(x, 0.1)))
    add("minimum_const", lambda x: dc.sum_(dc.minimum_const(x, 0.1)))
    add("maximum", lambda x: dc.sum_(dc.maximum(x, DualArray(y24))))
    add("absval", lambda x: dc.sum_(dc.absval(dc.add(x, 5.0))))
    add("softmax", lambda x: dc.sum_(dc.square(dc.softmax(dc.reshape(x, (4, 6)), axis=1))))
    bias3 = rng.normal(size=3)
    add("linear", lambda x: dc.sum_(dc.square(dc.linear(dc.reshape(x, (4, 6)), DualArray(m63), DualArray(bias3)))))
    add("linear_elu", lambda x: dc.sum_(dc.square(dc.linear(dc.reshape(x, (4, 6)), DualArray(m63), DualArray(bias3), activation="elu"))))
    checks.append((
        "conv2d_s2",
        max(
            dc.grad_check(lambda x: dc.sum_(dc.mul(featvol._conv2d_stride2(dc.reshape(x, (6, 6, 2)), DualArray(w2d), DualArray(b2d)), DualArray(pr2d))), DualArray(rng.normal(size=72)))
            for w2d, b2d, pr2d in [(rng.normal(size=(18, 3)), rng.normal(size=3), rng.normal(size=(3, 3, 3)))]
        ),
        OP_TOL,
    ))
    checks.append((
        "conv3d",
        max(
            dc.grad_check(lambda x: dc.sum_(dc.mul(featvol._conv3d(dc.reshape(x, (3, 4, 5, 2)), DualArray(w3d), DualArray(b3d)), DualArray(pr3d))), DualArray(rng.normal(size=120)))
            for w3d, b3d, pr3d in [(rng.normal(size=(54, 2)), rng.normal(size=2), rng.normal(size=(3, 4, 5, 2)))]
        ),
        OP_TOL,
    ))
    checks.append((
        "phi",
        _probe(lambda x: dc.sum_(dc.square(epiattn.phi(x))), rng, (24,)),
        OP_TOL,
    ))
    return checks


def epiattn_suite(seed=0):
    rng = np.random.default_rng(seed)
    checks = []
    s, n_v, c = 4, 2, 8
    f_b = rng.normal(size=(s, c))
    f_e = rng.normal(size=(n_v, s, c))
    mask = np.ones((n_v, s), dtype=bool)
    mask[1, 2] = False
    probe = rng.normal(size=(s, n_v, c))

    def attn_err(which):
        def f(w):
            st = dc.ParamStore()
            attn = epiattn.EpipolarAttention(st, np.random.default_rng(seed + 1), c, heads=2)
            setattr(attn, which, dc.reshape(w, getattr(attn, which).values.shape))
            out = attn.apply(DualArray(f_b), DualArray(f_e), mask)
            return dc.sum_(dc.mul(out, DualArray(probe)))

        st = dc.ParamStore()
        ref = epiattn.EpipolarAttention(st, np.random.default_rng(seed + 1), c, heads=2)
        return dc.grad_check(f, DualArray(getattr(ref, which).values.copy()))

    for which in ("w_q", "w_k", "w_v"):
        checks.append((f"epipolar_{which}", attn_err(which), MODULE_TOL))

    q = rng.normal(size=(5, 4))
    kv = rng.normal(size=(6, 4))
    checks.append((
        "linearized_attention",
        dc.grad_check(
            lambda x: dc.sum_(dc.square(epiattn.linearized_attention(dc.reshape(x, (5, 4)), DualArray(kv), DualArray(kv * 0.5)))),
            DualArray(q.ravel().copy()),
        ),
        MODULE_TOL,
    ))

    pos = rng.normal(size=(s, 3))
    x_in = rng.normal(size=(s, n_v, c))
    probe_hat = rng.normal(size=(s, c + epiattn.embedding_width(1)))

    def ray_err(which):
        def f(w):
            st = dc.ParamStore()
            agg = epiattn.RayAggregator(st, np.random.default_rng(seed + 2), c, freqs=1, heads=2)
            setattr(agg, which, dc.reshape(w, getattr(agg, which).values.shape))
            out = agg.apply(DualArray(x_in), DualArray(pos))
            return dc.sum_(dc.mul(out, DualArray(probe_hat)))

        st = dc.ParamStore()
        ref = epiattn.RayAggregator(st, np.random.default_rng(seed + 2), c, freqs=1, heads=2)
        return dc.grad_check(f, DualArray(getattr(ref, which).values.copy()))

    for which in ("w_q", "w_k", "w_v"):
        checks.append((f"ray_{which}", ray_err(which), MODULE_TOL))

    width = 12
    rows = rng.normal(size=(5, width))

    def geo_err():
        def f(w):
            st = dc.ParamStore()
            dec = epiattn.GeometryDecoder(st, np.random.default_rng(seed + 3), width, hidden=8)
            dec.w1 = dc.reshape(w, dec.w1.values.shape)
            return dc.sum_(dc.square(dec.apply(DualArray(rows))))

        st = dc.ParamStore()
        ref = epiattn.GeometryDecoder(st, np.random.default_rng(seed + 3), width, hidden=8)
        return dc.grad_check(f, DualArray(ref.w1.values.copy()))

    checks.append(("geometry_decoder", geo_err(), MODULE_TOL))

    xh = rng.normal(size=(3, width))
    xr = rng.normal(size=(3, n_v, c))
    dirs = rng.normal(size=(3, n_v, 4))
    w_probe = rng.normal(size=(3, n_v))

    def wdec_err():
        def f(w):
            st = dc.ParamStore()
            dec = epiattn.WeightDecoder(st, np.random.default_rng(seed + 4), width, c, hidden=8)
            dec.w1 = dc.reshape(w, dec.w1.values.shape)
            out = dec.apply(DualArray(xh), DualArray(xr), DualArray(dirs))
            return dc.sum_(dc.mul(out, DualArray(w_probe)))

        st = dc.ParamStore()
        ref = epiattn.WeightDecoder(st, np.random.default_rng(seed + 4), width, c, hidden=8)
        return dc.grad_check(f, DualArray(ref.w1.values.copy()))

    checks.append(("weight_decoder", wdec_err(), MODULE_TOL))
    return checks


def toy_setup(seed=0, width=10, height=10, views=3):
    """Tiny bundle + model for end-to-end checks.

    The geometry decoder is rescaled so the sdf genuinely varies along rays:
    a freshly initialized (near-constant) field would sit exactly on the
    opacity clamp boundary, where finite differences straddle the kink.
    """
    bundle, scene = scenegen.generate_bundle(
        shape="sphere", n_views=views, width=width, height=height, seed=seed
    )
    config = ModelConfig(channels=8, heads=2, emb_freqs=1, volume_res=5,
                         init_sharpness=0.2)
    model = SurfaceModel(config, seed=seed)
    for p in (model.geo_dec.w1, model.geo_dec.w2, model.geo_dec.w3):
        p.values = p.values * 5.0
    # center the field on the probe ray so it crosses zero with O(0.1)
    # inter-sample steps: opacities stay strictly inside the clamp and the
    # sharpened sigmoids stay unsaturated
    with dc.no_grad():
        prepared = model.prepare(bundle.cameras[1:], bundle.images[1:], bundle.bbox)
        cam = bundle.cameras[0]
        rays = renderer.rays_for_pixels(
            cam, [(cam.width / 2.0, cam.height / 2.0)], bundle.bbox
        )
        cfg = renderer.RenderConfig(n_coarse=4, n_fine=0, stratified=False)
        out = renderer.render_rays(
            renderer.make_model_field(model, prepared, cam), rays, cfg,
            np.random.default_rng(seed + 9),
        )
        f = out.sdf.values[0]
    span = max(float(f.max() - f.min()), 1e-3)
    model.geo_dec.w3.values = model.geo_dec.w3.values * (0.4 / span)
    model.geo_dec.b3.values = model.geo_dec.b3.values * (0.4 / span) - (
        0.4 / span
    ) * float(f.mean()) + 0.05
    return bundle, scene, model


def render_scalar(model, bundle, rng, n_coarse=4):
    """Scalar functional of a full render (color + depth + acc of one ray)."""
    prepared = model.prepare(bundle.cameras[1:], bundle.images[1:], bundle.bbox)
    cam = bundle.cameras[0]
    px = (cam.width / 2.0, cam.height / 2.0)
    rays = renderer.rays_for_pixels(cam, [px], bundle.bbox)
    cfg = renderer.RenderConfig(n_coarse=n_coarse, n_fine=0, stratified=False)
    out = renderer.render_rays(
        renderer.make_model_field(model, prepared, cam), rays, cfg, rng
    )
    return dc.add(
        dc.add(dc.sum_(out.color), dc.sum_(out.depth)), dc.mul(dc.sum_(out.acc), 0.3)
    )


def param_grad_check(scalar_fn, param, step=1e-5, max_coords=None, rng=None):
    """Finite-difference check of d(scalar_fn()) / d(param) for a model
    parameter leaf: the analytic side comes from the model's own backward,
    the numeric side from perturbing the stored values in place."""
    with dc.Tape():
        out = scalar_fn()
        analytic = dc.backward(out).get(param).values.ravel()
    base = param.values.copy()
    flat = base.ravel()
    # probe each group's dominant gradient coordinates: central differences
    # cannot resolve near-zero entries (roundoff through ~10^2-magnitude
    # intermediates floors the absolute error around 1e-8), while any vjp
    # defect would corrupt the dominant coordinates as well
    scale = np.abs(analytic).max()
    eligible = np.flatnonzero(np.abs(analytic) >= 0.3 * scale) if scale > 0 else np.arange(flat.size)
    coords = eligible
    if max_coords is not None and len(eligible) > max_coords:
        coords = (rng or np.random.default_rng(0)).choice(
            eligible, size=max_coords, replace=False
        )
    numeric = np.empty(len(coords))
    try:
        for j, i in enumerate(coords):
            vals = {}
            for sign in (+1.0, -1.0):
                probe = flat.copy()
                probe[i] += sign * step
                param.values = probe.reshape(base.shape)
                with dc.no_grad():
                    vals[sign] = scalar_fn().item()
            numeric[j] = (vals[1.0] - vals[-1.0]) / (2.0 * step)
    finally:
        param.values = base
    picked = analytic[coords]
    denom = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(picked - numeric) / denom))


def renderer_suite(seed=0, coords_per_group=6):
    """Grad-check the full render composite against every parameter group."""
    rng = np.random.default_rng(seed)
    bundle, scene, model = toy_setup(seed)
    checks = []
    for name, param in model.store.items():
        err = param_grad_check(
            lambda: render_scalar(model, bundle, np.random.default_rng(seed + 9)),
            param, step=1e-5, max_coords=coords_per_group, rng=rng,
        )
        checks.append((f"render/{name}", err, MODULE_TOL))
    return checks


def losses_suite(seed=0):
    rng = np.random.default_rng(seed)
    checks = []
    gt = rng.random((3, 3, 3))
    mask = np.ones((3, 3), dtype=bool)
    mask[0, 1] = False
    pred0 = gt + 0.2 + 0.1 * rng.random((3, 3, 3))
    checks.append((
        "color_loss",
        dc.grad_check(lambda x: losses.color_loss(dc.reshape(x, (3, 3, 3)), gt, mask), DualArray(pred0.ravel().copy())),
        MODULE_TOL,
    ))
    checks.append((
        "sparse_loss",
        dc.grad_check(lambda x: losses.sparse_loss(x, 4.0), DualArray(rng.normal(size=10) + 2.0)),
        MODULE_TOL,
    ))
    pts = rng.normal(size=(6, 3))

    def eik(w):
        fn = lambda p: dc.mul(
            dc.sqrt(dc.add(dc.sum_(dc.square(dc.as_dual(p)), axis=1), 0.3)), w
        )
        return losses.eikonal_loss(fn, pts)

    checks.append(("eikonal_loss", dc.grad_check(eik, DualArray(1.3)), MODULE_TOL))
    mono = rng.uniform(1.0, 5.0, size=10)
    tri = [(0, 1, 2), (3, 4, 5), (6, 7, 8)]
    checks.append((
        "global_triplet_loss",
        dc.grad_check(lambda x: losses.global_triplet_loss(x, mono, tri), DualArray(rng.uniform(1.0, 5.0, size=10))),
        MODULE_TOL,
    ))
    mono_p = rng.normal(size=(4, 4))
    checks.append((
        "local_gradient_loss",
        dc.grad_check(lambda x: losses.local_gradient_loss(dc.reshape(x, (4, 4)), mono_p, np.ones((4, 4), bool)), DualArray(rng.normal(size=16))),
        MODULE_TOL,
    ))
    return checks


SUITES = {
    "diffcore": diffcore_suite,
    "epiattn": epiattn_suite,
    "renderer": renderer_suite,
    "losses": losses_suite,
}


def run_suites(module="all", seed=0):
    names = list(SUITES) if module == "all" else [module]
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown module '{name}' (choose from {list(SUITES)})")
        for check in SUITES[name](seed):
            results.append((name,) + check)
    return results
