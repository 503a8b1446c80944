"""Differentiable SDF volume rendering.

Opacity follows the NeuS discrete conversion: for consecutive samples with
signed distances f_j, f_{j+1} and sharpness s,

    alpha_j = max((sigmoid(s f_j) - sigmoid(s f_{j+1})) / sigmoid(s f_j), 0)

Depth composites the sample distances t_j, color composites per-sample
blended source colors; both under transmittance weights T_j alpha_j with
T_1 = 1.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from .diffcore import DualArray

WEIGHT_FLOOR = 1e-5  # importance-sampling floor added to coarse weights
ACC_GATE = 0.5       # minimum accumulated opacity for a depth to be trusted


@dataclass
class RenderConfig:
    n_coarse: int = 16
    n_fine: int = 16
    stratified: bool = True


@dataclass
class RenderResult:
    color: object        # [R, 3] DualArray
    depth: object        # [R] DualArray, distance along the ray
    acc: object          # [R] DualArray
    t: np.ndarray        # [R, S] sample distances
    sdf: object          # [R, S] DualArray
    weights: object      # [R, S] DualArray
    positions: np.ndarray = field(default=None)  # [R, S, 3]


def sdf_to_alpha(sdf_j, sdf_j1, s):
    """NeuS discrete opacity for one section, clamped to [0, 1]."""
    if not isinstance(s, DualArray) and s <= 0:
        raise ValueError("sdf_to_alpha: sharpness must be positive")
    if isinstance(s, DualArray) and np.any(s.values <= 0):
        raise ValueError("sdf_to_alpha: sharpness must be positive")
    a = dc.sigmoid(dc.mul(dc.as_dual(sdf_j), s))
    b = dc.sigmoid(dc.mul(dc.as_dual(sdf_j1), s))
    return dc.maximum_const(dc.div(dc.sub(a, b), a), 0.0)


def alphas_from_sdf(sdf, s):
    """Per-sample opacities from [R, S] signed distances; the final sample
    has no successor and gets alpha 0."""
    r, n = sdf.values.shape
    alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], s)
    return dc.concat([alpha, DualArray(np.zeros((r, 1)))], axis=1)


def transmittance_weights(alpha):
    """Per-sample compositing weights T_j alpha_j with T_1 = 1."""
    alpha = dc.as_dual(alpha)
    if np.any(alpha.values < 0) or np.any(alpha.values > 1):
        raise ValueError("composite: alpha outside [0, 1]")
    n = alpha.values.shape[-1]
    trans = DualArray(np.ones(alpha.values.shape[:-1]))
    w_slices = []
    for j in range(n):
        aj = alpha[..., j]
        w_slices.append(dc.mul(trans, aj))
        trans = dc.mul(trans, dc.sub(1.0, aj))
    return dc.stack(w_slices, axis=-1)


def composite_with_weights(weights, quantity):
    quantity = dc.as_dual(quantity)
    if weights.values.shape != quantity.values.shape[:-1]:
        raise ValueError(
            f"composite: weights {weights.values.shape} vs quantity {quantity.values.shape}"
        )
    return dc.sum_(
        dc.mul(dc.reshape(weights, weights.values.shape + (1,)), quantity), axis=-2
    )


def composite(alpha, quantity):
    """Transmittance-weighted sum along the sample axis.

    alpha: [..., N], quantity: [..., N, k]. Returns (rendered [..., k],
    weights [..., N], acc [...]). T_1 = 1 (empty product).
    """
    weights = transmittance_weights(alpha)
    rendered = composite_with_weights(weights, quantity)
    acc = dc.sum_(weights, axis=-1)
    return rendered, weights, acc


def importance_resample(t_coarse, weights, n_fine, rng):
    """Inverse-CDF draws from the piecewise-constant PDF over the coarse
    bins (floored, normalized). Bin edges are the midpoints between coarse
    samples, extended half a bin at each end, which reconstructs the
    stratification bins exactly for midpoint coarse samples."""
    if n_fine < 1:
        raise ValueError("importance_resample: need at least one fine sample")
    t = np.asarray(t_coarse, dtype=np.float64)
    w = np.asarray(
        weights.values if isinstance(weights, DualArray) else weights, dtype=np.float64
    )
    if np.any(w < 0):
        raise ValueError("importance_resample: negative weights")
    mids = 0.5 * (t[1:] + t[:-1])
    lo = t[0] - 0.5 * (t[1] - t[0])
    hi = t[-1] + 0.5 * (t[-1] - t[-2])
    edges = np.concatenate([[lo], mids, [hi]])
    p = w + WEIGHT_FLOOR
    p = p / p.sum()
    cdf = np.concatenate([[0.0], np.cumsum(p)])
    cdf[-1] = 1.0
    u = rng.random(n_fine)
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(p) - 1)
    frac = (u - cdf[idx]) / np.maximum(p[idx], 1e-300)
    return np.sort(edges[idx] + frac * (edges[idx + 1] - edges[idx]))


def render_rays(field_fn, rays, config, rng):
    """Two-pass hierarchical rendering of a ray batch on one tape.

    ``field_fn(positions [R, S, 3], ray_dirs [R, 3], want_color)`` returns a
    FieldEval. The coarse pass runs without gradient tracking purely to
    place the fine samples; the union of coarse and fine samples feeds the
    differentiable pass that produces color, depth (Eq. of the distances),
    and accumulated opacity.
    """
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    nears = np.array([r.near for r in rays])
    fars = np.array([r.far for r in rays])

    t_coarse = np.stack(
        [geo.sample_coarse(r, config.n_coarse, config.stratified, rng) for r in rays]
    )
    with dc.no_grad():
        pos_c = origins[:, None, :] + t_coarse[..., None] * dirs[:, None, :]
        sdf_c = field_fn(pos_c, dirs, False).sdf
        alpha_c = alphas_from_sdf(sdf_c, _detach_scalar(field_fn))
        w_c = transmittance_weights(alpha_c)

    if config.n_fine > 0:
        t_all = np.empty((len(rays), config.n_coarse + config.n_fine))
        for i in range(len(rays)):
            fine = importance_resample(t_coarse[i], w_c.values[i], config.n_fine, rng)
            t_all[i] = np.sort(np.concatenate([t_coarse[i], fine]))
    else:
        t_all = t_coarse
    t_all = np.clip(t_all, nears[:, None], fars[:, None])

    positions = origins[:, None, :] + t_all[..., None] * dirs[:, None, :]
    ev = field_fn(positions, dirs, True)
    alpha = alphas_from_sdf(ev.sdf, _current_sharpness(field_fn))
    colors = ev.colors if ev.colors is not None else DualArray(np.zeros(positions.shape))
    weights = transmittance_weights(alpha)
    color = composite_with_weights(weights, colors)
    depth = composite_with_weights(weights, DualArray(t_all[..., None]))
    acc = dc.sum_(weights, axis=-1)
    return RenderResult(
        color=color,
        depth=dc.reshape(depth, (len(rays),)),
        acc=acc,
        t=t_all,
        sdf=ev.sdf,
        weights=weights,
        positions=positions,
    )


def _current_sharpness(field_fn):
    s = getattr(field_fn, "sharpness", None)
    return s() if callable(s) else (s if s is not None else 200.0)


def _detach_scalar(field_fn):
    s = _current_sharpness(field_fn)
    return s.detach() if isinstance(s, DualArray) else s


def make_model_field(surface_model, prepared, target_cam):
    """Adapt a SurfaceModel + prepared scene to the render field interface."""

    def field(positions, ray_dirs, want_color):
        return surface_model.eval_field(
            prepared, positions, target_cam=target_cam, ray_dirs=ray_dirs,
            want_color=want_color,
        )

    field.sharpness = lambda: surface_model.sharpness
    return field


def make_oracle_field(sdf_fn, sharpness=200.0, color=None):
    """Analytic stand-in field (e.g. exact sphere SDF) for renderer oracles."""

    def field(positions, ray_dirs, want_color):
        r, s, _ = positions.shape if not isinstance(positions, DualArray) else positions.values.shape
        pts = positions.values if isinstance(positions, DualArray) else positions
        sdf = DualArray(sdf_fn(pts.reshape(-1, 3)).reshape(r, s))
        colors = None
        if want_color and color is not None:
            colors = DualArray(np.broadcast_to(np.asarray(color), (r, s, 3)).copy())
        return _OracleEval(sdf, colors)

    field.sharpness = sharpness
    return field


class _OracleEval:
    def __init__(self, sdf, colors):
        self.sdf = sdf
        self.colors = colors
        self.blend_weights = None


def render_ray(ray, field_fn, config, rng):
    """Single-ray wrapper: (color [3], depth, acc)."""
    out = render_rays(field_fn, [ray], config, rng)
    return (
        dc.reshape(out.color, (3,)),
        dc.reshape(out.depth, ()),
        dc.reshape(out.acc, ()),
    )


def rays_for_pixels(cam, pixels, bbox, pad=1e-6):
    """Build bbox-clipped rays through the given pixel coords; rays that
    miss the box are returned as None."""
    out = []
    for px in pixels:
        ray = geo.pixel_to_ray(cam, px)
        t0, t1 = bbox.ray_range(ray.origin, ray.direction)
        t0 = max(t0, pad)
        if t1 <= t0:
            out.append(None)
        else:
            out.append(geo.Ray(ray.origin, ray.direction, t0, t1))
    return out
