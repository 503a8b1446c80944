"""The five training objectives and their weighted sum.

The depth pair (global triplet + local gradient) supervises rendered depth
against pseudo-monocular depth without resolving its affine ambiguity: the
triplet loss is invariant to scale/offset by construction, the gradient
loss compares only derivative directions.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DualArray

logger = logging.getLogger(__name__)

COS_EPS = 1e-8
NORM_TINY = 1e-24  # keeps sqrt differentiable at exactly-flat patches


@dataclass
class LossWeights:
    lambda_eikonal: float = 0.1
    lambda_sparse: float = 0.02
    lambda_global: float = 0.05
    lambda_local: float = 0.05
    tau: float = 16.0

    def __post_init__(self):
        for name in ("lambda_eikonal", "lambda_sparse", "lambda_global", "lambda_local"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite non-negative float, got {v}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def color_loss(pred, gt, mask):
    """Mean absolute error over masked pixels and channels."""
    pred = dc.as_dual(pred)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.values.shape != gt.shape:
        raise ValueError(f"color_loss: shapes {pred.values.shape} != {gt.shape}")
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        raise ValueError("color_loss: empty mask")
    p = dc.take(dc.reshape(pred, (-1, pred.values.shape[-1])), idx, axis=0)
    g = gt.reshape(-1, gt.shape[-1])[idx]
    return dc.mean(dc.absval(dc.sub(p, DualArray(g))))


def eikonal_loss(sdf_fn, points, delta=1e-3):
    """Mean squared deviation of |grad sdf| from 1 at the given points.

    The spatial gradient comes from central differences of the field --
    six extra (first-order differentiable) evaluations per point -- so the
    loss can train parameters without higher-order tape support. Exact for
    affine fields.
    """
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    shifts = []
    for k in range(3):
        for sign in (+1.0, -1.0):
            d = np.zeros(3)
            d[k] = sign * delta
            shifts.append(pts + d)
    vals = sdf_fn(np.concatenate(shifts, axis=0))  # [6M]
    comps = []
    for k in range(3):
        hi = vals[2 * k * m:(2 * k + 1) * m]
        lo = vals[(2 * k + 1) * m:(2 * k + 2) * m]
        comps.append(dc.div(dc.sub(hi, lo), 2.0 * delta))
    sqnorm = dc.add(dc.add(dc.square(comps[0]), dc.square(comps[1])), dc.square(comps[2]))
    norm = dc.sqrt(dc.add(sqnorm, NORM_TINY))
    return dc.mean(dc.square(dc.sub(norm, 1.0)))


def spatial_gradient(sdf_fn, points):
    """Analytic grad sdf via a dedicated pass with positions as the
    differentiated leaves. Diagnostic counterpart of the finite-difference
    gradient used inside eikonal_loss."""
    pts = np.asarray(points, dtype=np.float64)
    grads = np.empty_like(pts)
    for i in range(pts.shape[0]):
        with dc.Tape():
            leaf = DualArray(pts[i:i + 1], requires_grad=True)
            val = sdf_fn(leaf)
            grads[i] = dc.backward(dc.sum_(val)).get(leaf).values[0]
    return grads


def sparse_loss(sdf_values, tau):
    """Mean of exp(-tau |sdf|): pulls unsampled space away from the level set."""
    if tau <= 0:
        raise ValueError("sparse_loss: tau must be positive")
    sdf = dc.as_dual(sdf_values)
    return dc.mean(dc.exp(dc.mul(dc.absval(sdf), -float(tau))))


def global_triplet_loss(pred_depths, mono_depths, triples):
    """Scale/offset-free consistency over ray triples (s, 1, 2):

        ((d1 - ds)(m2 - ms) - (d2 - ds)(m1 - ms))^2, averaged.

    An affine relation pred = a * mono + b zeroes the loss exactly. With no
    triples the loss is 0 and a warning is logged.
    """
    if len(triples) == 0:
        logger.warning("global_triplet_loss: no valid triples, returning 0")
        return DualArray(0.0)
    pred = dc.as_dual(pred_depths)
    mono = np.asarray(
        mono_depths.values if isinstance(mono_depths, DualArray) else mono_depths,
        dtype=np.float64,
    )
    tri = np.asarray(triples, dtype=np.int64)
    ds = dc.take(pred, tri[:, 0])
    d1 = dc.take(pred, tri[:, 1])
    d2 = dc.take(pred, tri[:, 2])
    ms, m1, m2 = (DualArray(mono[tri[:, k]]) for k in range(3))
    lhs = dc.mul(dc.sub(d1, ds), dc.sub(m2, ms))
    rhs = dc.mul(dc.sub(d2, ds), dc.sub(m1, ms))
    return dc.mean(dc.square(dc.sub(lhs, rhs)))


def local_gradient_loss(pred_patch, mono_patch, mask):
    """Squared misalignment of depth-gradient directions over a patch.

    Forward differences per interior pixel; the cosine is regularized with
    COS_EPS in both norms and COS_EPS^2 in the numerator so exactly-flat
    pairs count as aligned (loss ~ 0) instead of exploding.
    """
    pred = dc.as_dual(pred_patch)
    mono = np.asarray(
        mono_patch.values if isinstance(mono_patch, DualArray) else mono_patch,
        dtype=np.float64,
    )
    mask = np.asarray(mask, dtype=bool)
    h, w = pred.values.shape
    if h < 2 or w < 2:
        raise ValueError("local_gradient_loss: patch must be at least 2x2")
    ok = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1]
    idx = np.flatnonzero(ok.reshape(-1))
    if idx.size == 0:
        logger.warning("local_gradient_loss: no valid interior pixels, returning 0")
        return DualArray(0.0)

    def grads(d):
        dx = dc.sub(d[:-1, 1:], d[:-1, :-1])
        dy = dc.sub(d[1:, :-1], d[:-1, :-1])
        return (
            dc.take(dc.reshape(dx, (-1,)), idx),
            dc.take(dc.reshape(dy, (-1,)), idx),
        )

    px, py = grads(pred)
    mono_d = DualArray(mono)
    mx, my = grads(mono_d)
    dot = dc.add(dc.mul(px, mx), dc.mul(py, my))
    pn = dc.sqrt(dc.add(dc.add(dc.square(px), dc.square(py)), NORM_TINY))
    mn = dc.sqrt(dc.add(dc.add(dc.square(mx), dc.square(my)), NORM_TINY))
    cosine = dc.div(
        dc.add(dot, COS_EPS * COS_EPS),
        dc.mul(dc.add(pn, COS_EPS), dc.add(mn, COS_EPS)),
    )
    return dc.mean(dc.square(dc.sub(1.0, cosine)))


def total_loss(color, eikonal, sparse, global_triplet, local_gradient, weights):
    """Weighted sum of the five objectives."""
    out = dc.as_dual(color)
    for term, lam in (
        (eikonal, weights.lambda_eikonal),
        (sparse, weights.lambda_sparse),
        (global_triplet, weights.lambda_global),
        (local_gradient, weights.lambda_local),
    ):
        out = dc.add(out, dc.mul(dc.as_dual(term), float(lam)))
    return out
