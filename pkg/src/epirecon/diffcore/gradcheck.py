"""Central finite-difference gradient checker.

This is the correctness oracle for every differentiable operation in the
repo: analytic tape gradients are compared coordinate-by-coordinate against
central differences of the same function.
"""

import numpy as np

from .array import DualArray
from .tape import Tape, backward, no_grad


def grad_check(f, x, step=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar-valued function of one DualArray. The
    relative error at each coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    For large inputs ``max_coords`` limits probing to a random coordinate
    subset (seeded by ``rng``); the analytic gradient is still full.
    """
    if step <= 0.0:
        raise ValueError("grad_check: step must be positive")
    base = np.asarray(x.values if isinstance(x, DualArray) else x, dtype=np.float64)

    leaf = DualArray(base.copy(), requires_grad=True)
    with Tape():
        out = f(leaf)
        if out.values.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        analytic = backward(out).get(leaf).values.ravel()

    flat = base.ravel()
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = (rng or np.random.default_rng(0)).choice(
            flat.size, size=max_coords, replace=False
        )
    numeric = np.empty(len(coords))
    for j, i in enumerate(coords):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            with no_grad():
                val = f(DualArray(probe.reshape(base.shape))).item()
            if not np.isfinite(val):
                raise ValueError(f"grad_check: f non-finite at coordinate {i}")
            if sign > 0:
                hi = val
            else:
                lo = val
        numeric[j] = (hi - lo) / (2.0 * step)

    picked = analytic[coords]
    denom = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(picked - numeric) / denom))


def grad_check_multi(f, arrays, step=1e-5):
    """Run grad_check against each array in a dict, returning name -> error.

    ``f`` takes the dict of DualArrays and returns a scalar DualArray; the
    check perturbs one entry at a time with the others frozen.
    """
    errors = {}
    for name in arrays:
        def single(x, _name=name):
            probe = {k: (x if k == _name else DualArray(v.values)) for k, v in arrays.items()}
            return f(probe)

        errors[name] = grad_check(single, arrays[name], step=step)
    return errors
