"""Shaped float64 arrays with a closed, tape-recorded op set.

Every trainable quantity in the pipeline is a DualArray. Ops compute the
forward value with numpy and, when an input requires gradients and a tape
is active, record a vjp closure. Arrays without a tape handle are plain
immutable values.
"""

import numpy as np
import scipy.sparse

from .tape import active_tape, backward, no_grad  # noqa: F401  (re-exported)


class DualArray:
    """A float64 array that can participate in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "_tape", "_node")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = None

    # -- tape bookkeeping ---------------------------------------------------

    @property
    def tape_id(self):
        return self._node

    def _handle(self, tape):
        """Node id on ``tape``, registering a leaf slot if needed."""
        if self._tape is not tape:
            self._tape = tape
            self._node = tape.add_leaf()
        return self._node

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(()))

    def detach(self):
        return DualArray(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DualArray(shape={self.values.shape}{flag})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return sub(0.0, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return permute(self, axes)


def as_dual(x):
    if isinstance(x, DualArray):
        return x
    return DualArray(x)


def _record(op, out_values, inputs, vjp_builder):
    """Build the output array, recording a node when gradients are needed.

    ``vjp_builder`` is called lazily (only when recording) and must return
    a callable(grad) -> tuple of per-input gradients (None allowed).
    """
    tape = active_tape()
    needs = tape is not None and any(a.requires_grad for a in inputs)
    out = DualArray(out_values, requires_grad=needs)
    if needs:
        ids = tuple(a._handle(tape) if a.requires_grad else None for a in inputs)
        out._tape = tape
        out._node = tape.add_node(op, ids, vjp_builder())
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(a, b, op):
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.values.shape} and {b.values.shape} are not broadcastable"
        ) from None


# -- arithmetic ----------------------------------------------------------------


def add(a, b):
    a, b = as_dual(a), as_dual(b)
    _check_elementwise(a, b, "add")
    out = a.values + b.values

    def vjp():
        sa, sb = a.values.shape, b.values.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _record("add", out, (a, b), vjp)


def sub(a, b):
    a, b = as_dual(a), as_dual(b)
    _check_elementwise(a, b, "sub")
    out = a.values - b.values

    def vjp():
        sa, sb = a.values.shape, b.values.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _record("sub", out, (a, b), vjp)


def mul(a, b):
    a, b = as_dual(a), as_dual(b)
    _check_elementwise(a, b, "mul")
    out = a.values * b.values

    def vjp():
        av, bv = a.values, b.values
        return lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _record("mul", out, (a, b), vjp)


def div(a, b):
    a, b = as_dual(a), as_dual(b)
    _check_elementwise(a, b, "div")
    if np.any(b.values == 0.0):
        raise ValueError("div: zero denominator")
    out = a.values / b.values

    def vjp():
        av, bv = a.values, b.values
        return lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return _record("div", out, (a, b), vjp)


def matmul(a, b):
    """Matrix product. Supports 2D x 2D, batched x batched (equal leading
    dims), and batched x 2D (shared right operand)."""
    a, b = as_dual(a), as_dual(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def vjp():
        def back(g):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            ga = _unbroadcast(ga, av.shape)
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g)
            return ga, _unbroadcast(gb, bv.shape)

        return back

    return _record("matmul", out, (a, b), vjp)


def sparse_matmul(op, x):
    """Product of a constant scipy CSR matrix with a [n, c] DualArray.

    The sparse operator encodes fixed gather/interpolation weights; only
    ``x`` is differentiable.
    """
    x = as_dual(x)
    if x.values.ndim != 2 or op.shape[1] != x.values.shape[0]:
        raise ValueError(f"sparse_matmul: operator {op.shape} vs input {x.values.shape}")
    out = op @ x.values

    def vjp():
        op_t = op.T.tocsr()
        return lambda g: (op_t @ g,)

    return _record("sparse_matmul", out, (x,), vjp)


# -- pointwise nonlinearities ---------------------------------------------------


def exp(a):
    a = as_dual(a)
    out = np.exp(a.values)

    def vjp():
        return lambda g: (g * out,)

    return _record("exp", out, (a,), vjp)


def log(a):
    a = as_dual(a)
    if np.any(a.values <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(a.values)

    def vjp():
        av = a.values
        return lambda g: (g / av,)

    return _record("log", out, (a,), vjp)


def sqrt(a):
    a = as_dual(a)
    if np.any(a.values < 0.0):
        raise ValueError("sqrt: input must be non-negative")
    out = np.sqrt(a.values)

    def vjp():
        return lambda g: (g * 0.5 / out,)

    return _record("sqrt", out, (a,), vjp)


def sin(a):
    a = as_dual(a)
    out = np.sin(a.values)

    def vjp():
        cv = np.cos(a.values)
        return lambda g: (g * cv,)

    return _record("sin", out, (a,), vjp)


def cos(a):
    a = as_dual(a)
    out = np.cos(a.values)

    def vjp():
        sv = np.sin(a.values)
        return lambda g: (g * -sv,)

    return _record("cos", out, (a,), vjp)


def elu(a):
    """elu(x) = x for x > 0, exp(x) - 1 otherwise. C1 at the origin."""
    a = as_dual(a)
    av = a.values
    pos = av > 0.0
    neg = np.exp(np.where(pos, 0.0, av)) - 1.0
    out = np.where(pos, av, neg)

    def vjp():
        slope = np.where(pos, 1.0, neg + 1.0)  # captured alone; inputs can be freed
        return lambda g: (g * slope,)

    return _record("elu", out, (a,), vjp)


def sigmoid(a):
    a = as_dual(a)
    av = a.values
    out = np.empty_like(av)
    pos = av >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)

    def vjp():
        return lambda g: (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), vjp)


def square(a):
    a = as_dual(a)
    return mul(a, a)


def absval(a):
    """|x| as elementwise max(x, -x); routes the tie gradient to +1."""
    a = as_dual(a)
    return maximum(a, -a)


# -- reductions ------------------------------------------------------------------


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[i] for i in axis]))


def _expand_for_reduce(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_dual(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp():
        shape = a.values.shape
        return lambda g: (_expand_for_reduce(g, shape, axis, keepdims).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_dual(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)

    def vjp():
        shape = a.values.shape
        n = _axis_count(shape, axis)
        return lambda g: (_expand_for_reduce(g, shape, axis, keepdims) / n,)

    return _record("mean", out, (a,), vjp)


def variance(a, axis=None, keepdims=False):
    """Population variance (divisor N) over the given axis."""
    a = as_dual(a)
    m = a.values.mean(axis=axis, keepdims=True)
    centered = a.values - m
    out_full = (centered * centered).mean(axis=axis, keepdims=True)
    out = out_full if keepdims else np.squeeze(
        out_full, axis=axis if axis is not None else None
    )

    def vjp():
        shape = a.values.shape
        n = _axis_count(shape, axis)
        return lambda g: (
            _expand_for_reduce(g, shape, axis, keepdims) * 2.0 * centered / n,
        )

    return _record("variance", out, (a,), vjp)


# -- shape manipulation ------------------------------------------------------------


def reshape(a, shape):
    a = as_dual(a)
    out = a.values.reshape(shape)

    def vjp():
        old = a.values.shape
        return lambda g: (g.reshape(old),)

    return _record("reshape", out, (a,), vjp)


def permute(a, axes):
    a = as_dual(a)
    out = np.transpose(a.values, axes)

    def vjp():
        inv = np.argsort(axes)
        return lambda g: (np.transpose(g, inv),)

    return _record("permute", out, (a,), vjp)


def broadcast_to(a, shape):
    a = as_dual(a)
    out = np.broadcast_to(a.values, shape).copy()

    def vjp():
        old = a.values.shape
        return lambda g: (_unbroadcast(g, old),)

    return _record("broadcast", out, (a,), vjp)


def concat(arrays, axis=0):
    arrays = [as_dual(a) for a in arrays]
    if not arrays:
        raise ValueError("concat: empty input list")
    out = np.concatenate([a.values for a in arrays], axis=axis)

    def vjp():
        sizes = [a.values.shape[axis] for a in arrays]
        offsets = np.cumsum([0] + sizes)

        def back(g):
            return tuple(
                np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                for i in range(len(arrays))
            )

        return back

    return _record("concat", out, (tuple(arrays)), vjp)


def stack(arrays, axis=0):
    return concat([reshape(as_dual(a), _stacked_shape(a, axis)) for a in arrays], axis)


def _stacked_shape(a, axis):
    shape = list(np.asarray(as_dual(a).values).shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return tuple(shape)


def slice_(a, key):
    """Basic (non-fancy) slicing; backward scatters into zeros."""
    a = as_dual(a)
    out = a.values[key]

    def vjp():
        shape = a.values.shape

        def back(g):
            z = np.zeros(shape)
            z[key] = g
            return (z,)

        return back

    # keep the slice as a view; downstream numpy ops handle strides
    return _record("slice", out, (a,), vjp)


def pad(a, pad_width):
    a = as_dual(a)
    out = np.pad(a.values, pad_width)

    def vjp():
        key = tuple(
            slice(lo, dim + lo) for (lo, _), dim in zip(pad_width, a.values.shape)
        )
        return lambda g: (g[key],)

    return _record("pad", out, (a,), vjp)


def take(a, indices, axis=0):
    """Gather along an axis with constant integer indices."""
    a = as_dual(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.values, indices, axis=axis)

    def vjp():
        shape = a.values.shape

        def back(g):
            z = np.zeros(shape)
            np.add.at(z, _axis_index(indices, axis, len(shape)), g)
            return (z,)

        return back

    return _record("take", out, (a,), vjp)


def _axis_index(indices, axis, ndim):
    key = [slice(None)] * ndim
    key[axis] = indices
    return tuple(key)


# -- clamping ----------------------------------------------------------------------


def maximum_const(a, c):
    """Elementwise max with a constant scalar; gradient flows where a >= c."""
    a = as_dual(a)
    c = float(c)
    out = np.maximum(a.values, c)

    def vjp():
        keep = (a.values >= c).astype(np.float64)
        return lambda g: (g * keep,)

    return _record("maximum_const", out, (a,), vjp)


def minimum_const(a, c):
    """Elementwise min with a constant scalar; gradient flows where a <= c."""
    a = as_dual(a)
    c = float(c)
    out = np.minimum(a.values, c)

    def vjp():
        keep = (a.values <= c).astype(np.float64)
        return lambda g: (g * keep,)

    return _record("minimum_const", out, (a,), vjp)


def clamp(a, lo, hi):
    return minimum_const(maximum_const(a, lo), hi)


def maximum(a, b):
    """Elementwise max of two arrays; ties route the gradient to ``a``."""
    a, b = as_dual(a), as_dual(b)
    _check_elementwise(a, b, "maximum")
    out = np.maximum(a.values, b.values)

    def vjp():
        pick_a = (a.values >= b.values).astype(np.float64)
        sa, sb = a.values.shape, b.values.shape
        return lambda g: (
            _unbroadcast(g * pick_a, sa),
            _unbroadcast(g * (1.0 - pick_a), sb),
        )

    return _record("maximum", out, (a, b), vjp)


# -- composite helpers ---------------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax; the row-max shift is a local constant."""
    a = as_dual(a)
    shift = np.max(a.values, axis=axis, keepdims=True)
    e = exp(sub(a, DualArray(shift)))
    return div(e, sum_(e, axis=axis, keepdims=True))


def custom_op(name, out_values, inputs, vjp_builder):
    """Record a fused operation with a hand-written vjp.

    For performance-critical composites (convolutions) where building the
    graph from primitive ops would thrash memory. ``vjp_builder()`` must
    return callable(grad) -> per-input gradients, exactly as primitives do.
    """
    return _record(name, out_values, tuple(as_dual(a) for a in inputs), vjp_builder)


def linear(x, w, b, activation=None):
    """Fused x @ w + b with an optional elu, as a single tape node.

    x: [n, k], w: [k, m], b: [m]. The fusion keeps MLP stacks from
    materializing three intermediates per layer.
    """
    x, w, b = as_dual(x), as_dual(w), as_dual(b)
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ValueError(f"linear: bad shapes {xv.shape} @ {wv.shape}")
    if activation not in (None, "elu"):
        raise ValueError(f"linear: unknown activation '{activation}'")
    z = xv @ wv
    z += bv
    if activation == "elu":
        pos = z > 0.0
        out = np.where(pos, z, np.exp(np.where(pos, 0.0, z)) - 1.0)
    else:
        out = z

    def vjp():
        slope = np.where(z > 0.0, 1.0, out + 1.0) if activation == "elu" else None

        def back(g):
            gz = g * slope if slope is not None else g
            return gz @ wv.T, xv.T @ gz, gz.sum(axis=0)

        return back

    return _record("linear", out, (x, w, b), vjp)


def make_sparse_gather(rows, cols, weights, n_cols, n_rows=None):
    """CSR operator for fixed-weight gathers (bi/trilinear interpolation)."""
    n_rows = int(n_rows if n_rows is not None else (np.max(rows) + 1 if len(rows) else 0))
    return scipy.sparse.csr_matrix(
        (np.asarray(weights, dtype=np.float64), (rows, cols)), shape=(n_rows, n_cols)
    )
