"""Cost-volume-guided epipolar aggregation, ray aggregation, and the
geometry / blend-weight decoders.

Both attention stages use the linearized kernel form with feature map
phi(x) = elu(x) + 1: positive for all finite inputs, so every attention
output is a convex combination of value rows and the factored one-pass
computation is safe.
"""

import numpy as np

from . import diffcore as dc
from .diffcore import DualArray

DEFAULT_HEADS = 4
DEFAULT_FREQS = 4
DEN_FLOOR = 1e-12


def phi(x):
    """Attention kernel feature map: elu(x) + 1 > 0. Fused single op."""
    x = dc.as_dual(x)
    xv = x.values
    pos = xv > 0.0
    out = np.where(pos, xv + 1.0, np.exp(np.where(pos, 0.0, xv)))

    def vjp():
        slope = np.where(pos, 1.0, out)
        return lambda g: (g * slope,)

    return dc.custom_op("phi", out, (x,), vjp)


def heads_for(dim, requested):
    """Head count actually used for a channel width; falls back to a single
    head when the width is not divisible (e.g. C + embedding width)."""
    return requested if dim % requested == 0 else 1


def _split_heads(x, h):
    d = x.values.shape[-1] // h
    return [x[..., i * d:(i + 1) * d] for i in range(h)]


def linearized_attention(q, k, v):
    """Kernel attention via factored sums, one pass over the keys.

    q, k, v: [..., N, d] with matching leading dims. Row i of the output is
    phi(q_i)^T (sum_j phi(k_j) v_j^T) / (phi(q_i)^T sum_j phi(k_j)).
    """
    q, k, v = dc.as_dual(q), dc.as_dual(k), dc.as_dual(v)
    if q.values.shape[-1] != k.values.shape[-1] or k.values.shape != v.values.shape:
        raise ValueError(
            f"linearized_attention: bad shapes q{q.values.shape} k{k.values.shape} v{v.values.shape}"
        )
    fq, fk = phi(q), phi(k)
    nd = len(k.values.shape)
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    m = dc.matmul(dc.permute(fk, swap), v)           # [..., d, d]
    z = dc.sum_(fk, axis=-2, keepdims=True)          # [..., 1, d]
    num = dc.matmul(fq, m)                           # [..., N, d]
    den = dc.sum_(dc.mul(fq, z), axis=-1, keepdims=True)
    if np.any(den.values < DEN_FLOOR):
        raise ValueError("linearized_attention: denominator underflow (phi > 0 violated?)")
    return dc.div(num, den)


def positional_embedding(x, freqs=DEFAULT_FREQS):
    """NeRF-style embedding: concat(x, sin/cos(2^k pi x)) -> width 3 + 6L."""
    if freqs < 0:
        raise ValueError("positional_embedding: frequency count must be >= 0")
    x = dc.as_dual(x)
    parts = [x]
    for k in range(freqs):
        scaled = dc.mul(x, float(2.0 ** k * np.pi))
        parts.append(dc.sin(scaled))
        parts.append(dc.cos(scaled))
    return dc.concat(parts, axis=-1) if len(parts) > 1 else x


def embedding_width(freqs=DEFAULT_FREQS):
    return 3 + 6 * freqs


class EpipolarAttention:
    """Cross-attention: cost-volume feature queries the per-view epipolar
    features. Keys/values carry the validity mask as one extra input channel
    so invalid views can be discounted."""

    def __init__(self, store, rng, channels, heads=DEFAULT_HEADS, prefix="epi"):
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        c = channels
        self.w_q = store.add(f"{prefix}.w_q", dc.glorot_uniform(rng, (c, c), c, c))
        self.w_k = store.add(f"{prefix}.w_k", dc.glorot_uniform(rng, (c + 1, c), c + 1, c))
        self.w_v = store.add(f"{prefix}.w_v", dc.glorot_uniform(rng, (c + 1, c), c + 1, c))

    def apply(self, f_b, f_e, mask):
        """f_b: [S, C], f_e: [V, S, C], mask: [V, S] -> X: [S, V, C].

        The query is repeated along the view axis, everything is permuted to
        [S, V, C], and attention runs over the view dimension independently
        per sample index.
        """
        f_b, f_e = dc.as_dual(f_b), dc.as_dual(f_e)
        n_v, n_s, c = f_e.values.shape
        if c != self.channels or f_b.values.shape != (n_s, c):
            raise ValueError(
                f"epipolar_aggregate: shapes F_B{f_b.values.shape} F_E{f_e.values.shape}"
            )
        q = dc.matmul(f_b, self.w_q)                             # [S, C]
        ke_in = dc.concat(
            [f_e, DualArray(mask[..., None].astype(np.float64))], axis=-1
        )
        flat = dc.reshape(ke_in, (n_v * n_s, c + 1))
        k = dc.permute(dc.reshape(dc.matmul(flat, self.w_k), (n_v, n_s, c)), (1, 0, 2))
        v = dc.permute(dc.reshape(dc.matmul(flat, self.w_v), (n_v, n_s, c)), (1, 0, 2))
        # the repeated query makes every output row along the view axis
        # identical, so one attention row per sample plus a broadcast is
        # exactly equivalent to attending with all N_V duplicates
        q3 = dc.reshape(q, (n_s, 1, c))
        outs = [
            linearized_attention(qh, kh, vh)
            for qh, kh, vh in zip(
                _split_heads(q3, self.heads),
                _split_heads(k, self.heads),
                _split_heads(v, self.heads),
            )
        ]
        return dc.broadcast_to(dc.concat(outs, axis=-1), (n_s, n_v, c))


class RayAggregator:
    """Self-attention along the ray over mean-fused features concatenated
    with the positional embedding of each sample point."""

    def __init__(self, store, rng, channels, freqs=DEFAULT_FREQS,
                 heads=DEFAULT_HEADS, prefix="ray"):
        self.channels = channels
        self.freqs = freqs
        self.width = channels + embedding_width(freqs)
        self.heads = heads_for(self.width, heads)
        cw = self.width
        self.w_q = store.add(f"{prefix}.w_q", dc.glorot_uniform(rng, (cw, cw), cw, cw))
        self.w_k = store.add(f"{prefix}.w_k", dc.glorot_uniform(rng, (cw, cw), cw, cw))
        self.w_v = store.add(f"{prefix}.w_v", dc.glorot_uniform(rng, (cw, cw), cw, cw))

    def apply(self, x, positions):
        """x: [S, V, C], positions: [S, 3] -> ray feature [S, C']."""
        out = self.apply_batched(
            dc.reshape(dc.as_dual(x), (1,) + dc.as_dual(x).values.shape),
            dc.as_dual(positions),
        )
        return dc.reshape(out, (out.values.shape[1], self.width))

    def apply_batched(self, x4, positions):
        """x4: [R, S, V, C], positions: [R*S, 3] -> [R, S, C']."""
        x4 = dc.as_dual(x4)
        r, s, n_v, c = x4.values.shape
        fused = dc.mean(x4, axis=2)                              # [R, S, C]
        emb = positional_embedding(positions, self.freqs)        # [R*S, E]
        xin = dc.concat([dc.reshape(fused, (r * s, c)), emb], axis=-1)
        cw = self.width
        q = dc.reshape(dc.matmul(xin, self.w_q), (r, s, cw))
        k = dc.reshape(dc.matmul(xin, self.w_k), (r, s, cw))
        v = dc.reshape(dc.matmul(xin, self.w_v), (r, s, cw))
        outs = [
            linearized_attention(qh, kh, vh)
            for qh, kh, vh in zip(
                _split_heads(q, self.heads),
                _split_heads(k, self.heads),
                _split_heads(v, self.heads),
            )
        ]
        return dc.concat(outs, axis=-1)


class GeometryDecoder:
    """Ray feature -> signed distance. Two elu hidden layers, linear head;
    the output bias starts positive so an untrained field is empty space."""

    def __init__(self, store, rng, in_width, hidden=64, out_bias=0.3, prefix="geo"):
        self.in_width = in_width
        self.w1 = store.add(f"{prefix}.w1", dc.glorot_uniform(rng, (in_width, hidden), in_width, hidden))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = store.add(f"{prefix}.w2", dc.glorot_uniform(rng, (hidden, hidden), hidden, hidden))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(hidden))
        self.w3 = store.add(f"{prefix}.w3", dc.glorot_uniform(rng, (hidden, 1), hidden, 1))
        self.b3 = store.add(f"{prefix}.b3", np.full(1, out_bias))

    def apply(self, rows):
        rows = dc.as_dual(rows)
        single = rows.values.ndim == 1
        x = dc.reshape(rows, (-1, self.in_width))
        x = dc.linear(x, self.w1, self.b1, activation="elu")
        x = dc.linear(x, self.w2, self.b2, activation="elu")
        x = dc.linear(x, self.w3, self.b3)
        out = dc.reshape(x, (-1,))
        return dc.reshape(out, ()) if single else out


class WeightDecoder:
    """Per-view blending scores from (ray feature, fused feature, direction
    features), softmaxed over views: weights sum to one and are >= 0."""

    def __init__(self, store, rng, ray_width, channels, dir_width=4, hidden=32, prefix="wdec"):
        self.ray_width = ray_width
        self.channels = channels
        self.dir_width = dir_width
        w_in = ray_width + channels + dir_width
        self.w1 = store.add(f"{prefix}.w1", dc.glorot_uniform(rng, (w_in, hidden), w_in, hidden))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = store.add(f"{prefix}.w2", dc.glorot_uniform(rng, (hidden, hidden), hidden, hidden))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(hidden))
        self.w3 = store.add(f"{prefix}.w3", dc.glorot_uniform(rng, (hidden, 1), hidden, 1))
        self.b3 = store.add(f"{prefix}.b3", np.zeros(1))

    def apply(self, xhat_rows, x_rows, dirs):
        """xhat_rows: [B, C'], x_rows: [B, V, C], dirs: [B, V, 4] -> [B, V]."""
        xhat_rows, x_rows, dirs = map(dc.as_dual, (xhat_rows, x_rows, dirs))
        b, n_v, c = x_rows.values.shape
        rep = dc.broadcast_to(
            dc.reshape(xhat_rows, (b, 1, self.ray_width)), (b, n_v, self.ray_width)
        )
        packed = dc.concat([rep, x_rows, dirs], axis=-1)
        x = dc.reshape(packed, (b * n_v, self.ray_width + c + self.dir_width))
        x = dc.linear(x, self.w1, self.b1, activation="elu")
        x = dc.linear(x, self.w2, self.b2, activation="elu")
        scores = dc.reshape(dc.linear(x, self.w3, self.b3), (b, n_v))
        return dc.softmax(scores, axis=-1)


def epipolar_aggregate(f_b, f_e, mask, attn):
    return attn.apply(f_b, f_e, mask)


def ray_aggregate(x, positions, aggregator):
    return aggregator.apply(x, positions)


def naive_kernel_attention(q, k, v):
    """O(N^2) double-loop oracle for linearized_attention (2D only)."""
    q, k, v = (np.asarray(a.values if isinstance(a, DualArray) else a) for a in (q, k, v))
    def feat(x):
        return np.where(x > 0, x, np.exp(np.minimum(x, 0.0)) - 1.0) + 1.0
    fq, fk = feat(q), feat(k)
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        wsum = 0.0
        acc = np.zeros(v.shape[1])
        for j in range(k.shape[0]):
            w = float(fq[i] @ fk[j])
            acc += w * v[j]
            wsum += w
        out[i] = acc / wsum
    return out
