"""Pinhole cameras, rays, and the epipolar gather into source views.

Conventions (declared, since references rarely state them): integer pixel
coordinates address pixel centers; a projected point is inside the image
iff its pixel lies in [0, W-1] x [0, H-1]; projection validity additionally
requires camera-frame depth > 1e-6. Bilinear interpolation clamps at the
border of the sampled grid.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray  # 4x4 rigid transform
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.world_to_cam, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"world_to_cam must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-9
        ):
            raise ValueError("world_to_cam rotation block must be orthonormal, det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("image size must be at least 2x2")
        object.__setattr__(self, "world_to_cam", m.copy())
        self.world_to_cam.setflags(write=False)

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def forward_axis(self):
        """World-frame optical axis (+z of the camera)."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be unit length, |d| = {n}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got ({self.near}, {self.far})")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


@dataclass(frozen=True)
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError(f"bounding box min {lo} must be < max {hi} componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self):
        return self.hi - self.lo

    def contains(self, p):
        p = np.asarray(p)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def ray_range(self, origin, direction):
        """Entry/exit parameters of a ray against the box (slab test).

        Returns (t0, t1); the ray misses when t1 <= max(t0, 0).
        """
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.asarray(direction, dtype=np.float64)
        a = (self.lo - origin) * inv
        b = (self.hi - origin) * inv
        a, b = np.where(np.isnan(a), -np.inf, a), np.where(np.isnan(b), np.inf, b)
        t0 = np.max(np.minimum(a, b), axis=-1)
        t1 = np.min(np.maximum(a, b), axis=-1)
        return t0, t1


def pixel_to_ray(cam, px, near=1e-3, far=1e3):
    """Back-project a pixel to a unit-direction world ray through it."""
    u, v = float(px[0]), float(px[1])
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside [0,{cam.width})x[0,{cam.height})")
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d_world = cam.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(cam.center(), d_world, near, far)


def project(cam, p):
    """Project world point(s) -> (pixel [..,2], depth [..], valid [..]).

    Invalid projections (behind the camera or outside the image) are flagged,
    never raised. Pixel values for near-zero depth are clamped garbage and
    must be gated on the flag.
    """
    p = np.asarray(p, dtype=np.float64)
    q = p @ cam.rotation.T + cam.translation
    z = q[..., 2]
    safe_z = np.where(np.abs(z) < DEPTH_EPS, DEPTH_EPS, z)
    u = cam.fx * q[..., 0] / safe_z + cam.cx
    v = cam.fy * q[..., 1] / safe_z + cam.cy
    pixel = np.stack([u, v], axis=-1)
    valid = (
        (z > DEPTH_EPS)
        & (u >= 0.0) & (u <= cam.width - 1.0)
        & (v >= 0.0) & (v <= cam.height - 1.0)
    )
    return pixel, z, valid


def project_dual(cam, points):
    """Differentiable projection of a [N, 3] DualArray of world points.

    Returns (pixel DualArray [N, 2], depth DualArray [N], valid ndarray [N]).
    Validity is computed from the numeric values and treated as locally
    constant, which is exact away from the frustum boundary.
    """
    rot = dc.DualArray(cam.rotation.T)
    trans = dc.DualArray(cam.translation)
    q = dc.add(dc.matmul(points, rot), trans)
    z = q[:, 2]
    zv = z.values
    safe_z = dc.maximum_const(z, DEPTH_EPS)
    u = dc.add(dc.mul(dc.div(q[:, 0], safe_z), cam.fx), cam.cx)
    v = dc.add(dc.mul(dc.div(q[:, 1], safe_z), cam.fy), cam.cy)
    valid = (
        (zv > DEPTH_EPS)
        & (u.values >= 0.0) & (u.values <= cam.width - 1.0)
        & (v.values >= 0.0) & (v.values <= cam.height - 1.0)
    )
    return dc.stack([u, v], axis=1), z, valid


def sample_coarse(ray, n, stratified, rng):
    """n sorted t-values in [near, far]: bin midpoints, or one uniform draw
    per equal-width bin when stratified."""
    if n < 2:
        raise ValueError(f"need at least 2 coarse samples, got {n}")
    edges = np.linspace(ray.near, ray.far, n + 1)
    if stratified:
        t = edges[:-1] + rng.random(n) * (edges[1:] - edges[:-1])
    else:
        t = 0.5 * (edges[:-1] + edges[1:])
    return np.sort(t)


def bilinear_weights(u, v, width, height):
    """Corner indices and weights for border-clamped bilinear interpolation.

    Returns (idx [N, 4] flat indices into an [H, W] grid, w [N, 4]).
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, width - 1.0)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, height - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, width - 2) if width > 1 else np.zeros_like(u, dtype=np.int64)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, height - 2) if height > 1 else np.zeros_like(v, dtype=np.int64)
    fu = u - x0
    fv = v - y0
    idx = np.stack(
        [
            y0 * width + x0,
            y0 * width + x0 + 1,
            (y0 + 1) * width + x0,
            (y0 + 1) * width + x0 + 1,
        ],
        axis=-1,
    )
    w = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1
    )
    return idx, w


def bilinear_sample(grid, u, v):
    """Border-clamped bilinear interpolation of an [H, W, C] ndarray."""
    h, w, c = grid.shape
    idx, wt = bilinear_weights(u, v, w, h)
    flat = grid.reshape(-1, c)
    return np.einsum("nk,nkc->nc", wt, flat[idx])


def epipolar_gather(points, sources, feature_grids=None):
    """Project target-ray samples into every source view and interpolate.

    ``points``: [N_S, 3] DualArray or ndarray of world positions.
    ``sources``: list of (Camera, FeatureMap2D-like) pairs; each feature map
    exposes ``.values`` (an [H_f, W_f, C] DualArray) and covers the camera's
    full image plane, so pixel coords scale by W_f/W into the feature grid.

    Returns (F_E DualArray [N_V, N_S, C], mask ndarray [N_V, N_S]). Invalid
    projections contribute a zero feature row and mask False.
    """
    if not sources:
        raise ValueError("epipolar_gather: need at least one source view")
    pts = dc.as_dual(points)
    n = pts.values.shape[0]
    channels = sources[0][1].values.shape[-1]
    per_view = []
    masks = np.zeros((len(sources), n), dtype=bool)
    for vi, (cam, fmap) in enumerate(sources):
        fv = fmap.values
        hf, wf, c = fv.values.shape
        if c != channels:
            raise ValueError(
                f"epipolar_gather: source {vi} has {c} channels, expected {channels}"
            )
        su, sv = cam.width / wf, cam.height / hf
        if pts.requires_grad:
            pix, _, valid = project_dual(cam, pts)
            feat = _bilinear_dual(fv, dc.div(pix[:, 0], su), dc.div(pix[:, 1], sv))
        else:
            pix, _, valid = project(cam, pts.values)
            idx, wt = bilinear_weights(pix[:, 0] / su, pix[:, 1] / sv, wf, hf)
            op = gather_operator(idx, wt, valid, hf * wf)
            feat = dc.sparse_matmul(op, dc.reshape(fv, (hf * wf, c)))
        if pts.requires_grad:
            feat = dc.mul(feat, dc.DualArray(valid[:, None].astype(np.float64)))
        per_view.append(dc.reshape(feat, (1, n, channels)))
        masks[vi] = valid
    return dc.concat(per_view, axis=0), masks


def gather_operator(idx, wt, valid, n_cells):
    rows = np.repeat(np.arange(idx.shape[0]), 4)
    keep = np.repeat(valid, 4)
    w = (wt * valid[:, None]).ravel()
    return dc.make_sparse_gather(
        rows[keep], idx.ravel()[keep], w[keep], n_cells, n_rows=idx.shape[0]
    )


def _bilinear_dual(grid, u, v):
    """Bilinear interpolation differentiable in both the grid values and the
    continuous sample coordinates (corner indices are local constants)."""
    h, w, c = grid.values.shape
    uc = dc.clamp(u, 0.0, w - 1.0)
    vc = dc.clamp(v, 0.0, h - 1.0)
    x0 = np.clip(np.floor(uc.values).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(vc.values).astype(np.int64), 0, max(h - 2, 0))
    fu = dc.sub(uc, dc.DualArray(x0.astype(np.float64)))
    fv = dc.sub(vc, dc.DualArray(y0.astype(np.float64)))
    flat = dc.reshape(grid, (h * w, c))
    gu = dc.reshape(fu, (-1, 1))
    gv = dc.reshape(fv, (-1, 1))
    one = dc.DualArray(1.0)
    corners = [
        (y0 * w + x0, dc.mul(dc.sub(one, gu), dc.sub(one, gv))),
        (y0 * w + x0 + 1, dc.mul(gu, dc.sub(one, gv))),
        ((y0 + 1) * w + x0, dc.mul(dc.sub(one, gu), gv)),
        ((y0 + 1) * w + x0 + 1, dc.mul(gu, gv)),
    ]
    out = None
    for cidx, cw in corners:
        term = dc.mul(dc.take(flat, cidx, axis=0), cw)
        out = term if out is None else dc.add(out, term)
    return out


def write_cameras(path, cameras):
    """Camera text format: per camera, one intrinsics line then the 4 rows
    of world_to_cam; blocks separated by blank lines."""
    with open(path, "w") as fh:
        for i, cam in enumerate(cameras):
            if i:
                fh.write("\n")
            fh.write(
                f"{float(cam.fx)!r} {float(cam.fy)!r} {float(cam.cx)!r} {float(cam.cy)!r} {cam.width} {cam.height}\n"
            )
            for row in cam.world_to_cam:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_cameras(path):
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh]
    except FileNotFoundError:
        raise FileNotFoundError(f"camera file not found: {path}") from None
    blocks, block = [], []
    for ln in lines:
        if ln:
            block.append(ln)
        elif block:
            blocks.append(block)
            block = []
    if block:
        blocks.append(block)
    cameras = []
    for bi, block in enumerate(blocks):
        if len(block) != 5:
            raise ValueError(f"{path}: camera block {bi} has {len(block)} lines, expected 5")
        head = block[0].split()
        if len(head) != 6:
            raise ValueError(f"{path}: camera block {bi} malformed intrinsics line")
        fx, fy, cx, cy = map(float, head[:4])
        width, height = int(head[4]), int(head[5])
        m = np.array([[float(x) for x in block[1 + r].split()] for r in range(4)])
        cameras.append(Camera(fx, fy, cx, cy, m, width, height))
    return cameras


def look_at_camera(position, target, up, fx, fy, cx, cy, width, height):
    """Build a Camera at ``position`` looking toward ``target``."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=0)  # rows: camera x, y, z in world
    t = -r @ position
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return Camera(fx, fy, cx, cy, m, width, height)
