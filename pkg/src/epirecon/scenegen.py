"""Synthetic multi-view bundles: analytic SDF scenes rendered by sphere
tracing, plus the pseudo-monocular depth oracle with a known affine
ambiguity (depth maps that recover ground truth as alpha * d + beta)."""

import os
from dataclasses import dataclass, field

import numpy as np

from . import imgio
from .geometry import BoundingBox, Camera, look_at_camera, pixel_to_ray, read_cameras, write_cameras

TRACE_STEPS = 256
AMBIENT = 0.1


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def sdf(self, p):
        return np.linalg.norm(np.asarray(p) - self.center, axis=-1) - self.radius

    @property
    def scale(self):
        return self.radius


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    albedo: np.ndarray

    def sdf(self, p):
        q = np.abs(np.asarray(p) - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    @property
    def scale(self):
        return float(np.max(self.half_extents))


def _vec(x):
    return np.asarray(x, dtype=np.float64).reshape(3)


def make_sphere(center, radius, albedo=(0.85, 0.35, 0.3)):
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    return Sphere(_vec(center), float(radius), _vec(albedo))


def make_box(center, half_extents, albedo=(0.3, 0.55, 0.85)):
    he = _vec(half_extents)
    if np.any(he <= 0):
        raise ValueError("box half-extents must be positive")
    return Box(_vec(center), he, _vec(albedo))


@dataclass(frozen=True)
class AnalyticScene:
    """One or two primitives, combined by hard or smooth union."""

    primitives: tuple
    light_dir: np.ndarray
    smooth_k: float = 0.0  # > 0 switches the two-primitive union to smooth min

    def __post_init__(self):
        ld = _vec(self.light_dir)
        n = np.linalg.norm(ld)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("light_dir must be unit length")
        object.__setattr__(self, "light_dir", ld)
        if not 1 <= len(self.primitives) <= 2:
            raise ValueError("scene takes one or two primitives")

    @property
    def scale(self):
        return max(p.scale for p in self.primitives)

    def sdf(self, p):
        vals = [prim.sdf(p) for prim in self.primitives]
        if len(vals) == 1:
            return vals[0]
        a, b = vals
        if self.smooth_k > 0.0:
            k = self.smooth_k
            h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
            return b + (a - b) * h - k * h * (1.0 - h)
        return np.minimum(a, b)

    def albedo_at(self, p):
        """Albedo of the primitive owning the surface point (smaller |sdf|)."""
        if len(self.primitives) == 1:
            return np.broadcast_to(self.primitives[0].albedo, np.shape(p)).copy()
        d = np.stack([np.abs(prim.sdf(p)) for prim in self.primitives], axis=-1)
        pick = np.argmin(d, axis=-1)
        table = np.stack([prim.albedo for prim in self.primitives])
        return table[pick]

    def normal_at(self, p, h=1e-6):
        p = np.asarray(p, dtype=np.float64)
        grad = np.empty_like(p)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            grad[..., k] = (self.sdf(p + dp) - self.sdf(p - dp)) / (2 * h)
        return grad / np.linalg.norm(grad, axis=-1, keepdims=True)


def analytic_sdf(scene, p):
    return scene.sdf(p)


@dataclass
class SceneBundle:
    """Everything one synthetic scene provides for training and evaluation.

    Depth maps are stored at float32 precision (their on-disk PFM width),
    images on the 8-bit grid, so a write/read cycle is lossless.
    """

    cameras: list
    images: list       # [H, W, 3] in [0, 1], quantized to the 8-bit grid
    gt_depths: list    # [H, W] camera-frame z, float32 precision
    gt_masks: list     # [H, W] bool
    mono_depths: list = field(default_factory=list)
    bbox: BoundingBox = None

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def image_size(self):
        return self.cameras[0].width, self.cameras[0].height

    def validate(self):
        w, h = self.image_size
        for i, cam in enumerate(self.cameras):
            if (cam.width, cam.height) != (w, h):
                raise ValueError(f"view {i}: image size differs from view 0")
            if self.images[i].shape != (h, w, 3):
                raise ValueError(f"view {i}: image shape {self.images[i].shape} != ({h},{w},3)")
            for name, arr in (("depth", self.gt_depths[i]), ("mono", self.mono_depths[i]),
                              ("mask", self.gt_masks[i])):
                if arr.shape != (h, w):
                    raise ValueError(f"view {i}: {name} shape {arr.shape} != ({h},{w})")
            if np.any(self.gt_depths[i][self.gt_masks[i]] <= 0):
                raise ValueError(f"view {i}: non-positive depth under mask")
        return self


def render_ground_truth(scene, cam, far=None):
    """Sphere-trace every pixel: Lambertian image, z-depth, and hit mask."""
    if np.any(scene.sdf(cam.center()[None]) <= 0):
        raise ValueError("camera center is inside the scene geometry")
    w, h = cam.width, cam.height
    tol = 1e-5 * scene.scale
    if far is None:
        far = 4.0 * np.linalg.norm(cam.center()) + 10.0 * scene.scale

    ys, xs = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack(
        [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs, dtype=np.float64)],
        axis=-1,
    )
    dirs = dirs_cam.reshape(-1, 3) @ cam.rotation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = cam.center()

    t = np.full(dirs.shape[0], 1e-4 * scene.scale)
    alive = np.ones(dirs.shape[0], dtype=bool)
    hit = np.zeros(dirs.shape[0], dtype=bool)
    for _ in range(TRACE_STEPS):
        if not alive.any():
            break
        p = origin + t[alive, None] * dirs[alive]
        d = scene.sdf(p)
        converged = np.abs(d) < tol
        idx = np.flatnonzero(alive)
        hit[idx[converged]] = True
        t[alive] = t[alive] + d
        alive[idx[converged]] = False
        alive[t > far] = False

    # refinement: grazing rays stop inside the tolerance band with a depth
    # error of |sdf| / sin(incidence); extra fixed-point steps sharpen hits
    if hit.any():
        th = t[hit]
        for _ in range(128):
            d = scene.sdf(origin + th[:, None] * dirs[hit])
            th = th + d
        t[hit] = th

    points = origin + t[:, None] * dirs
    image = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    if hit.any():
        n = scene.normal_at(points[hit], h=1e-6 * scene.scale)
        lam = np.maximum(0.0, n @ scene.light_dir)
        image[hit] = np.clip(scene.albedo_at(points[hit]) * lam[:, None] + AMBIENT, 0.0, 1.0)
        cam_pts = points[hit] @ cam.rotation.T + cam.translation
        depth[hit] = cam_pts[:, 2]
    return (
        image.reshape(h, w, 3),
        depth.reshape(h, w),
        hit.reshape(h, w),
    )


def pseudo_mono_depth(gt_depth, mask, alpha, beta, noise_sigma, rng):
    """Invert the affine ambiguity: output (gt - beta)/alpha + noise so that
    gt = alpha * output + beta up to the noise. Invalid pixels stay zero."""
    if alpha == 0.0:
        raise ValueError("pseudo_mono_depth: alpha must be nonzero")
    out = np.zeros_like(np.asarray(gt_depth, dtype=np.float64))
    m = np.asarray(mask, dtype=bool)
    out[m] = (gt_depth[m] - beta) / alpha
    if noise_sigma > 0.0:
        out[m] += rng.normal(0.0, noise_sigma, size=int(m.sum()))
    return out


def default_rig(n_views=3, radius=4.0, spacing_deg=15.0, elevation_deg=15.0,
                width=64, height=64, focal_scale=1.2):
    """Cameras on a circle looking at the origin, ``spacing_deg`` apart."""
    fx = fy = focal_scale * width
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    el = np.deg2rad(elevation_deg)
    cams = []
    for i in range(n_views):
        az = np.deg2rad((i - (n_views - 1) / 2.0) * spacing_deg)
        pos = radius * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)]
        )
        cams.append(look_at_camera(pos, [0, 0, 0], [0, 1, 0], fx, fy, cx, cy, width, height))
    return cams


def build_scene(shape="sphere", scale=1.0):
    light = np.array([0.35, 0.8, -0.49])
    light /= np.linalg.norm(light)
    if shape == "sphere":
        prims = (make_sphere([0, 0, 0], scale),)
    elif shape == "box":
        prims = (make_box([0, 0, 0], [0.75 * scale] * 3),)
    elif shape == "union":
        prims = (
            make_sphere([-0.45 * scale, 0, 0], 0.7 * scale),
            make_box([0.55 * scale, 0, 0], [0.45 * scale] * 3),
        )
    elif shape == "smooth-union":
        return AnalyticScene(
            (
                make_sphere([-0.45 * scale, 0, 0], 0.7 * scale),
                make_sphere([0.5 * scale, 0, 0], 0.55 * scale),
            ),
            light,
            smooth_k=0.2 * scale,
        )
    else:
        raise ValueError(f"unknown shape '{shape}'")
    return AnalyticScene(prims, light)


def generate_bundle(shape="sphere", n_views=3, width=64, height=64, seed=0,
                    mono_alpha=1.3, mono_beta=0.2, mono_sigma=None, scale=1.0):
    """Render a complete synthetic bundle for one analytic scene."""
    scene = build_scene(shape, scale)
    if mono_sigma is None:
        mono_sigma = 0.01 * scene.scale
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    cams = default_rig(n_views, radius=4.0 * scene.scale, width=width, height=height)
    images, depths, masks, monos = [], [], [], []
    for cam in cams:
        img, dep, msk = render_ground_truth(scene, cam)
        img = np.rint(img * 255.0) / 255.0  # snap to the on-disk 8-bit grid
        dep = dep.astype(np.float32).astype(np.float64)
        mono = pseudo_mono_depth(dep, msk, mono_alpha, mono_beta, mono_sigma, rng)
        mono = mono.astype(np.float32).astype(np.float64)
        images.append(img)
        depths.append(dep)
        masks.append(msk)
        monos.append(mono)
    half = 1.5 * scene.scale
    bbox = BoundingBox([-half] * 3, [half] * 3)
    return SceneBundle(cams, images, depths, masks, monos, bbox).validate(), scene


def write_bundle(bundle, directory):
    os.makedirs(directory, exist_ok=True)
    write_cameras(os.path.join(directory, "cameras.txt"), bundle.cameras)
    for i in range(bundle.n_views):
        imgio.write_ppm(os.path.join(directory, f"view_{i}.ppm"), bundle.images[i])
        imgio.write_pfm(os.path.join(directory, f"depth_{i}.pfm"), bundle.gt_depths[i])
        imgio.write_pfm(os.path.join(directory, f"mono_{i}.pfm"), bundle.mono_depths[i])
        imgio.write_pgm(os.path.join(directory, f"mask_{i}.pgm"), bundle.gt_masks[i])
    with open(os.path.join(directory, "bbox.txt"), "w") as fh:
        fh.write(" ".join(repr(float(x)) for x in bundle.bbox.lo) + "\n")
        fh.write(" ".join(repr(float(x)) for x in bundle.bbox.hi) + "\n")


def read_bundle(directory):
    cam_path = os.path.join(directory, "cameras.txt")
    cameras = read_cameras(cam_path)
    images, depths, masks, monos = [], [], [], []
    for i, cam in enumerate(cameras):
        img = imgio.read_ppm(os.path.join(directory, f"view_{i}.ppm"))
        dep = imgio.read_pfm(os.path.join(directory, f"depth_{i}.pfm"))
        mono = imgio.read_pfm(os.path.join(directory, f"mono_{i}.pfm"))
        msk = imgio.read_pgm(os.path.join(directory, f"mask_{i}.pgm"))
        expected = (cam.height, cam.width)
        for name, arr, shape in (
            ("view", img, (cam.height, cam.width, 3)),
            ("depth", dep, expected),
            ("mono", mono, expected),
            ("mask", msk, expected),
        ):
            if arr.shape != shape:
                raise ValueError(
                    f"{directory}: {name}_{i} has shape {arr.shape}, camera says {shape}"
                )
        images.append(img)
        depths.append(dep)
        masks.append(msk)
        monos.append(mono)
    bbox_path = os.path.join(directory, "bbox.txt")
    try:
        with open(bbox_path) as fh:
            lo = [float(x) for x in fh.readline().split()]
            hi = [float(x) for x in fh.readline().split()]
    except FileNotFoundError:
        raise FileNotFoundError(f"bounding box file not found: {bbox_path}") from None
    if len(lo) != 3 or len(hi) != 3:
        raise ValueError(f"{bbox_path}: expected two lines of 3 floats")
    return SceneBundle(cameras, images, depths, masks, monos, BoundingBox(lo, hi)).validate()
