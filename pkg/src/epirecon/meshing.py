"""Surface extraction and quantitative evaluation: marching cubes over a
signed distance field, Chamfer distance between point clouds, mesh
sampling, and depth-map error metrics."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .featvol import grid_nodes
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE


@dataclass
class Mesh:
    vertices: np.ndarray   # [V, 3]
    triangles: np.ndarray  # [F, 3] int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("mesh triangle indices out of range")
            same = (
                (self.triangles[:, 0] == self.triangles[:, 1])
                | (self.triangles[:, 1] == self.triangles[:, 2])
                | (self.triangles[:, 0] == self.triangles[:, 2])
            )
            if same.any():
                raise ValueError("mesh contains degenerate triangles")

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def areas(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class DepthMetrics:
    pct_below: dict        # threshold -> percentage of pixels under it
    abs_err: float
    rel_err: float         # percent

    def report_lines(self):
        lines = [f"pct_below_{t:g}: {v:.6f}" for t, v in self.pct_below.items()]
        lines.append(f"abs_err: {self.abs_err:.8g}")
        lines.append(f"rel_err: {self.rel_err:.8g}")
        return lines


def sample_grid_sdf(sdf_fn, bbox, resolution, batch=8192):
    """Evaluate a field on the box grid -> [R, R, R] ndarray."""
    pts = grid_nodes(bbox, resolution)
    vals = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], batch):
        chunk = pts[lo:lo + batch]
        out = sdf_fn(chunk)
        vals[lo:lo + batch] = out.values if hasattr(out, "values") else np.asarray(out)
    return vals.reshape(resolution, resolution, resolution)


def marching_cubes(sdf_fn, bbox, resolution, values=None):
    """Standard 256-case marching cubes with linear edge interpolation.

    ``sdf_fn`` maps [N, 3] points to N signed distances (negative inside);
    precomputed grid ``values`` may be passed instead. Triangles are wound
    so normals point toward positive SDF (outward).
    """
    if resolution < 2:
        raise ValueError("marching_cubes: resolution must be >= 2")
    r = resolution
    if values is None:
        values = sample_grid_sdf(sdf_fn, bbox, r)
    if values.shape != (r, r, r):
        raise ValueError(f"marching_cubes: grid shape {values.shape} != {(r, r, r)}")
    axes = [np.linspace(bbox.lo[k], bbox.hi[k], r) for k in range(3)]

    inside = values < 0.0
    index = np.zeros((r - 1, r - 1, r - 1), dtype=np.int32)
    for ci, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        index |= inside[ox:ox + r - 1, oy:oy + r - 1, oz:oz + r - 1].astype(np.int32) << ci

    cells = np.argwhere((index > 0) & (index < 255))
    verts = []
    vert_ids = {}
    tris = []
    for ix, iy, iz in cells:
        cube = int(index[ix, iy, iz])
        edge_bits = EDGE_TABLE[cube]
        edge_vertex = {}
        for e in range(12):
            if not (edge_bits >> e) & 1:
                continue
            c1, c2 = EDGE_CORNERS[e]
            a = (ix + CORNER_OFFSETS[c1][0], iy + CORNER_OFFSETS[c1][1], iz + CORNER_OFFSETS[c1][2])
            b = (ix + CORNER_OFFSETS[c2][0], iy + CORNER_OFFSETS[c2][1], iz + CORNER_OFFSETS[c2][2])
            key = (a, b) if a <= b else (b, a)
            vid = vert_ids.get(key)
            if vid is None:
                va, vb = values[a], values[b]
                t = 0.5 if va == vb else np.clip(va / (va - vb), 0.0, 1.0)
                pa = np.array([axes[0][a[0]], axes[1][a[1]], axes[2][a[2]]])
                pb = np.array([axes[0][b[0]], axes[1][b[1]], axes[2][b[2]]])
                vid = len(verts)
                verts.append(pa + t * (pb - pa))
                vert_ids[key] = vid
            edge_vertex[e] = vid
        row = TRI_TABLE[cube]
        for k in range(0, len(row), 3):
            # swap two indices: the published table winds CCW seen from the
            # negative side, we want normals toward positive SDF (outward)
            tri = (edge_vertex[row[k]], edge_vertex[row[k + 2]], edge_vertex[row[k + 1]])
            if tri[0] != tri[1] and tri[1] != tri[2] and tri[0] != tri[2]:
                tris.append(tri)
    if not verts:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64))


def chamfer(pred, gt):
    """(accuracy, completeness, mean) over L2 nearest-neighbor distances.

    accuracy: pred -> gt, completeness: gt -> pred; exact neighbors via a
    KD-tree (identical to brute force)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer: point clouds must be non-empty")
    d_pg, _ = cKDTree(gt).query(pred, k=1)
    d_gp, _ = cKDTree(pred).query(gt, k=1)
    acc = float(np.mean(d_pg))
    comp = float(np.mean(d_gp))
    return acc, comp, 0.5 * (acc + comp)


def sample_mesh(mesh, n, rng):
    """n surface points, triangles chosen proportionally to area, uniform
    within each triangle."""
    if mesh.is_empty:
        raise ValueError("sample_mesh: mesh is empty")
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("sample_mesh: zero total surface area")
    choice = rng.choice(len(areas), size=n, p=areas / total)
    a = mesh.vertices[mesh.triangles[choice, 0]]
    b = mesh.vertices[mesh.triangles[choice, 1]]
    c = mesh.vertices[mesh.triangles[choice, 2]]
    u = np.sqrt(rng.random(n))
    v = rng.random(n)
    return (1 - u)[:, None] * a + (u * (1 - v))[:, None] * b + (u * v)[:, None] * c


def depth_metrics(pred, gt, mask, thresholds):
    """Error statistics over masked pixels; thresholds in scene units."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(
            f"depth_metrics: shapes differ pred{pred.shape} gt{gt.shape} mask{mask.shape}"
        )
    if not mask.any():
        raise ValueError("depth_metrics: empty mask")
    if np.any(gt[mask] <= 0.0):
        raise ValueError("depth_metrics: non-positive ground-truth depth under mask")
    err = np.abs(pred[mask] - gt[mask])
    pct = {float(t): 100.0 * float(np.mean(err < t)) for t in thresholds}
    return DepthMetrics(
        pct_below=pct,
        abs_err=float(err.mean()),
        rel_err=100.0 * float(np.mean(err / gt[mask])),
    )


def mesh_euler_characteristic(mesh):
    """V - E + F with edges counted once (diagnostic for closed surfaces)."""
    edges = set()
    for tri in mesh.triangles:
        for i in range(3):
            a, b = int(tri[i]), int(tri[(i + 1) % 3])
            edges.add((a, b) if a < b else (b, a))
    return len(mesh.vertices) - len(edges) + len(mesh.triangles)


def write_obj(path, mesh):
    """ASCII OBJ with v/f records only (1-based indices)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path):
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(
        np.array(verts) if verts else np.zeros((0, 3)),
        np.array(tris, dtype=np.int64) if tris else np.zeros((0, 3), dtype=np.int64),
    )


def write_xyz(path, points):
    with open(path, "w") as fh:
        for p in np.asarray(points).reshape(-1, 3):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def read_xyz(path):
    return np.loadtxt(path, dtype=np.float64).reshape(-1, 3)


def write_report(path, pairs):
    """Flat `key: value` per line metrics report."""
    with open(path, "w") as fh:
        for key, value in pairs:
            fh.write(f"{key}: {value}\n")
