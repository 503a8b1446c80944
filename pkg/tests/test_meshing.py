import numpy as np
import pytest

from epirecon import geometry as geo
from epirecon import meshing as ms

BBOX = geo.BoundingBox([-2, -2, -2], [2, 2, 2])


def sphere_sdf(p):
    return np.linalg.norm(p, axis=-1) - 1.0


def brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return d.min(1).mean(), d.min(0).mean()


class TestMarchingCubes:
    def test_all_positive_empty(self):
        mesh = ms.marching_cubes(lambda p: np.ones(len(p)), BBOX, 8)
        assert mesh.is_empty

    def test_sphere_vertices_near_surface(self):
        mesh = ms.marching_cubes(sphere_sdf, BBOX, 64)
        cell_diag = np.sqrt(3) * 4.0 / 63
        assert np.abs(sphere_sdf(mesh.vertices)).max() < cell_diag

    def test_sphere_euler_characteristic(self):
        mesh = ms.marching_cubes(sphere_sdf, BBOX, 64)
        assert ms.mesh_euler_characteristic(mesh) == 2

    def test_outward_orientation(self):
        mesh = ms.marching_cubes(sphere_sdf, BBOX, 32)
        a = mesh.vertices[mesh.triangles[:, 0]]
        b = mesh.vertices[mesh.triangles[:, 1]]
        c = mesh.vertices[mesh.triangles[:, 2]]
        outward = np.einsum("ij,ij->i", np.cross(b - a, c - a), (a + b + c) / 3.0)
        assert np.all(outward > 0)

    def test_plane_single_sheet(self):
        plane = lambda p: p[:, 2] - 0.17
        mesh = ms.marching_cubes(plane, BBOX, 16)
        cell = 4.0 / 15
        assert np.abs(mesh.vertices[:, 2] - 0.17).max() < cell
        assert not mesh.is_empty

    def test_c1_field_vertex_bound(self):
        # smooth blended field; vertices within sqrt(3) * cell of the level set
        def field(p):
            a = np.linalg.norm(p - [0.4, 0, 0], axis=-1) - 0.8
            b = np.linalg.norm(p + [0.4, 0, 0], axis=-1) - 0.6
            k = 0.3
            h = np.clip(0.5 + 0.5 * (b - a) / k, 0, 1)
            return b + (a - b) * h - k * h * (1 - h)

        r = 24
        mesh = ms.marching_cubes(field, BBOX, r)
        assert np.abs(field(mesh.vertices)).max() <= np.sqrt(3) * (4.0 / (r - 1))

    def test_no_degenerate_triangles(self):
        mesh = ms.marching_cubes(sphere_sdf, BBOX, 24)
        t = mesh.triangles
        assert np.all(t[:, 0] != t[:, 1])
        assert np.all(t[:, 1] != t[:, 2])
        assert np.all(t[:, 0] != t[:, 2])

    def test_resolution_checked(self):
        with pytest.raises(ValueError):
            ms.marching_cubes(sphere_sdf, BBOX, 1)


class TestChamfer:
    def test_identical_clouds(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        assert ms.chamfer(pts, pts) == (0.0, 0.0, 0.0)

    def test_single_points(self):
        assert ms.chamfer([[0, 0, 0]], [[3, 4, 0]]) == (5.0, 5.0, 5.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(500, 3)), rng.normal(size=(400, 3))
        acc, comp, mean = ms.chamfer(a, b)
        bf_acc, bf_comp = brute_chamfer(a, b)
        assert abs(acc - bf_acc) < 1e-12
        assert abs(comp - bf_comp) < 1e-12

    def test_mean_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(100, 3)), rng.normal(size=(120, 3))
        assert abs(ms.chamfer(a, b)[2] - ms.chamfer(b, a)[2]) < 1e-12

    def test_subset_accuracy_zero(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(40, 3))
        b = np.concatenate([a, rng.normal(size=(60, 3))])
        assert ms.chamfer(a, b)[0] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ms.chamfer(np.zeros((0, 3)), np.ones((2, 3)))


class TestSampleMesh:
    def test_single_triangle_barycentric(self):
        mesh = ms.Mesh(np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0.0]]),
                       np.array([[0, 1, 2]]))
        pts = ms.sample_mesh(mesh, 500, np.random.default_rng(4))
        assert np.all(pts[:, 2] == 0.0)
        assert np.all(pts[:, 0] >= -1e-12)
        assert np.all(pts[:, 1] >= -1e-12)
        assert np.all(pts[:, 0] + pts[:, 1] <= 2 + 1e-12)

    def test_area_proportional(self):
        verts = np.array([
            [0, 0, 0], [3, 0, 0], [0, 6, 0],   # area 9
            [10, 0, 0], [11, 0, 0], [10, 2, 0],  # area 1
        ])
        mesh = ms.Mesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = ms.sample_mesh(mesh, 10000, np.random.default_rng(5))
        near_small = np.mean(pts[:, 0] >= 9.0)
        assert abs(near_small * 10000 - 1000) < 300

    def test_deterministic(self):
        mesh = ms.marching_cubes(sphere_sdf, BBOX, 12)
        a = ms.sample_mesh(mesh, 100, np.random.default_rng(6))
        b = ms.sample_mesh(mesh, 100, np.random.default_rng(6))
        assert np.array_equal(a, b)

    def test_empty_mesh_rejected(self):
        empty = ms.Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            ms.sample_mesh(empty, 10, np.random.default_rng(0))


class TestDepthMetrics:
    def test_perfect(self):
        gt = np.full((4, 4), 3.0)
        m = ms.depth_metrics(gt, gt, np.ones((4, 4), bool), (1, 2, 4))
        assert all(v == 100.0 for v in m.pct_below.values())
        assert m.abs_err == 0.0 and m.rel_err == 0.0

    def test_constant_offset(self):
        gt = np.full((4, 4), 10.0)
        m = ms.depth_metrics(gt + 1.5, gt, np.ones((4, 4), bool), (1, 2, 4))
        assert m.pct_below[1.0] == 0.0
        assert m.pct_below[2.0] == 100.0
        assert m.pct_below[4.0] == 100.0
        np.testing.assert_allclose(m.abs_err, 1.5)

    def test_relative_error(self):
        gt = np.full((3, 3), 10.0)
        m = ms.depth_metrics(1.1 * gt, gt, np.ones((3, 3), bool), (1,))
        np.testing.assert_allclose(m.rel_err, 10.0)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(1, 5, (8, 8))
        pred = gt + rng.normal(0, 1.0, (8, 8))
        thresholds = (0.1, 0.5, 1.0, 2.0, 5.0)
        m = ms.depth_metrics(pred, gt, np.ones((8, 8), bool), thresholds)
        vals = [m.pct_below[t] for t in thresholds]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_bad_gt_rejected(self):
        gt = np.zeros((2, 2))
        with pytest.raises(ValueError):
            ms.depth_metrics(gt, gt, np.ones((2, 2), bool), (1,))

    def test_empty_mask_rejected(self):
        gt = np.ones((2, 2))
        with pytest.raises(ValueError):
            ms.depth_metrics(gt, gt, np.zeros((2, 2), bool), (1,))


class TestMeshIO:
    def test_obj_round_trip(self, tmp_path):
        mesh = ms.marching_cubes(sphere_sdf, BBOX, 10)
        path = tmp_path / "m.obj"
        ms.write_obj(path, mesh)
        back = ms.read_obj(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)

    def test_xyz_round_trip(self, tmp_path):
        pts = np.random.default_rng(8).normal(size=(20, 3))
        path = tmp_path / "p.xyz"
        ms.write_xyz(path, pts)
        assert np.array_equal(ms.read_xyz(path), pts)

    def test_report_format(self, tmp_path):
        path = tmp_path / "r.txt"
        ms.write_report(path, [("accuracy", 0.5), ("mean", 1)])
        assert path.read_text() == "accuracy: 0.5\nmean: 1\n"
