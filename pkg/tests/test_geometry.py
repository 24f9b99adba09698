import numpy as np
import numpy.testing as npt
import pytest

from mvrecon import geometry as geo


def sphere_sdf_grid(n=64, radius=1.0, half_extent=1.2):
    """Analytic sphere SDF sampled on an n^3 cell-centered grid."""
    spacing = 2 * half_extent / n
    origin = np.array([-half_extent] * 3)
    xs = origin[0] + spacing * (np.arange(n) + 0.5)
    X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
    vals = np.sqrt(X**2 + Y**2 + Z**2) - radius
    return geo.ScalarGrid((n, n, n), origin, spacing, vals)


class TestSignedDistance:
    def test_sphere_center(self):
        ico = geo.icosphere(1.0, 4)
        assert geo.signed_distance(ico, (0, 0, 0)) == pytest.approx(-1.0, abs=0.01)

    def test_sphere_outside(self):
        ico = geo.icosphere(1.0, 4)
        assert geo.signed_distance(ico, (2, 0, 0)) == pytest.approx(1.0, abs=0.01)

    def test_on_surface_vertex(self):
        ico = geo.icosphere(1.0, 2)
        v = ico.vertices[17]
        assert abs(geo.signed_distance(ico, v)) < 1e-6

    def test_open_mesh_rejected(self):
        ico = geo.icosphere(1.0, 1)
        open_mesh = geo.TriangleMesh(ico.vertices, ico.faces[:-3])
        with pytest.raises(geo.NotWatertightError):
            geo.signed_distance(open_mesh, (0, 0, 0))

    def test_sign_flips_crossing_surface(self):
        ico = geo.icosphere(0.8, 3)
        rng = np.random.default_rng(7)
        for _ in range(20):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            inside_pt = 0.5 * d
            outside_pt = 1.2 * d
            assert geo.signed_distance(ico, inside_pt) < 0
            assert geo.signed_distance(ico, outside_pt) > 0


class TestSdfGrid:
    def test_sphere_center_value(self):
        sphere = geo.icosphere(0.5, 3)
        grid = geo.mesh_to_sdf_grid(sphere, 32, padding=0.1)
        n = 16
        center_val = grid.values[n, n, n]
        assert center_val == pytest.approx(-0.5, abs=grid.spacing)

    def test_corners_positive(self):
        sphere = geo.icosphere(0.5, 3)
        grid = geo.mesh_to_sdf_grid(sphere, 32, padding=0.1)
        for i in (0, 31):
            for j in (0, 31):
                for k in (0, 31):
                    assert grid.values[i, j, k] > 0

    def test_translation_equivariance(self):
        sphere = geo.icosphere(0.4, 2)
        g1 = geo.mesh_to_sdf_grid(sphere, 24, padding=0.1)
        shift = np.array([g1.spacing, 0.0, 0.0])
        g2 = geo.mesh_to_sdf_grid(sphere.translated(shift), 24, padding=0.1)
        assert g2.spacing == pytest.approx(g1.spacing, rel=1e-12)
        npt.assert_allclose(g2.origin, g1.origin + shift, atol=1e-9)
        npt.assert_allclose(g2.values, g1.values, atol=1e-9)

    def test_matches_pointwise_signed_distance(self):
        sphere = geo.icosphere(0.5, 2, center=(0.03, -0.01, 0.02))
        grid = geo.mesh_to_sdf_grid(sphere, 12, padding=0.15)
        xs = [grid.cell_centers_1d(a) for a in range(3)]
        X, Y, Z = np.meshgrid(*xs, indexing="ij")
        pts = np.stack([X, Y, Z], -1).reshape(-1, 3)
        exact = geo.signed_distances(sphere, pts).reshape(grid.dims)
        # accelerated magnitudes are exact near the surface and within the
        # sample spacing far from it; signs must agree everywhere
        npt.assert_array_equal(np.sign(grid.values), np.sign(exact))
        npt.assert_allclose(grid.values, exact, atol=0.1 * grid.spacing)
        near = np.abs(exact) < 2 * grid.spacing
        npt.assert_allclose(grid.values[near], exact[near], atol=1e-9)


class TestVoxelize:
    def test_cube_interior_full(self):
        cube = geo.box_mesh((0, 0, 0), (1, 1, 1))
        occ = geo.voxelize_occupancy(cube, 8, origin=(0, 0, 0), spacing=1 / 8)
        assert occ.values.min() == 1.0

    def test_sphere_volume_fraction(self):
        sphere = geo.icosphere(0.5, 3, center=(0.5, 0.5, 0.5))
        occ = geo.voxelize_occupancy(sphere, 64, origin=(0, 0, 0), spacing=1 / 64)
        expected = np.pi / 6  # (4/3)pi r^3 with r=0.5 over unit volume
        assert occ.values.mean() == pytest.approx(expected, rel=0.02)

    def test_empty_region(self):
        sphere = geo.icosphere(0.2, 2, center=(0.5, 0.5, 0.5))
        occ = geo.voxelize_occupancy(sphere, 16, origin=(0, 0, 0), spacing=1 / 16)
        assert occ.values[0, 0, 0] == 0.0
        assert occ.values[:2].max() == 0.0

    def test_agrees_with_signed_distance_sign(self):
        mesh = geo.icosphere(0.45, 2, center=(0.52, 0.48, 0.5))
        occ = geo.voxelize_occupancy(mesh, 14, origin=(0, 0, 0), spacing=1 / 14)
        xs = [occ.cell_centers_1d(a) for a in range(3)]
        X, Y, Z = np.meshgrid(*xs, indexing="ij")
        pts = np.stack([X, Y, Z], -1).reshape(-1, 3)
        sd = geo.signed_distances(mesh, pts)
        keep = np.abs(sd) > 1e-6
        npt.assert_array_equal(occ.values.reshape(-1)[keep] == 1.0, sd[keep] < 0)


class TestMarchingCubes:
    def test_sphere_radius(self):
        grid = sphere_sdf_grid(64)
        mesh = geo.marching_cubes(grid, 0.0)
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 1.0).max() < 1.5 * grid.spacing
        assert np.abs(r - 1.0).mean() < 0.5 * grid.spacing

    def test_constant_grid_empty(self):
        grid = geo.ScalarGrid((8, 8, 8), (0, 0, 0), 0.1, np.ones((8, 8, 8)))
        mesh = geo.marching_cubes(grid, 0.5)
        assert mesh.is_empty()

    def test_negation_symmetry(self):
        grid = sphere_sdf_grid(24)
        m1 = geo.marching_cubes(grid, 0.0)
        neg = geo.ScalarGrid(grid.dims, grid.origin, grid.spacing, -grid.values)
        m2 = geo.marching_cubes(neg, 0.0)
        npt.assert_array_equal(m1.vertices, m2.vertices)
        # orientation flips: reversed winding, same undirected faces
        npt.assert_array_equal(np.sort(m1.faces, axis=1), np.sort(m2.faces, axis=1))
        assert not np.array_equal(m1.faces, m2.faces)

    def test_iso_shift_identity(self):
        grid = sphere_sdf_grid(20)
        c = 0.07
        m1 = geo.marching_cubes(grid, c)
        shifted = geo.ScalarGrid(grid.dims, grid.origin, grid.spacing, grid.values - c)
        m2 = geo.marching_cubes(shifted, 0.0)
        npt.assert_allclose(m1.vertices, m2.vertices, atol=1e-12)
        npt.assert_array_equal(m1.faces, m2.faces)

    def test_watertight_and_outward(self):
        grid = sphere_sdf_grid(32)
        mesh = geo.marching_cubes(grid, 0.0)
        assert mesh.is_watertight()
        tri = mesh.triangles()
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6
        assert vol > 0  # outward winding encloses positive volume


class TestVertexNormals:
    def test_flat_quad(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        mesh = geo.compute_vertex_normals(geo.TriangleMesh(verts, faces))
        npt.assert_allclose(mesh.vertex_normals, [[0, 0, 1]] * 4, atol=1e-12)

    def test_icosphere_outward(self):
        ico = geo.compute_vertex_normals(geo.icosphere(1.0, 3))
        radial = ico.vertices / np.linalg.norm(ico.vertices, axis=1, keepdims=True)
        dots = np.einsum("ij,ij->i", ico.vertex_normals, radial)
        assert dots.min() > 0.99

    def test_flip_winding_negates(self):
        ico = geo.icosphere(1.0, 2)
        n1 = geo.compute_vertex_normals(ico).vertex_normals
        flipped = geo.TriangleMesh(ico.vertices, ico.faces[:, ::-1])
        n2 = geo.compute_vertex_normals(flipped).vertex_normals
        npt.assert_allclose(n1, -n2, atol=1e-12)

    def test_unit_length(self):
        ico = geo.compute_vertex_normals(geo.icosphere(0.7, 3))
        npt.assert_allclose(np.linalg.norm(ico.vertex_normals, axis=1), 1.0, atol=1e-5)


class TestIO:
    def test_obj_roundtrip(self, tmp_path):
        mesh = geo.compute_vertex_normals(geo.icosphere(0.5, 1))
        path = tmp_path / "m.obj"
        geo.save_obj(mesh, path)
        back = geo.load_obj(path)
        npt.assert_allclose(back.vertices, mesh.vertices, atol=1e-7)
        npt.assert_array_equal(back.faces, mesh.faces)
        npt.assert_allclose(back.vertex_normals, mesh.vertex_normals, atol=1e-7)

    def test_grid_roundtrip(self, tmp_path):
        grid = sphere_sdf_grid(12)
        path = tmp_path / "g.sgrd"
        geo.save_grid(grid, path)
        back = geo.load_grid(path)
        assert back.dims == grid.dims
        assert back.spacing == pytest.approx(grid.spacing, rel=1e-6)
        npt.assert_allclose(back.values, grid.values, atol=1e-5)

    def test_grid_layout_x_fastest(self, tmp_path):
        vals = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
        grid = geo.ScalarGrid((2, 3, 4), (0, 0, 0), 1.0, vals)
        path = tmp_path / "g.sgrd"
        geo.save_grid(grid, path)
        raw = np.fromfile(path, dtype="<f4", offset=36)
        # x index must vary fastest in the file
        assert raw[0] == vals[0, 0, 0]
        assert raw[1] == vals[1, 0, 0]
        assert raw[2] == vals[0, 1, 0]


class TestMeshDistanceQuery:
    def test_matches_bruteforce(self):
        mesh = geo.icosphere(0.8, 2)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1.2, 1.2, size=(200, 3))
        fast = geo.MeshDistanceQuery(mesh).distances(pts)
        exact = geo.unsigned_distance(mesh, pts)
        npt.assert_allclose(fast, exact, atol=1e-9)
