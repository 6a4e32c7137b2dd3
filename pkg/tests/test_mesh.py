import numpy as np
import pytest

from voxfuse.mesh import (
    TriangleMesh,
    marching_cubes_field,
    read_ply_mesh,
    write_ply_mesh,
)


def sphere_lattice(radius=0.5, spacing=0.02, pad=0.1):
    half = radius + pad
    n = int(round(2 * half / spacing)) + 1
    coords = -half + spacing * np.arange(n)
    x, y, z = np.meshgrid(coords, coords, coords, indexing="ij")
    dist = np.sqrt(x * x + y * y + z * z)
    return dist, np.array([-half, -half, -half]), spacing


def test_empty_on_uniform_field():
    values = np.zeros((5, 5, 5))
    mesh = marching_cubes_field(values, 0.5, np.zeros(3), 0.1)
    assert mesh.is_empty()


def test_sphere_area_and_volume_within_two_percent():
    # analytic sphere field sampled on the lattice (smooth across the level set)
    dist, origin, spacing = sphere_lattice()
    mesh = marching_cubes_field(dist - 0.5, 0.0, origin, spacing, inside="below")
    r = 0.5
    assert abs(mesh.area() - 4 * np.pi * r ** 2) / (4 * np.pi * r ** 2) < 0.02
    assert abs(abs(mesh.signed_volume()) - 4 / 3 * np.pi * r ** 3) / (4 / 3 * np.pi * r ** 3) < 0.02


def test_binary_sphere_volume_within_two_percent():
    # a hard 0/1 occupancy field keeps volume but staircases the area,
    # so only volume and vertex placement are asserted here
    dist, origin, spacing = sphere_lattice()
    occ = (dist <= 0.5).astype(np.float64)
    mesh = marching_cubes_field(occ, 0.5, origin, spacing, inside="above")
    vol = abs(mesh.signed_volume())
    assert abs(vol - 4 / 3 * np.pi * 0.5 ** 3) / (4 / 3 * np.pi * 0.5 ** 3) < 0.02
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(radii - 0.5)) <= spacing


def test_sphere_sdf_surface_accuracy():
    dist, origin, spacing = sphere_lattice()
    mesh = marching_cubes_field(dist - 0.5, 0.0, origin, spacing, inside="below")
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(radii - 0.5)) < spacing


def test_single_corner_case_yields_one_triangle():
    values = np.zeros((2, 2, 2))
    values[0, 1, 0] = 1.0  # corner 0 of the standard numbering
    mesh = marching_cubes_field(values, 0.5, np.zeros(3), 1.0, inside="above")
    assert mesh.n_triangles == 1
    # the triangle cuts the three edges incident to that corner at midpoints
    expected = {(0.5, 1.0, 0.0), (0.0, 0.5, 0.0), (0.0, 1.0, 0.5)}
    got = {tuple(np.round(v, 6)) for v in mesh.vertices}
    assert got == expected


def test_every_single_corner_config_yields_one_triangle():
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                values = np.zeros((2, 2, 2))
                values[a, b, c] = 1.0
                mesh = marching_cubes_field(values, 0.5, np.zeros(3), 1.0, inside="above")
                assert mesh.n_triangles == 1


def test_unknown_cells_are_skipped():
    dist, origin, spacing = sphere_lattice(spacing=0.05)
    known = np.ones(dist.shape, dtype=bool)
    known[: dist.shape[0] // 2] = False  # half the lattice unobserved
    mesh = marching_cubes_field(dist - 0.5, 0.0, origin, spacing, known=known)
    full = marching_cubes_field(dist - 0.5, 0.0, origin, spacing)
    assert 0 < mesh.n_triangles < full.n_triangles
    # no vertex may fall strictly inside the unknown half
    boundary_x = origin[0] + (dist.shape[0] // 2) * spacing
    assert mesh.vertices[:, 0].min() >= boundary_x - spacing - 1e-9


def test_vertices_stay_within_lattice_box():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(6, 6, 6))
    mesh = marching_cubes_field(values, 0.1, np.array([1.0, 2.0, 3.0]), 0.5)
    lo = np.array([1.0, 2.0, 3.0]) - 1e-9
    hi = lo + 0.5 * 5 + 2e-9
    assert np.all(mesh.vertices >= lo) and np.all(mesh.vertices <= hi)


def test_mesh_concatenate_and_validation():
    tri = TriangleMesh(np.eye(3), [[0, 1, 2]])
    both = TriangleMesh.concatenate([tri, tri])
    assert both.n_triangles == 2 and len(both.vertices) == 6
    with pytest.raises(ValueError, match="out of range"):
        TriangleMesh(np.eye(3), [[0, 1, 5]])


def test_ply_roundtrip_binary_and_ascii(tmp_path):
    rng = np.random.default_rng(1)
    verts = rng.normal(size=(12, 3))
    tris = rng.integers(0, 12, size=(7, 3))
    mesh = TriangleMesh(verts, tris)
    for binary in (True, False):
        path = tmp_path / f"mesh_{binary}.ply"
        write_ply_mesh(path, mesh, binary=binary)
        back = read_ply_mesh(path)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert np.max(np.abs(back.vertices - mesh.vertices)) < 1e-5
