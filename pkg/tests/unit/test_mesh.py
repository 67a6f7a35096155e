import numpy as np
import pytest

from src.geometry.mesh import (
    Mesh,
    OrientedPointCloud,
    PointCloudIndex,
    barycentric_project,
    build_laplacian,
    closest_compatible_point,
    compute_vertex_normals,
    point_to_mesh_distances,
)
from src.geometry.mesh_io import read_obj, read_ply, write_obj, write_ply
from src.utils.error_handling import FileOperationError, MeshError

TRIANGLE = Mesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([[0, 1, 2]]))


def test_single_triangle_normals_point_up():
    result = compute_vertex_normals(TRIANGLE)
    assert np.allclose(result.normals, [[0.0, 0.0, 1.0]] * 3), "CCW triangle in z=0 should face +z"
    assert not result.degenerate.any()


def test_cube_corner_normals(cube):
    result = compute_vertex_normals(cube)
    expected = np.sign(cube.vertices) / np.sqrt(3.0)
    assert np.allclose(result.normals, expected, atol=1e-12), "Corner normals should bisect the three incident faces"
    assert np.allclose(np.linalg.norm(result.normals, axis=1), 1.0, atol=1e-9)


def test_isolated_vertex_gets_flagged_zero_normal():
    mesh = Mesh(np.vstack([TRIANGLE.vertices, [[5.0, 5.0, 5.0]]]), TRIANGLE.triangles)
    result = compute_vertex_normals(mesh)
    assert result.degenerate.tolist() == [False, False, False, True]
    assert np.all(result.normals[3] == 0.0)


def test_zero_area_triangle_is_skipped():
    vertices = np.vstack([TRIANGLE.vertices, [[2.0, 0.0, 0.0]]])
    mesh = Mesh(vertices, np.array([[0, 1, 2], [0, 1, 3]]))
    result = compute_vertex_normals(mesh)
    assert result.degenerate[3], "A vertex only touched by a collinear triangle has no area"
    assert np.allclose(result.normals[:3], [[0.0, 0.0, 1.0]] * 3)


def test_invalid_triangle_index_raises():
    with pytest.raises(MeshError) as info:
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    assert info.value.error_code == "INVALID_TRIANGLE_INDEX"


def test_mesh_arrays_are_read_only(cube):
    with pytest.raises(ValueError):
        cube.vertices[0, 0] = 1.0


def test_laplacian_annihilates_constants(grid):
    L = build_laplacian(grid)
    assert np.abs(L @ np.ones(grid.n_vertices)).max() < 1e-12
    assert abs(L - L.T).max() < 1e-12, "Laplacian should be symmetric"
    off_diagonal = L - np.diag(L.diagonal())
    assert off_diagonal.max() <= 0.0, "Off-diagonal entries should be nonpositive"


def test_laplacian_is_zero_on_linear_functions_at_interior_vertices(grid):
    L = build_laplacian(grid)
    f = 2.0 * grid.vertices[:, 0] - 3.0 * grid.vertices[:, 1]
    interior = np.flatnonzero(
        (grid.vertices[:, 0] > 0) & (grid.vertices[:, 0] < 1) & (grid.vertices[:, 1] > 0) & (grid.vertices[:, 1] < 1)
    )
    assert np.abs((L @ f)[interior]).max() < 1e-9


def test_laplacian_clamps_right_angle_cotangent():
    L = build_laplacian(TRIANGLE).toarray()
    # the edge opposite the right angle gets the lower clamp, halved
    assert L[1, 2] == pytest.approx(-0.5e-6)
    assert L[0, 1] == pytest.approx(-0.5)


def test_barycentric_project_centroid_offset():
    centroid = TRIANGLE.vertices.mean(axis=0)
    for delta in (0.0, 0.25, -0.1):
        surface, distance = barycentric_project(centroid + [0.0, 0.0, delta], TRIANGLE)
        assert surface.triangle == 0
        assert np.allclose(surface.barycentric, 1.0 / 3.0)
        assert distance == pytest.approx(abs(delta))


def test_barycentric_project_clamps_to_vertex():
    surface, distance = barycentric_project([-1.0, -1.0, 0.0], TRIANGLE)
    assert np.allclose(surface.barycentric, [1.0, 0.0, 0.0])
    assert distance == pytest.approx(np.sqrt(2.0))


def test_barycentric_project_on_empty_mesh_raises():
    with pytest.raises(MeshError) as info:
        barycentric_project(np.zeros(3), Mesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int)))
    assert info.value.error_code == "EMPTY_MESH"


def _cloud():
    points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.01], [1.0, 0.0, 0.0]])
    normals = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    return OrientedPointCloud(points, normals)


def test_closest_compatible_point_exact_hit():
    found = closest_compatible_point(np.zeros(3), np.array([0.0, 0.0, 1.0]), _cloud(), 0.05, np.deg2rad(60))
    assert found == 0


def test_closest_compatible_point_rejects_far_points():
    query = np.array([1.1, 0.0, 0.0])
    assert closest_compatible_point(query, np.array([0.0, 0.0, 1.0]), _cloud(), 0.05, np.deg2rad(60)) is None
    assert closest_compatible_point(query, np.array([0.0, 0.0, 1.0]), _cloud(), 0.15, np.deg2rad(60)) == 2


def test_closest_compatible_point_rejects_opposite_normals():
    query = np.array([0.0, 0.0, 0.01])
    found = closest_compatible_point(query, np.array([0.0, 0.0, 1.0]), _cloud(), 0.05, np.deg2rad(60))
    assert found == 0, "The coincident point faces away, so the next compatible one wins"
    assert closest_compatible_point(query, np.array([1.0, 0.0, 0.0]), _cloud(), 0.05, np.deg2rad(60)) is None


def test_point_cloud_index_batch_and_empty():
    index = PointCloudIndex(_cloud())
    found = index.closest_compatible_points(
        np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]), np.array([[0.0, 0.0, 1.0]] * 2), 0.05, np.deg2rad(60)
    )
    assert found.tolist() == [0, -1]
    empty = PointCloudIndex(OrientedPointCloud.empty())
    assert empty.closest_compatible_points(np.zeros((2, 3)), np.zeros((2, 3)), 1.0, 1.0).tolist() == [-1, -1]
    assert np.isinf(empty.nearest_distances(np.zeros((1, 3)))).all()


def test_non_unit_cloud_normals_raise():
    with pytest.raises(MeshError) as info:
        OrientedPointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))
    assert info.value.error_code == "NON_UNIT_NORMAL"


def test_point_to_mesh_distances_above_plane(grid):
    rng = np.random.default_rng(3)
    points = np.column_stack([rng.uniform(0.1, 0.9, 20), rng.uniform(0.1, 0.9, 20), rng.uniform(-0.2, 0.2, 20)])
    distances = point_to_mesh_distances(points, grid)
    assert np.allclose(distances, np.abs(points[:, 2]), atol=1e-12)


def test_boundary_loops(cube, grid):
    assert cube.boundary_loops() == [], "A closed mesh has no boundary"
    loops = grid.boundary_loops()
    assert len(loops) == 1
    assert len(loops[0]) == 4 * (6 - 1)


def test_obj_roundtrip_preserves_geometry(tmp_path, cube):
    path = write_obj(cube, tmp_path / "cube.obj", include_normals=True)
    restored = read_obj(path)
    assert np.array_equal(restored.vertices, cube.vertices)
    assert np.array_equal(restored.triangles, cube.triangles)
    assert restored.normals is not None


def test_obj_rejects_quads(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError) as info:
        read_obj(path)
    assert info.value.error_code == "NON_TRIANGLE_FACE"


def test_ply_roundtrip_and_errors(tmp_path):
    cloud = _cloud()
    restored = read_ply(write_ply(cloud, tmp_path / "cloud.ply"))
    assert np.array_equal(restored.points, cloud.points)
    assert np.allclose(restored.normals, cloud.normals)

    bad = tmp_path / "bad.ply"
    bad.write_text("not a ply\n")
    with pytest.raises(FileOperationError) as info:
        read_ply(bad)
    assert info.value.error_code == "INVALID_FORMAT"
    with pytest.raises(FileOperationError):
        read_ply(tmp_path / "missing.ply")
