"""
Triangle mesh kernel: normals, cotangent Laplacian, barycentric projection and
compatible closest-point search over oriented point clouds
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from src.utils.error_handling import MeshError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

COT_MIN = 1e-6
COT_MAX = 1e6


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Mesh:
    """Vertices in meters plus triangles as vertex-index triples"""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError(
                message=f"Triangle index out of range for {len(vertices)} vertices",
                error_code="INVALID_TRIANGLE_INDEX",
                details={"n_vertices": len(vertices), "max_index": int(triangles.max()), "min_index": int(triangles.min())},
            )
        object.__setattr__(self, "vertices", _readonly(vertices))
        object.__setattr__(self, "triangles", _readonly(triangles))
        if self.normals is not None:
            normals = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(normals) != len(vertices):
                raise MeshError(
                    message="Normal count does not match vertex count",
                    error_code="DIMENSION_MISMATCH",
                    details={"n_vertices": len(vertices), "n_normals": len(normals)},
                )
            object.__setattr__(self, "normals", _readonly(normals))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.triangles)

    def with_normals(self) -> "Mesh":
        return Mesh(self.vertices, self.triangles, compute_vertex_normals(self).normals)

    def face_normals(self) -> np.ndarray:
        """Unnormalized face normals, length equals twice the triangle area"""
        v = self.vertices
        t = self.triangles
        return np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])

    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs"""
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    def vertex_adjacency(self) -> sp.csr_matrix:
        e = self.edges()
        n = self.n_vertices
        data = np.ones(2 * len(e))
        adjacency = sp.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)).tocsr()
        adjacency.data[:] = 1.0
        return adjacency

    def neighbors(self, indices: Sequence[int]) -> np.ndarray:
        """Vertices sharing an edge with any of the given vertices"""
        adjacency = self.vertex_adjacency()
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[np.asarray(indices, dtype=int)] = True
        reached = adjacency @ mask.astype(float) > 0
        return np.flatnonzero(reached)

    def boundary_loops(self) -> List[np.ndarray]:
        """Ordered loops of boundary vertices, following triangle orientation"""
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        present = {(int(a), int(b)) for a, b in directed}
        successor: Dict[int, int] = {}
        for a, b in directed:
            a, b = int(a), int(b)
            if (b, a) in present:
                continue
            if a in successor:
                raise MeshError(
                    message=f"Vertex {a} has more than one outgoing boundary edge",
                    error_code="AMBIGUOUS_BOUNDARY",
                    details={"vertex": a},
                )
            successor[a] = b

        loops: List[np.ndarray] = []
        visited = set()
        for start in sorted(successor):
            if start in visited:
                continue
            loop = [start]
            visited.add(start)
            current = successor[start]
            while current != start:
                if current in visited or current not in successor:
                    raise MeshError(
                        message="Boundary edges do not close into a loop",
                        error_code="OPEN_BOUNDARY_LOOP",
                        details={"vertex": current},
                    )
                loop.append(current)
                visited.add(current)
                current = successor[current]
            loops.append(np.array(loop, dtype=np.int64))
        return loops


class VertexNormals(NamedTuple):
    normals: np.ndarray
    degenerate: np.ndarray


def compute_vertex_normals(mesh: Mesh) -> VertexNormals:
    """
    Area-weighted vertex normals

    Vertices without incident area get a zero normal and are flagged in `degenerate`.
    """
    n = mesh.n_vertices
    accumulated = np.zeros((n, 3))
    if mesh.n_triangles:
        face_normals = mesh.face_normals()
        zero_area = np.linalg.norm(face_normals, axis=1) == 0.0
        if zero_area.any():
            logger.debug(f"Skipping {int(zero_area.sum())} zero-area triangles in normal computation")
        for corner in range(3):
            np.add.at(accumulated, mesh.triangles[:, corner], face_normals)

    lengths = np.linalg.norm(accumulated, axis=1)
    degenerate = lengths <= 1e-300
    normals = np.zeros((n, 3))
    normals[~degenerate] = accumulated[~degenerate] / lengths[~degenerate, None]
    if degenerate.any():
        logger.debug(f"{int(degenerate.sum())} vertices have no incident area; zero normals assigned")
    return VertexNormals(normals, degenerate)


def build_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """
    Cotangent Laplacian with L_ij = -(cot a + cot b) / 2 off the diagonal

    Each cotangent is clamped to [COT_MIN, COT_MAX]; zero-area triangles are skipped.
    """
    v = mesh.vertices
    t = mesh.triangles
    n = mesh.n_vertices
    if len(t) and t.max() >= n:
        raise MeshError(message="Triangle references a missing vertex", error_code="INVALID_TRIANGLE_INDEX")

    face_normals = mesh.face_normals()
    double_area = np.linalg.norm(face_normals, axis=1)
    valid = double_area > 0.0
    if (~valid).any():
        logger.debug(f"Laplacian skips {int((~valid).sum())} zero-area triangles")
    t = t[valid]
    double_area = double_area[valid]

    rows, cols, data = [], [], []
    for corner in range(3):
        i = t[:, (corner + 1) % 3]
        j = t[:, (corner + 2) % 3]
        u = v[i] - v[t[:, corner]]
        w = v[j] - v[t[:, corner]]
        cot = np.clip(np.einsum("ij,ij->i", u, w) / double_area, COT_MIN, COT_MAX)
        rows.append(np.minimum(i, j))
        cols.append(np.maximum(i, j))
        data.append(0.5 * cot)

    upper = sp.coo_matrix(
        (np.concatenate(data) if data else np.zeros(0), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    weights = upper + upper.T
    degree = np.asarray(weights.sum(axis=1)).ravel()
    return (sp.diags(degree) - weights).tocsr()


@dataclass(frozen=True)
class SurfacePoint:
    triangle: int
    barycentric: np.ndarray

    def __post_init__(self):
        b = np.clip(np.asarray(self.barycentric, dtype=float).reshape(3), 0.0, 1.0)
        total = b.sum()
        if total <= 0:
            raise MeshError(message="Barycentric coordinates sum to zero", error_code="INVALID_BARYCENTRIC")
        object.__setattr__(self, "barycentric", _readonly(b / total))
        object.__setattr__(self, "triangle", int(self.triangle))

    def position(self, vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
        return self.barycentric @ vertices[triangles[self.triangle]]

    def to_dict(self) -> Dict:
        return {"triangle": self.triangle, "barycentric": self.barycentric.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "SurfacePoint":
        return cls(data["triangle"], np.asarray(data["barycentric"]))


def closest_points_on_triangles(point: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (M, 3) of the closest point of each triangle to `point`"""
    ab = b - a
    ac = c - a
    ap = point - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = point - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = point - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        bary = np.stack([1.0 - v_in - w_in, v_in, w_in], axis=1)

        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        region = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        bary[region] = np.stack([np.zeros_like(w_bc), 1.0 - w_bc, w_bc], axis=1)[region]

        w_ac = d2 / (d2 - d6)
        region = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        bary[region] = np.stack([1.0 - w_ac, np.zeros_like(w_ac), w_ac], axis=1)[region]

        region = (d6 >= 0) & (d5 <= d6)
        bary[region] = (0.0, 0.0, 1.0)

        v_ab = d1 / (d1 - d3)
        region = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        bary[region] = np.stack([1.0 - v_ab, v_ab, np.zeros_like(v_ab)], axis=1)[region]

        region = (d3 >= 0) & (d4 <= d3)
        bary[region] = (0.0, 1.0, 0.0)

        region = (d1 <= 0) & (d2 <= 0)
        bary[region] = (1.0, 0.0, 0.0)

    return bary


def barycentric_project(point: np.ndarray, mesh: Mesh, candidates: Optional[np.ndarray] = None) -> Tuple[SurfacePoint, float]:
    """
    Closest point on the mesh surface as (SurfacePoint, distance)

    `candidates` optionally restricts the search to a subset of triangle indices.
    """
    if mesh.n_triangles == 0:
        raise MeshError(message="Cannot project onto a mesh without triangles", error_code="EMPTY_MESH")
    point = np.asarray(point, dtype=float).reshape(3)
    tri_index = np.arange(mesh.n_triangles) if candidates is None else np.asarray(candidates, dtype=np.int64)
    tri = mesh.triangles[tri_index]
    a, b, c = (mesh.vertices[tri[:, k]] for k in range(3))
    bary = closest_points_on_triangles(point, a, b, c)
    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    distances = np.linalg.norm(closest - point, axis=1)
    distances[~np.isfinite(distances)] = np.inf
    best = int(np.argmin(distances))
    if not np.isfinite(distances[best]):
        raise MeshError(message="Every candidate triangle is degenerate", error_code="DEGENERATE_MESH")
    return SurfacePoint(int(tri_index[best]), bary[best]), float(distances[best])


@dataclass(frozen=True)
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 3)
        normals = np.array(self.normals, dtype=float).reshape(-1, 3)
        if len(points) != len(normals):
            raise MeshError(
                message="Point and normal counts differ",
                error_code="DIMENSION_MISMATCH",
                details={"points": len(points), "normals": len(normals)},
            )
        if len(normals) and np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > 1e-6:
            raise MeshError(message="Point cloud normals must be unit length", error_code="NON_UNIT_NORMAL")
        object.__setattr__(self, "points", _readonly(points))
        object.__setattr__(self, "normals", _readonly(normals))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "OrientedPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass(frozen=True)
class PointCloudIndex:
    """k-d tree over an oriented cloud; read-only after construction"""

    cloud: OrientedPointCloud
    tree: Optional[cKDTree] = field(default=None, compare=False)

    def __post_init__(self):
        if self.tree is None and len(self.cloud):
            object.__setattr__(self, "tree", cKDTree(self.cloud.points))

    def closest_compatible_points(
        self, points: np.ndarray, normals: np.ndarray, max_dist: float, max_normal_angle: float
    ) -> np.ndarray:
        """
        Index of the nearest compatible cloud point per query, -1 where none passes

        Ties are broken by distance, then by the lowest cloud index.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        result = np.full(len(points), -1, dtype=np.int64)
        if self.tree is None or len(points) == 0:
            return result

        cos_limit = np.cos(max_normal_angle) - 1e-12
        neighborhoods = self.tree.query_ball_point(points, r=max_dist)
        for q, candidates in enumerate(neighborhoods):
            if not candidates:
                continue
            idx = np.asarray(candidates, dtype=np.int64)
            compatible = self.cloud.normals[idx] @ normals[q] >= cos_limit
            if not compatible.any():
                continue
            idx = idx[compatible]
            dist = np.linalg.norm(self.cloud.points[idx] - points[q], axis=1)
            keep = dist <= max_dist
            if not keep.any():
                continue
            idx, dist = idx[keep], dist[keep]
            result[q] = idx[np.lexsort((idx, dist))[0]]
        return result

    def nearest_distances(self, points: np.ndarray) -> np.ndarray:
        """Unconstrained nearest-point distance per query (inf for an empty cloud)"""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.tree is None:
            return np.full(len(points), np.inf)
        distances, _ = self.tree.query(points)
        return distances


def closest_compatible_point(
    query_point: np.ndarray,
    query_normal: np.ndarray,
    cloud: "OrientedPointCloud | PointCloudIndex",
    max_dist: float,
    max_normal_angle: float,
) -> Optional[int]:
    index = cloud if isinstance(cloud, PointCloudIndex) else PointCloudIndex(cloud)
    found = index.closest_compatible_points(query_point, query_normal, max_dist, max_normal_angle)[0]
    return None if found < 0 else int(found)


def point_to_mesh_distances(points: np.ndarray, mesh: Mesh, n_neighbors: int = 8) -> np.ndarray:
    """
    Distance from each point to the mesh surface

    The search is restricted to triangles incident to the point's nearest
    `n_neighbors` vertices, which is exact for well-sampled surfaces.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if mesh.n_triangles == 0:
        raise MeshError(message="Cannot measure distances to a mesh without triangles", error_code="EMPTY_MESH")
    k = min(n_neighbors, mesh.n_vertices)
    _, nearest = cKDTree(mesh.vertices).query(points, k=k)
    nearest = np.asarray(nearest).reshape(len(points), k)

    incidence = sp.csr_matrix(
        (np.ones(3 * mesh.n_triangles), (mesh.triangles.ravel(), np.repeat(np.arange(mesh.n_triangles), 3))),
        shape=(mesh.n_vertices, mesh.n_triangles),
    )
    distances = np.empty(len(points))
    for q, point in enumerate(points):
        candidates = np.unique(incidence[nearest[q]].indices)
        tri = mesh.triangles[candidates]
        a, b, c = (mesh.vertices[tri[:, j]] for j in range(3))
        bary = closest_points_on_triangles(point, a, b, c)
        closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
        d = np.linalg.norm(closest - point, axis=1)
        d[~np.isfinite(d)] = np.inf
        distances[q] = min(d.min(), np.linalg.norm(mesh.vertices[nearest[q, 0]] - point))
    return distances
