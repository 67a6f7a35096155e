"""
Per-vertex normal displacements that pull a fitted mesh onto its point cloud

The data rows n_i delta_i = p_i - v_i use each matched vertex's closest
compatible cloud point; the smoothness rows W (L N Delta) = 0 damp the field
where W is large.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from src.geometry.mesh import Mesh, OrientedPointCloud, PointCloudIndex, build_laplacian, compute_vertex_normals
from src.models.base import REGION_LABELS
from src.utils.error_handling import ModelBuildError
from src.utils.logging_config import get_logger, log_function_call

logger = get_logger(__name__)

DETAIL_REGION_WEIGHT = 10.0
RIDGE = 1e-12


@dataclass(frozen=True)
class DisplacementField:
    """Signed offsets in meters along each vertex normal; `matched` marks vertices with a data term"""

    values: np.ndarray
    matched: np.ndarray

    def apply(self, mesh: Mesh) -> np.ndarray:
        normals = compute_vertex_normals(mesh).normals
        return mesh.vertices + self.values[:, None] * normals

    def stats(self) -> Dict[str, float]:
        magnitude = np.abs(self.values)
        return {
            "mean_abs": float(magnitude.mean()) if len(magnitude) else 0.0,
            "max_abs": float(magnitude.max()) if len(magnitude) else 0.0,
            "matched_fraction": float(self.matched.mean()) if len(self.matched) else 0.0,
        }


def default_smoothness_weights(labels: np.ndarray, detail_weight: float = DETAIL_REGION_WEIGHT) -> np.ndarray:
    """W = detail_weight on face and hand vertices, 1 elsewhere"""
    labels = np.asarray(labels)
    detail = np.isin(labels, [REGION_LABELS["face"], REGION_LABELS["left_hand"], REGION_LABELS["right_hand"]])
    return np.where(detail, detail_weight, 1.0)


@log_function_call(logger)
def solve_displacements(
    mesh: Mesh,
    cloud: OrientedPointCloud,
    laplacian: Optional[sp.csr_matrix] = None,
    weights: Optional[np.ndarray] = None,
    smoothness: float = 1.0,
    max_dist: float = 0.05,
    max_normal_angle: float = float(np.deg2rad(60.0)),
) -> DisplacementField:
    """Least-squares normal displacement field solved through sparse normal equations"""
    n = mesh.n_vertices
    normals = compute_vertex_normals(mesh)
    L = build_laplacian(mesh) if laplacian is None else sp.csr_matrix(laplacian)
    W = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(n)

    matches = np.full(n, -1, dtype=np.int64)
    valid = np.flatnonzero(~normals.degenerate)
    if len(cloud) and len(valid):
        index = PointCloudIndex(cloud)
        matches[valid] = index.closest_compatible_points(
            mesh.vertices[valid], normals.normals[valid], max_dist, max_normal_angle
        )
    matched = matches >= 0
    if not matched.any():
        raise ModelBuildError(
            message="No vertex has a cloud correspondence; the displacement system is singular",
            error_code="SINGULAR_SYSTEM",
        )

    # N: (3n, n) block-diagonal with the vertex normals
    N = sp.csr_matrix(
        (normals.normals.ravel(), (np.arange(3 * n), np.repeat(np.arange(n), 3))),
        shape=(3 * n, n),
    )
    rows = np.flatnonzero(np.repeat(matched, 3))
    data_matrix = N[rows]
    offsets = (cloud.points[matches[matched]] - mesh.vertices[matched]).ravel()

    smooth_matrix = sp.diags(np.repeat(smoothness * W, 3)) @ sp.kron(L, sp.identity(3), format="csr") @ N
    A = sp.vstack([data_matrix, smooth_matrix]).tocsr()
    normal_matrix = (A.T @ A).tocsc()
    ridge = RIDGE * max(float(normal_matrix.diagonal().max()), 1.0)
    rhs = data_matrix.T @ offsets
    values = spsolve(normal_matrix + ridge * sp.identity(n, format="csc"), rhs)
    if not np.all(np.isfinite(values)):
        raise ModelBuildError(message="Displacement solve produced non-finite values", error_code="SINGULAR_SYSTEM")

    residual = np.linalg.norm(normal_matrix @ values - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if residual > 1e-8:
        logger.warning(f"Displacement normal equations solved to relative residual {residual:.2e}")
    field = DisplacementField(np.asarray(values, dtype=float), matched)
    logger.debug(f"Displacements: {field.stats()}")
    return field
