"""
Residual blocks of the fitting objective

Each block carries residuals and their Jacobian w.r.t. the full parameter vector.
Costs are plain sums of squared residuals; weights enter as sqrt(weight) factors.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.geometry.mesh import Mesh, OrientedPointCloud, PointCloudIndex, compute_vertex_normals
from src.measurements.frames import MeasurementFrame
from src.models.base import ModelEvaluation
from src.models.parameters import ParameterVector
from src.utils.error_handling import FittingError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)


@dataclass
class ResidualBlock:
    name: str
    residuals: np.ndarray
    jacobian: np.ndarray
    diagnostics: Dict = field(default_factory=dict)

    @property
    def cost(self) -> float:
        return float(self.residuals @ self.residuals)

    @classmethod
    def empty(cls, name: str, n_params: int) -> "ResidualBlock":
        return cls(name, np.zeros(0), np.zeros((0, n_params)))


@dataclass(frozen=True)
class Correspondences:
    """Model vertex j matched to cloud point i, fixed during one inner solve"""

    vertices: np.ndarray
    points: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.vertices)

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass(frozen=True)
class VertexTargets:
    """Per-vertex 3D targets, such as flow-propagated candidates"""

    vertices: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).reshape(-1, 3))
        if len(self.vertices) != len(self.positions):
            raise FittingError(message="Target vertices and positions differ in length", error_code="DIMENSION_MISMATCH")

    def __len__(self) -> int:
        return len(self.vertices)

    def strided(self, stride: int) -> "VertexTargets":
        return VertexTargets(self.vertices[::stride], self.positions[::stride])


def _evaluate(model, params: ParameterVector, evaluation: Optional[ModelEvaluation]) -> ModelEvaluation:
    return evaluation if evaluation is not None else model.evaluate(params, jacobian=True)


def _rows(jacobian: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """(len(vertices) * 3, P) Jacobian rows of the selected vertices"""
    return jacobian[vertices].reshape(-1, jacobian.shape[-1])


def keypoint_residuals(
    params: ParameterVector,
    model,
    frame: MeasurementFrame,
    weight: float = 1.0,
    evaluation: Optional[ModelEvaluation] = None,
) -> ResidualBlock:
    """sqrt(weight) * (J_i V - y_i) for every measured keypoint the regressor knows"""
    regressor = model.keypoint_regressor
    n_params = params.layout.size
    if regressor is None or not frame.keypoints:
        return ResidualBlock.empty("keypoints", n_params)

    rows: List[int] = []
    targets: List[np.ndarray] = []
    unknown: List[str] = []
    for k in frame.keypoints:
        r = regressor.row(k.keypoint_id)
        if r is None:
            unknown.append(k.keypoint_id)
            continue
        rows.append(r)
        targets.append(k.position)
    if unknown:
        logger.debug(f"Frame {frame.frame}: skipping {len(unknown)} keypoints without a regressor row")
    if not rows:
        return ResidualBlock("keypoints", np.zeros(0), np.zeros((0, n_params)), {"unknown": unknown})

    ev = _evaluate(model, params, evaluation)
    J = regressor.matrix[rows]
    scale = np.sqrt(weight)
    predicted = np.asarray(J @ ev.vertices)
    residuals = scale * (predicted - np.stack(targets)).ravel()
    jacobian = scale * np.asarray(J @ ev.vertex_jacobian.reshape(len(ev.vertices), -1)).reshape(len(rows) * 3, n_params)
    return ResidualBlock("keypoints", residuals, jacobian, {"unknown": unknown, "count": len(rows)})


def find_correspondences(
    vertices: np.ndarray,
    triangles: np.ndarray,
    cloud: "OrientedPointCloud | PointCloudIndex",
    max_dist: float,
    max_normal_angle: float,
    exclusion: Optional[np.ndarray] = None,
) -> Correspondences:
    """Closest compatible cloud point for every non-excluded vertex with a valid normal"""
    index = cloud if isinstance(cloud, PointCloudIndex) else PointCloudIndex(cloud)
    if len(index.cloud) == 0:
        return Correspondences.empty()
    normals = compute_vertex_normals(Mesh(vertices, triangles))
    candidates = ~normals.degenerate
    if exclusion is not None:
        candidates &= ~np.asarray(exclusion, dtype=bool)
    query = np.flatnonzero(candidates)
    matches = index.closest_compatible_points(vertices[query], normals.normals[query], max_dist, max_normal_angle)
    found = matches >= 0
    matched = matches[found]
    return Correspondences(query[found], index.cloud.points[matched], index.cloud.normals[matched])


def icp_residuals(
    params: ParameterVector,
    model,
    correspondences: Correspondences,
    weight: float = 1.0,
    evaluation: Optional[ModelEvaluation] = None,
) -> ResidualBlock:
    """Point-to-plane: sqrt(weight) * n_i^T (x_i - v_j) over fixed correspondences"""
    n_params = params.layout.size
    if len(correspondences) == 0:
        return ResidualBlock("icp", np.zeros(0), np.zeros((0, n_params)), {"count": 0})
    ev = _evaluate(model, params, evaluation)
    scale = np.sqrt(weight)
    n = correspondences.normals
    v = ev.vertices[correspondences.vertices]
    residuals = scale * np.einsum("ka,ka->k", n, correspondences.points - v)
    jacobian = -scale * np.einsum("ka,kap->kp", n, ev.vertex_jacobian[correspondences.vertices])
    return ResidualBlock("icp", residuals, jacobian, {"count": len(correspondences)})


def seam_residuals(
    params: ParameterVector,
    model,
    weight: float = 1.0,
    evaluation: Optional[ModelEvaluation] = None,
) -> ResidualBlock:
    """sqrt(weight * w_c) * (ring vertex - barycentric anchor on the posed body), stacked space"""
    n_params = params.layout.size
    stitching = getattr(model, "stitching", None)
    if stitching is None or len(stitching.seams) == 0:
        return ResidualBlock.empty("seam", n_params)
    ev = _evaluate(model, params, evaluation)
    seams = stitching.seams
    corners = seams.anchor_vertices(model.body.triangles)
    scale = np.sqrt(weight * seams.weight)
    gaps = model.seam_gaps(ev.stacked)
    d = ev.stacked_jacobian
    d_anchor = np.einsum("sk,skap->sap", seams.anchor_barycentric, d[corners])
    jacobian = (d[seams.stacked_vertex] - d_anchor) * scale[:, None, None]
    return ResidualBlock("seam", (gaps * scale[:, None]).ravel(), jacobian.reshape(-1, n_params), {"count": len(seams)})


def prior_residuals(params: ParameterVector, weights: Dict[str, float]) -> ResidualBlock:
    """
    weight_kind * (p - prior mean) per regularized, non-frozen parameter

    Pose, shape and expression have mean 0, scales mean 1. Translation and the
    root rotation carry no prior.
    """
    layout = params.layout
    kinds = layout.kinds()
    w = np.array([weights.get(kind, 0.0) for kind in kinds], dtype=float)
    w[list(layout.unregularized)] = 0.0
    w[layout.frozen_mask()] = 0.0
    active = np.flatnonzero(w > 0)
    residuals = w[active] * (params.values[active] - layout.prior_means()[active])
    jacobian = np.zeros((len(active), layout.size))
    jacobian[np.arange(len(active)), active] = w[active]
    return ResidualBlock("prior", residuals, jacobian)


def candidate_residuals(
    params: ParameterVector,
    model,
    targets: VertexTargets,
    weight: float,
    evaluation: Optional[ModelEvaluation] = None,
) -> ResidualBlock:
    """sqrt(weight) * (v_j - c_j) toward propagated candidate positions"""
    n_params = params.layout.size
    if len(targets) == 0:
        return ResidualBlock.empty("candidates", n_params)
    ev = _evaluate(model, params, evaluation)
    scale = np.sqrt(weight)
    residuals = scale * (ev.vertices[targets.vertices] - targets.positions).ravel()
    return ResidualBlock("candidates", residuals, scale * _rows(ev.vertex_jacobian, targets.vertices), {"count": len(targets)})


def stack_blocks(blocks: Sequence[ResidualBlock], n_params: int):
    """Concatenated residuals and Jacobian of several blocks"""
    if not blocks:
        return np.zeros(0), np.zeros((0, n_params))
    return np.concatenate([b.residuals for b in blocks]), np.vstack([b.jacobian for b in blocks])
