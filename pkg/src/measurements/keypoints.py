"""
Keypoint id registry and the sparse keypoint-to-mesh regressor
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls

from src.geometry.mesh import Mesh, barycentric_project
from src.utils.error_handling import MeasurementError
from src.utils.logging_config import get_logger
from src.utils.serialization import sparse_from_dict, sparse_to_dict

logger = get_logger(__name__)

MAX_SUPPORT = 20

BODY_KEYPOINTS = (
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "mid_hip",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
    "l_big_toe",
    "l_small_toe",
    "l_foot_ball",
    "r_big_toe",
    "r_small_toe",
    "r_foot_ball",
)
FOOT_KEYPOINTS = ("l_big_toe", "l_small_toe", "l_foot_ball", "r_big_toe", "r_small_toe", "r_foot_ball")
TORSO_KEYPOINTS = ("l_shoulder", "r_shoulder", "l_hip", "r_hip")
HAND_KEYPOINTS = tuple(f"{side}_hand_{i:02d}" for side in ("l", "r") for i in range(21))
FACE_KEYPOINTS = tuple(f"face_{i:02d}" for i in range(70))
BODY_MARKERS = tuple(f"body_marker_{i:02d}" for i in range(64))
HAND_MARKERS = tuple(f"{side}_hand_marker_{i:02d}" for side in ("l", "r") for i in range(32))

KEYPOINT_REGISTRY = BODY_KEYPOINTS + HAND_KEYPOINTS + FACE_KEYPOINTS + BODY_MARKERS + HAND_MARKERS
KEYPOINT_GROUPS = ("body", "foot", "face", "left_hand", "right_hand")


def keypoint_group(keypoint_id: str) -> str:
    """Detection family of a registered id; used for drop rates and diagnostics"""
    if keypoint_id in FOOT_KEYPOINTS:
        return "foot"
    if keypoint_id.startswith("l_hand_"):
        return "left_hand"
    if keypoint_id.startswith("r_hand_"):
        return "right_hand"
    if keypoint_id.startswith("face_"):
        return "face"
    if keypoint_id in BODY_KEYPOINTS or keypoint_id.startswith("body_marker_"):
        return "body"
    raise MeasurementError(message=f"Unregistered keypoint id '{keypoint_id}'", error_code="UNKNOWN_KEYPOINT")


@dataclass(frozen=True)
class KeypointAnchor:
    """A keypoint bound to a joint center or to a surface point/vertex"""

    id: str
    kind: str
    joint: Optional[int] = None
    vertex: Optional[int] = None
    position: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.kind not in ("joint", "surface"):
            raise MeasurementError(message=f"Unknown anchor kind '{self.kind}'", error_code="INVALID_ANCHOR")
        if self.kind == "joint" and self.joint is None:
            raise MeasurementError(message=f"Joint anchor {self.id} needs a joint", error_code="INVALID_ANCHOR")
        if self.kind == "surface" and self.vertex is None and self.position is None:
            raise MeasurementError(message=f"Surface anchor {self.id} needs a vertex or position", error_code="INVALID_ANCHOR")

    def to_dict(self) -> Dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data: Dict) -> "KeypointAnchor":
        position = data.get("position")
        return cls(
            data["id"],
            data["kind"],
            data.get("joint"),
            data.get("vertex"),
            tuple(float(x) for x in position) if position is not None else None,
        )


@dataclass(frozen=True)
class KeypointRegressor:
    """Sparse (C x N) matrix; row r predicts keypoint ids[r] as a convex vertex combination"""

    ids: Tuple[str, ...]
    matrix: sp.csr_matrix
    _rows: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        matrix = sp.csr_matrix(self.matrix, dtype=float)
        matrix.sum_duplicates()
        matrix.sort_indices()
        ids = tuple(self.ids)
        if matrix.shape[0] != len(ids):
            raise MeasurementError(
                message="Regressor row count does not match ids", error_code="DIMENSION_MISMATCH"
            )
        if len(set(ids)) != len(ids):
            raise MeasurementError(message="Duplicate keypoint ids in regressor", error_code="DUPLICATE_KEYPOINT")
        if matrix.nnz and matrix.data.min() < 0:
            raise MeasurementError(message="Regressor weights must be nonnegative", error_code="NEGATIVE_WEIGHT")
        sums = np.asarray(matrix.sum(axis=1)).ravel()
        if len(sums) and np.abs(sums - 1.0).max() > 1e-6:
            raise MeasurementError(message="Regressor rows must sum to 1", error_code="UNNORMALIZED_ROW")
        if np.diff(matrix.indptr).max(initial=0) > MAX_SUPPORT:
            raise MeasurementError(
                message=f"Regressor rows may use at most {MAX_SUPPORT} vertices", error_code="SUPPORT_TOO_LARGE"
            )
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "_rows", {kid: r for r, kid in enumerate(ids)})

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, keypoint_id: str) -> Optional[int]:
        return self._rows.get(keypoint_id)

    def predict(self, vertices: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ np.asarray(vertices).reshape(self.n_vertices, -1)).reshape(
            (len(self.ids),) + np.asarray(vertices).shape[1:]
        )

    def support(self, keypoint_id: str) -> Tuple[np.ndarray, np.ndarray]:
        r = self._rows[keypoint_id]
        lo, hi = self.matrix.indptr[r], self.matrix.indptr[r + 1]
        return self.matrix.indices[lo:hi].copy(), self.matrix.data[lo:hi].copy()

    def with_rows(self, rows: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> "KeypointRegressor":
        """Copy with selected rows replaced by (vertex indices, weights)"""
        lil = self.matrix.tolil()
        for keypoint_id, (indices, weights) in rows.items():
            r = self._rows[keypoint_id]
            lil.rows[r] = []
            lil.data[r] = []
            for index, weight in sorted(zip(np.asarray(indices).tolist(), np.asarray(weights).tolist())):
                if weight > 0:
                    lil[r, index] = weight
        return KeypointRegressor(self.ids, lil.tocsr())

    def to_dict(self) -> Dict:
        return {"ids": list(self.ids), "matrix": sparse_to_dict(self.matrix)}

    @classmethod
    def from_dict(cls, data: Dict) -> "KeypointRegressor":
        return cls(tuple(data["ids"]), sparse_from_dict(data["matrix"]))


def _joint_row(
    vertices: np.ndarray, weights: sp.csc_matrix, joint: int, target: np.ndarray, support_size: int
) -> Tuple[np.ndarray, np.ndarray]:
    column = weights[:, joint].toarray().ravel()
    candidates = np.flatnonzero(column > 0)
    if len(candidates) < 4:
        candidates = np.arange(len(vertices))
    distances = np.linalg.norm(vertices[candidates] - target, axis=1)
    support = candidates[np.lexsort((candidates, distances))[:support_size]]

    initial = column[support] if column[support].sum() > 0 else np.ones(len(support))
    initial = initial / initial.sum()
    best, best_error = initial, np.linalg.norm(initial @ vertices[support] - target)

    rho = 10.0
    A = np.vstack([vertices[support].T, rho * np.ones((1, len(support)))])
    b = np.concatenate([target, [rho]])
    refined, _ = nnls(A, b)
    if refined.sum() > 0:
        refined = refined / refined.sum()
        error = np.linalg.norm(refined @ vertices[support] - target)
        if error < best_error:
            best, best_error = refined, error
    keep = best > 1e-12
    return support[keep], best[keep] / best[keep].sum()


def build_keypoint_regressor(
    rest_mesh: Mesh,
    anchors: Sequence[KeypointAnchor],
    skinning_weights: Optional[sp.spmatrix] = None,
    joint_positions: Optional[np.ndarray] = None,
    support_size: int = MAX_SUPPORT,
) -> Tuple[KeypointRegressor, Dict[str, float]]:
    """
    Regressor rows from joint-center and surface anchors, plus a per-id residual audit

    Joint rows start from a skinning-weighted average over the nearest weighted vertices
    and are refined by NNLS with a sum-to-one row; surface rows are barycentric weights.
    """
    vertices = rest_mesh.vertices
    lower = vertices.min(axis=0) - 1e-6
    upper = vertices.max(axis=0) + 1e-6
    weights = sp.csc_matrix(skinning_weights) if skinning_weights is not None else None

    ids: List[str] = []
    rows, cols, vals = [], [], []
    audit: Dict[str, float] = {}
    for r, anchor in enumerate(anchors):
        if anchor.kind == "joint":
            if weights is None or joint_positions is None:
                raise MeasurementError(
                    message="Joint anchors need skinning weights and joint positions", error_code="INVALID_ANCHOR"
                )
            target = np.asarray(joint_positions[anchor.joint], dtype=float)
        elif anchor.vertex is not None:
            target = vertices[int(anchor.vertex)]
        else:
            target = np.asarray(anchor.position, dtype=float)

        if (target < lower).any() or (target > upper).any():
            raise MeasurementError(
                message=f"Anchor {anchor.id} lies outside the mesh bounding volume",
                error_code="ANCHOR_OUTSIDE_VOLUME",
                details={"id": anchor.id, "position": target.tolist()},
            )

        if anchor.kind == "joint":
            support, w = _joint_row(vertices, weights, anchor.joint, target, support_size)
        elif anchor.vertex is not None:
            support, w = np.array([int(anchor.vertex)]), np.array([1.0])
        else:
            surface, _ = barycentric_project(target, rest_mesh)
            corners = rest_mesh.triangles[surface.triangle]
            merged: Dict[int, float] = {}
            for corner, weight in zip(corners, surface.barycentric):
                if weight > 1e-12:
                    merged[int(corner)] = merged.get(int(corner), 0.0) + float(weight)
            support = np.array(sorted(merged))
            w = np.array([merged[k] for k in sorted(merged)])
            w = w / w.sum()

        ids.append(anchor.id)
        rows += [r] * len(support)
        cols += support.tolist()
        vals += w.tolist()
        audit[anchor.id] = float(np.linalg.norm(w @ vertices[support] - target))

    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(len(ids), rest_mesh.n_vertices))
    worst = max(audit.values()) if audit else 0.0
    logger.info(f"Built keypoint regressor with {len(ids)} rows (max construction residual {worst:.2e} m)")
    return KeypointRegressor(tuple(ids), matrix), audit
