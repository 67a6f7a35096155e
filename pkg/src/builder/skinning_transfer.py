"""
Skeleton, skinning weights and joint regressor for Adam derived from the unified model
"""

from typing import Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from src.kinematics.skeleton import Skeleton
from src.models.unified import UnifiedModel

JOINT_NEIGHBORS = 8


def transfer_skinning(model: UnifiedModel) -> Tuple[Skeleton, sp.csr_matrix]:
    """
    Unified skeleton at its rest joints, and per output vertex the C-weighted
    combination of the source part weight rows, renormalized
    """
    return model.skeleton.with_rest_positions(model.rest_joints()), model.output_weights()


def joint_displacement_regressor(
    rest_vertices: np.ndarray, rest_joints: np.ndarray, n_neighbors: int = JOINT_NEIGHBORS
) -> sp.csr_matrix:
    """(J, N) rows of inverse-distance weights over each joint's nearest rest vertices"""
    rest_vertices = np.asarray(rest_vertices, dtype=float)
    k = min(n_neighbors, len(rest_vertices))
    distances, indices = cKDTree(rest_vertices).query(rest_joints, k=k)
    distances = distances.reshape(len(rest_joints), k)
    indices = indices.reshape(len(rest_joints), k)
    weights = 1.0 / (distances + 1e-6)
    weights /= weights.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(len(rest_joints)), k)
    return sp.csr_matrix((weights.ravel(), (rows, indices.ravel())), shape=(len(rest_joints), len(rest_vertices)))


def adam_rest_joints(model: UnifiedModel, regressor: sp.csr_matrix, mean: np.ndarray) -> np.ndarray:
    """U0 = U(0) + R (mean - unified rest vertices)"""
    displacement = np.asarray(mean) - model.rest_mesh().vertices
    return model.rest_joints() + np.asarray(regressor @ displacement)
