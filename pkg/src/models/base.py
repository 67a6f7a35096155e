"""
Shared evaluator for models whose rest vertices and rest joints are affine in
the parameters and which are posed by a single skeleton through LBS
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from src.kinematics.skeleton import (
    KinematicColumns,
    KinematicState,
    PoseVector,
    Skeleton,
    forward_kinematics,
    forward_kinematics_jacobian,
    skin_vertices,
    skin_vertices_jacobian,
)
from src.models.parameters import ParameterLayout, ParameterVector
from src.utils.error_handling import ModelError, dimension_error

REGION_LABELS = {"body": 0, "face": 1, "left_hand": 2, "right_hand": 3}


@dataclass
class ModelEvaluation:
    """Posed vertices and joints, with optional derivatives shaped (..., P)"""

    vertices: np.ndarray
    joints: np.ndarray
    stacked: Optional[np.ndarray] = None
    vertex_jacobian: Optional[np.ndarray] = None
    stacked_jacobian: Optional[np.ndarray] = None
    joint_jacobian: Optional[np.ndarray] = None


@dataclass(frozen=True)
class JointBlock:
    """Parameter block driving consecutive joints starting at `first_joint`"""

    block: str
    first_joint: int


class ArticulatedCore:
    """
    rest vertices X(p) = X0 + dX p, rest joints U(p) = U0 + dU p, then FK + LBS

    Pose blocks fill per-joint rotations, scale blocks per-joint scales, and the
    translation block shifts the root.
    """

    def __init__(
        self,
        layout: ParameterLayout,
        skeleton: Skeleton,
        weights: sp.csr_matrix,
        rest_vertices: np.ndarray,
        vertex_jacobian: np.ndarray,
        rest_joints: np.ndarray,
        joint_jacobian: np.ndarray,
        pose_blocks: Sequence[JointBlock],
        scale_blocks: Sequence[JointBlock] = (),
        translation_block: str = "translation",
    ):
        self.layout = layout
        self.skeleton = skeleton
        self.weights = sp.csr_matrix(weights)
        self.rest_vertices = np.asarray(rest_vertices, dtype=float)
        self.vertex_jacobian = np.asarray(vertex_jacobian, dtype=float)
        self.rest_joints = np.asarray(rest_joints, dtype=float)
        self.joint_jacobian = np.asarray(joint_jacobian, dtype=float)
        self.pose_blocks = tuple(pose_blocks)
        self.scale_blocks = tuple(scale_blocks)
        self.translation_block = translation_block

        n_params = layout.size
        n_joints = skeleton.n_joints
        if self.vertex_jacobian.shape != (len(self.rest_vertices), 3, n_params):
            raise dimension_error(
                ModelError, "rest vertex jacobian", (len(self.rest_vertices), 3, n_params), self.vertex_jacobian.shape
            )
        if self.joint_jacobian.shape != (n_joints, 3, n_params):
            raise dimension_error(ModelError, "rest joint jacobian", (n_joints, 3, n_params), self.joint_jacobian.shape)

        rotation_cols = np.full((n_joints, 3), -1, dtype=np.int64)
        for pb in self.pose_blocks:
            cols = layout.indices(pb.block).reshape(-1, 3)
            rotation_cols[pb.first_joint : pb.first_joint + len(cols)] = cols
        scale_cols = np.full((n_joints, 3), -1, dtype=np.int64)
        for sb in self.scale_blocks:
            cols = layout.indices(sb.block).reshape(-1, 3)
            scale_cols[sb.first_joint : sb.first_joint + len(cols)] = cols
        self.columns = KinematicColumns(rotation_cols, scale_cols, layout.indices(translation_block), n_params)

    def _unpack(self, values: np.ndarray) -> Tuple[PoseVector, np.ndarray]:
        n_joints = self.skeleton.n_joints
        rotations = np.zeros((n_joints, 3))
        has = self.columns.rotation >= 0
        rotations[has] = values[self.columns.rotation[has]]
        scales = np.ones((n_joints, 3))
        has = self.columns.scale >= 0
        scales[has] = values[self.columns.scale[has]]
        return PoseVector(rotations, values[self.columns.translation]), scales

    def rest_state(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        vertices = self.rest_vertices + self.vertex_jacobian @ values
        joints = self.rest_joints + self.joint_jacobian @ values
        return vertices, joints

    def evaluate(self, params: ParameterVector, jacobian: bool = False):
        if params.layout is not self.layout and params.layout != self.layout:
            raise ModelError(message="Parameter layout does not belong to this model", error_code="LAYOUT_MISMATCH")
        values = params.values
        pose, scales = self._unpack(values)
        rest_vertices, rest_joints = self.rest_state(values)
        if not jacobian:
            state = forward_kinematics(self.skeleton, pose, scales, rest_joints)
            return state, skin_vertices(rest_vertices, self.weights, state.skinning), None, None
        state, d_world, d_skinning = forward_kinematics_jacobian(
            self.skeleton, pose, scales, rest_joints, self.joint_jacobian, self.columns
        )
        posed, d_posed = skin_vertices_jacobian(rest_vertices, self.vertex_jacobian, self.weights, state.skinning, d_skinning)
        return state, posed, d_posed, d_world[:, :3, 3, :]

    def kinematic_state(self, params: ParameterVector) -> KinematicState:
        pose, scales = self._unpack(params.values)
        _, rest_joints = self.rest_state(params.values)
        return forward_kinematics(self.skeleton, pose, scales, rest_joints)


def blend_rows(blend: sp.csr_matrix, values: np.ndarray) -> np.ndarray:
    """Apply a sparse (N_out, N_in) matrix to (N_in, ...) arrays"""
    shape = values.shape
    return np.asarray(blend @ values.reshape(shape[0], -1)).reshape((blend.shape[0],) + shape[1:])


def label_mask(labels: np.ndarray, regions: List[str]) -> np.ndarray:
    codes = [REGION_LABELS[name] for name in regions]
    return np.isin(labels, codes)
