"""
Single-skeleton, single-shape-space model learned from stitched-model fits
"""

from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp

from src.geometry.mesh import Mesh
from src.kinematics.skeleton import PoseVector, Skeleton, validate_skinning_weights
from src.measurements.keypoints import KeypointRegressor
from src.models.base import ArticulatedCore, JointBlock, ModelEvaluation, label_mask
from src.models.parameters import ParameterBlock, ParameterLayout, ParameterVector
from src.utils.error_handling import ModelError, dimension_error
from src.utils.logging_config import get_logger
from src.utils.serialization import sparse_from_dict, sparse_to_dict

logger = get_logger(__name__)

FROZEN_JOINTS = ("l_wrist", "r_wrist")
ICP_EXCLUDED_REGIONS = ["face", "left_hand", "right_hand"]


class AdamModel:
    """
    v = LBS(v_T0 + S phi + E expr) over the unified skeleton

    The expression basis is zero outside the face region. Rest joints move with
    shape through the joint regressor: U(phi) = U0 + R (S phi).
    """

    def __init__(
        self,
        mean: np.ndarray,
        triangles: np.ndarray,
        shape_basis: np.ndarray,
        expression_basis: np.ndarray,
        skeleton: Skeleton,
        weights: sp.csr_matrix,
        joint_regressor: sp.csr_matrix,
        labels: np.ndarray,
        keypoint_regressor: Optional[KeypointRegressor] = None,
        shape_std: Optional[np.ndarray] = None,
    ):
        self.mean = np.asarray(mean, dtype=float).reshape(-1, 3)
        n_vertices = len(self.mean)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.shape_basis = np.asarray(shape_basis, dtype=float).reshape(n_vertices, 3, -1)
        self.expression_basis = np.asarray(expression_basis, dtype=float).reshape(n_vertices, 3, -1)
        self.skeleton = skeleton
        self.weights = validate_skinning_weights(weights, skeleton.n_joints)
        self.joint_regressor = sp.csr_matrix(joint_regressor, dtype=float)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        self.keypoint_regressor = keypoint_regressor
        self.shape_std = (
            np.ones(self.n_shape) if shape_std is None else np.asarray(shape_std, dtype=float).reshape(self.n_shape)
        )

        if self.weights.shape[0] != n_vertices:
            raise dimension_error(ModelError, "Adam skinning weight rows", n_vertices, self.weights.shape[0])
        if self.joint_regressor.shape != (skeleton.n_joints, n_vertices):
            raise dimension_error(
                ModelError, "Adam joint regressor", (skeleton.n_joints, n_vertices), self.joint_regressor.shape
            )
        if len(self.labels) != n_vertices:
            raise dimension_error(ModelError, "Adam vertex labels", n_vertices, len(self.labels))
        if keypoint_regressor is not None and keypoint_regressor.n_vertices != n_vertices:
            raise ModelError(message="Keypoint regressor does not match the Adam mesh", error_code="DIMENSION_MISMATCH")

        self.layout = self._build_layout()
        n_params = self.layout.size
        vertex_jac = np.zeros((n_vertices, 3, n_params))
        vertex_jac[:, :, self.layout.slice("shape")] = self.shape_basis
        vertex_jac[:, :, self.layout.slice("expression")] = self.expression_basis
        joint_jac = np.zeros((skeleton.n_joints, 3, n_params))
        joint_jac[:, :, self.layout.slice("shape")] = self.joint_shape_jacobian()
        self.core = ArticulatedCore(
            self.layout,
            skeleton,
            self.weights,
            self.mean,
            vertex_jac,
            skeleton.rest_positions(),
            joint_jac,
            pose_blocks=(JointBlock("pose", 0),),
        )

    @property
    def n_vertices(self) -> int:
        return len(self.mean)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    def _build_layout(self) -> ParameterLayout:
        blocks = (
            ParameterBlock("translation", 3, "translation"),
            ParameterBlock("pose", 3 * self.skeleton.n_joints, "pose"),
            ParameterBlock("shape", self.n_shape, "shape"),
            ParameterBlock("expression", self.n_expression, "expression"),
        )
        frozen = []
        for name in FROZEN_JOINTS:
            if name in self.skeleton.names:
                j = self.skeleton.index(name)
                frozen += [3 + 3 * j + k for k in range(3)]
        return ParameterLayout(blocks, tuple(frozen), (0, 1, 2, 3, 4, 5))

    def joint_shape_jacobian(self) -> np.ndarray:
        flat = self.shape_basis.reshape(self.n_vertices, -1)
        return np.asarray(self.joint_regressor @ flat).reshape(self.skeleton.n_joints, 3, self.n_shape)

    def zeros(self) -> ParameterVector:
        return self.layout.zeros()

    def evaluate(self, params: ParameterVector, jacobian: bool = False) -> ModelEvaluation:
        state, posed, d_posed, d_joints = self.core.evaluate(params, jacobian)
        return ModelEvaluation(posed, state.joint_positions, vertex_jacobian=d_posed, joint_jacobian=d_joints)

    def mesh(self, params: ParameterVector) -> Mesh:
        return Mesh(self.evaluate(params).vertices, self.triangles)

    def rest_mesh(self) -> Mesh:
        return Mesh(self.mean, self.triangles)

    def keypoints(self, params: ParameterVector) -> np.ndarray:
        if self.keypoint_regressor is None:
            raise ModelError(message="Model has no keypoint regressor", error_code="MISSING_REGRESSOR")
        return self.keypoint_regressor.predict(self.evaluate(params).vertices)

    def default_icp_exclusion(self) -> np.ndarray:
        return label_mask(self.labels, ICP_EXCLUDED_REGIONS)

    def with_regressor(self, regressor: KeypointRegressor) -> "AdamModel":
        return AdamModel(
            self.mean,
            self.triangles,
            self.shape_basis,
            self.expression_basis,
            self.skeleton,
            self.weights,
            self.joint_regressor,
            self.labels,
            regressor,
            self.shape_std,
        )

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean.tolist(),
            "triangles": self.triangles.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "shape_std": self.shape_std.tolist(),
            "expression_basis": self.expression_basis.tolist(),
            "skeleton": self.skeleton.to_dict(),
            "weights": sparse_to_dict(self.weights),
            "joint_regressor": sparse_to_dict(self.joint_regressor),
            "labels": self.labels.tolist(),
            "keypoint_regressor": self.keypoint_regressor.to_dict() if self.keypoint_regressor is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AdamModel":
        regressor = data.get("keypoint_regressor")
        return cls(
            mean=np.asarray(data["mean"]),
            triangles=np.asarray(data["triangles"]),
            shape_basis=np.asarray(data["shape_basis"]),
            expression_basis=np.asarray(data["expression_basis"]),
            skeleton=Skeleton.from_dict(data["skeleton"]),
            weights=sparse_from_dict(data["weights"]),
            joint_regressor=sparse_from_dict(data["joint_regressor"]),
            labels=np.asarray(data["labels"]),
            keypoint_regressor=KeypointRegressor.from_dict(regressor) if regressor is not None else None,
            shape_std=np.asarray(data["shape_std"]) if data.get("shape_std") is not None else None,
        )


def adam_mesh(
    model: AdamModel,
    pose: PoseVector,
    shape: Optional[np.ndarray] = None,
    expression: Optional[np.ndarray] = None,
    translation: Optional[np.ndarray] = None,
) -> Mesh:
    """Shape and expression displacement, then single-skeleton LBS"""
    if pose.rotations.shape != (model.skeleton.n_joints, 3):
        raise dimension_error(ModelError, "Adam pose", (model.skeleton.n_joints, 3), pose.rotations.shape)
    params = model.zeros().set_block("pose", pose.rotations.ravel())
    params = params.set_block("translation", pose.translation if translation is None else translation)
    if shape is not None:
        shape = np.asarray(shape, dtype=float).reshape(-1)
        if len(shape) != model.n_shape:
            raise dimension_error(ModelError, "Adam shape", model.n_shape, len(shape))
        params = params.set_block("shape", shape)
    if expression is not None:
        expression = np.asarray(expression, dtype=float).reshape(-1)
        if len(expression) != model.n_expression:
            raise dimension_error(ModelError, "Adam expression", model.n_expression, len(expression))
        params = params.set_block("expression", expression)
    return model.mesh(params)
