"""
Generative part models: body, face and hand
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp

from src.geometry.mesh import Mesh
from src.kinematics.skeleton import (
    PoseVector,
    Skeleton,
    expand_scales,
    forward_kinematics,
    skin_vertices,
    transform_points,
    validate_skinning_weights,
)
from src.utils.error_handling import ModelError, dimension_error
from src.utils.serialization import sparse_from_dict, sparse_to_dict

HAND_JOINTS = 16


def _coefficients(values: Optional[np.ndarray], size: int, what: str) -> np.ndarray:
    if values is None:
        return np.zeros(size)
    values = np.asarray(values, dtype=float).reshape(-1)
    if len(values) != size:
        raise dimension_error(ModelError, what, size, len(values))
    return values


def _basis(basis: np.ndarray, n_vertices: int) -> np.ndarray:
    basis = np.asarray(basis, dtype=float)
    if basis.size == 0:
        return np.zeros((n_vertices, 3, 0))
    return basis.reshape(n_vertices, 3, -1)


@dataclass(frozen=True)
class BodyModel:
    """Mean mesh, identity blendshapes, skeleton and skinning weights"""

    mean: np.ndarray
    triangles: np.ndarray
    shape_basis: np.ndarray
    skeleton: Skeleton
    weights: sp.csr_matrix
    joint_regressor: sp.csr_matrix

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "shape_basis", _basis(self.shape_basis, len(mean)))
        object.__setattr__(self, "weights", validate_skinning_weights(self.weights, self.skeleton.n_joints))
        regressor = sp.csr_matrix(self.joint_regressor, dtype=float)
        if regressor.shape != (self.skeleton.n_joints, len(mean)):
            raise dimension_error(ModelError, "body joint regressor", (self.skeleton.n_joints, len(mean)), regressor.shape)
        object.__setattr__(self, "joint_regressor", regressor)

    @property
    def n_vertices(self) -> int:
        return len(self.mean)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    def shape_displacement(self, shape: Optional[np.ndarray]) -> np.ndarray:
        return self.shape_basis @ _coefficients(shape, self.n_shape, "body shape")

    def rest_vertices(self, shape: Optional[np.ndarray] = None) -> np.ndarray:
        return self.mean + self.shape_displacement(shape)

    def joint_shape_jacobian(self) -> np.ndarray:
        """dJ/dshape as (J, 3, K)"""
        flat = self.shape_basis.reshape(self.n_vertices, 3 * self.n_shape)
        return np.asarray(self.joint_regressor @ flat).reshape(self.skeleton.n_joints, 3, self.n_shape)

    def joint_positions(self, shape: Optional[np.ndarray] = None) -> np.ndarray:
        """Rest joints J(shape) = J0 + R_j . (B shape)"""
        coefficients = _coefficients(shape, self.n_shape, "body shape")
        return self.skeleton.rest_positions() + self.joint_shape_jacobian() @ coefficients

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean.tolist(),
            "triangles": self.triangles.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "skeleton": self.skeleton.to_dict(),
            "weights": sparse_to_dict(self.weights),
            "joint_regressor": sparse_to_dict(self.joint_regressor),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "BodyModel":
        return cls(
            mean=np.asarray(data["mean"]),
            triangles=np.asarray(data["triangles"]),
            shape_basis=np.asarray(data["shape_basis"]),
            skeleton=Skeleton.from_dict(data["skeleton"]),
            weights=sparse_from_dict(data["weights"]),
            joint_regressor=sparse_from_dict(data["joint_regressor"]),
        )


@dataclass(frozen=True)
class FaceModel:
    """Mean face with identity and expression bases, in face-model coordinates"""

    mean: np.ndarray
    triangles: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "identity_basis", _basis(self.identity_basis, len(mean)))
        object.__setattr__(self, "expression_basis", _basis(self.expression_basis, len(mean)))

    @property
    def n_vertices(self) -> int:
        return len(self.mean)

    @property
    def n_identity(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    def local_vertices(self, identity: Optional[np.ndarray] = None, expression: Optional[np.ndarray] = None) -> np.ndarray:
        alpha = _coefficients(identity, self.n_identity, "face identity")
        beta = _coefficients(expression, self.n_expression, "face expression")
        return self.mean + self.identity_basis @ alpha + self.expression_basis @ beta

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean.tolist(),
            "triangles": self.triangles.tolist(),
            "identity_basis": self.identity_basis.tolist(),
            "expression_basis": self.expression_basis.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "FaceModel":
        return cls(
            mean=np.asarray(data["mean"]),
            triangles=np.asarray(data["triangles"]),
            identity_basis=np.asarray(data["identity_basis"]),
            expression_basis=np.asarray(data["expression_basis"]),
        )


@dataclass(frozen=True)
class HandModel:
    """Fixed-shape articulated hand in hand-model coordinates"""

    mean: np.ndarray
    triangles: np.ndarray
    skeleton: Skeleton
    weights: sp.csr_matrix
    side: str

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if self.skeleton.n_joints != HAND_JOINTS:
            raise dimension_error(ModelError, "hand joints", HAND_JOINTS, self.skeleton.n_joints)
        if self.side not in ("left", "right"):
            raise ModelError(message=f"Hand side must be left or right, got {self.side}", error_code="INVALID_SIDE")
        object.__setattr__(self, "weights", validate_skinning_weights(self.weights, HAND_JOINTS))

    @property
    def n_vertices(self) -> int:
        return len(self.mean)

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean.tolist(),
            "triangles": self.triangles.tolist(),
            "skeleton": self.skeleton.to_dict(),
            "weights": sparse_to_dict(self.weights),
            "side": self.side,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "HandModel":
        return cls(
            mean=np.asarray(data["mean"]),
            triangles=np.asarray(data["triangles"]),
            skeleton=Skeleton.from_dict(data["skeleton"]),
            weights=sparse_from_dict(data["weights"]),
            side=data["side"],
        )


def body_mesh(
    model: BodyModel, pose: PoseVector, shape: Optional[np.ndarray] = None, translation: Optional[np.ndarray] = None
) -> Mesh:
    """Blendshape-displaced rest mesh posed by FK and linear blend skinning"""
    if pose.rotations.shape != (model.skeleton.n_joints, 3):
        raise dimension_error(ModelError, "body pose", (model.skeleton.n_joints, 3), pose.rotations.shape)
    if translation is not None:
        pose = PoseVector(pose.rotations, translation)
    state = forward_kinematics(model.skeleton, pose, rest_positions=model.joint_positions(shape))
    return Mesh(skin_vertices(model.rest_vertices(shape), model.weights, state.skinning), model.triangles)


def body_transforms(model: BodyModel, pose: PoseVector, shape: Optional[np.ndarray] = None) -> np.ndarray:
    """Body skinning transforms T^B_j, used to attach the face and the hands"""
    return forward_kinematics(model.skeleton, pose, rest_positions=model.joint_positions(shape)).skinning


def face_mesh(
    model: FaceModel,
    identity: Optional[np.ndarray],
    expression: Optional[np.ndarray],
    head_transform: np.ndarray,
    gamma: np.ndarray,
) -> Mesh:
    """v_i = I_3x4 . T_head . Gamma^F . (v_hat_i; 1)"""
    local = model.local_vertices(identity, expression)
    return Mesh(transform_points(np.asarray(head_transform) @ np.asarray(gamma), local), model.triangles)


def hand_mesh(
    model: HandModel,
    angles: Optional[np.ndarray],
    scales: Optional[np.ndarray],
    wrist_transform: np.ndarray,
    gamma: np.ndarray,
) -> Mesh:
    """Hand LBS in hand coordinates, carried to world by T_wrist . Gamma^H"""
    angles = np.zeros((HAND_JOINTS, 3)) if angles is None else np.asarray(angles, dtype=float)
    if angles.size != 3 * HAND_JOINTS:
        raise dimension_error(ModelError, "hand pose", (HAND_JOINTS, 3), angles.shape)
    full_scales = expand_scales(model.skeleton, None if scales is None else np.asarray(scales, dtype=float).reshape(-1, 3))
    state = forward_kinematics(model.skeleton, PoseVector(angles.reshape(HAND_JOINTS, 3)), full_scales)
    local = skin_vertices(model.mean, model.weights, state.skinning)
    return Mesh(transform_points(np.asarray(wrist_transform) @ np.asarray(gamma), local), model.triangles)
