"""
Joint hierarchies, forward kinematics, linear blend skinning and unposing

Forward kinematics composes, for each joint j with parent p,

    A_j = A_p . translate(o_j) . Q_j R(theta_j) diag(s_j) Q_j^T

where Q_j is a fixed frame rotation (identity for body joints). The skinning
transform T_j = A_j . translate(-U_j) maps rest-pose points to posed points.
The *_jacobian variants propagate forward-mode derivatives with respect to
arbitrary parameter columns, shaped (..., P).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from src.kinematics.rotations import angle_axis_jacobian, angle_axis_to_matrix, euler_xyz_jacobian, euler_xyz_to_matrix
from src.utils.error_handling import KinematicsError, dimension_error

MAX_INFLUENCES = 8


class RotationType(str, Enum):
    ANGLE_AXIS = "angle-axis"
    EULER_XYZ = "euler-xyz"


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: np.ndarray
    rotation: RotationType = RotationType.ANGLE_AXIS
    scalable: bool = False
    frame: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", RotationType(self.rotation))
        if self.frame is not None:
            object.__setattr__(self, "frame", np.asarray(self.frame, dtype=float).reshape(3, 3))

    def to_dict(self) -> Dict:
        data = {
            "name": self.name,
            "parent": self.parent,
            "offset": self.offset.tolist(),
            "rotation": self.rotation.value,
            "scalable": self.scalable,
        }
        if self.frame is not None:
            data["frame"] = self.frame.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "Joint":
        return cls(
            name=data["name"],
            parent=int(data["parent"]),
            offset=np.asarray(data["offset"]),
            rotation=RotationType(data["rotation"]),
            scalable=bool(data.get("scalable", False)),
            frame=np.asarray(data["frame"]) if data.get("frame") is not None else None,
        )


@dataclass(frozen=True)
class Skeleton:
    """Topologically sorted joint list with exactly one root"""

    joints: Tuple[Joint, ...]
    _index: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        joints = tuple(self.joints)
        object.__setattr__(self, "joints", joints)
        roots = [i for i, joint in enumerate(joints) if joint.parent < 0]
        if len(roots) != 1 or roots[0] != 0:
            raise KinematicsError(
                message="Skeleton must have exactly one root at index 0",
                error_code="INVALID_SKELETON",
                details={"roots": roots},
            )
        for i, joint in enumerate(joints):
            if joint.parent >= i:
                raise KinematicsError(
                    message=f"Joint {joint.name} has parent {joint.parent} not preceding it",
                    error_code="INVALID_SKELETON",
                    details={"joint": i, "parent": joint.parent},
                )
        object.__setattr__(self, "_index", {joint.name: i for i, joint in enumerate(joints)})

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> List[str]:
        return [joint.name for joint in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([joint.parent for joint in self.joints], dtype=np.int64)

    @property
    def scalable_indices(self) -> np.ndarray:
        return np.array([i for i, joint in enumerate(self.joints) if joint.scalable], dtype=np.int64)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KinematicsError(message=f"Unknown joint '{name}'", error_code="UNKNOWN_JOINT")

    def frames(self) -> np.ndarray:
        out = np.repeat(np.eye(3)[None], self.n_joints, axis=0)
        for i, joint in enumerate(self.joints):
            if joint.frame is not None:
                out[i] = joint.frame
        return out

    def rest_positions(self) -> np.ndarray:
        positions = np.zeros((self.n_joints, 3))
        for i, joint in enumerate(self.joints):
            positions[i] = joint.offset if joint.parent < 0 else positions[joint.parent] + joint.offset
        return positions

    def offsets_from_positions(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=float).reshape(self.n_joints, 3)
        parents = self.parents
        offsets = positions.copy()
        offsets[1:] -= positions[parents[1:]]
        return offsets

    def with_rest_positions(self, positions: np.ndarray) -> "Skeleton":
        offsets = self.offsets_from_positions(positions)
        return Skeleton(
            tuple(
                Joint(j.name, j.parent, offsets[i], j.rotation, j.scalable, j.frame) for i, j in enumerate(self.joints)
            )
        )

    def descendants(self, joint: int) -> np.ndarray:
        """The joint itself plus every joint below it"""
        inside = np.zeros(self.n_joints, dtype=bool)
        inside[joint] = True
        for i, j in enumerate(self.joints):
            if j.parent >= 0 and inside[j.parent]:
                inside[i] = True
        return np.flatnonzero(inside)

    def to_dict(self) -> Dict:
        return {"joints": [joint.to_dict() for joint in self.joints]}

    @classmethod
    def from_dict(cls, data: Dict) -> "Skeleton":
        return cls(tuple(Joint.from_dict(j) for j in data["joints"]))


@dataclass
class PoseVector:
    """Per-joint rotation parameters (radians) and a global translation (meters)"""

    rotations: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def zeros(cls, n_joints: int) -> "PoseVector":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rotations.ravel(), self.translation])


def expand_scales(skeleton: Skeleton, scales: Optional[np.ndarray]) -> np.ndarray:
    """Per-joint (J, 3) scales from a ScaleVector over the scalable joints"""
    full = np.ones((skeleton.n_joints, 3))
    if scales is None:
        return full
    scales = np.asarray(scales, dtype=float)
    scalable = skeleton.scalable_indices
    if scales.shape == (skeleton.n_joints, 3):
        full = scales.copy()
        fixed = np.setdiff1d(np.arange(skeleton.n_joints), scalable)
        if not np.allclose(full[fixed], 1.0):
            raise KinematicsError(message="Scale given for a non-scalable joint", error_code="NON_SCALABLE_JOINT")
    elif scales.size == 3 * len(scalable):
        full[scalable] = scales.reshape(-1, 3)
    else:
        raise dimension_error(KinematicsError, "scale vector", (len(scalable), 3), scales.shape)
    if (full <= 0).any():
        raise KinematicsError(
            message="Scale factors must be strictly positive",
            error_code="NONPOSITIVE_SCALE",
            details={"min_scale": float(full.min())},
        )
    return full


def local_rotations(skeleton: Skeleton, rotations: np.ndarray) -> np.ndarray:
    rotations = np.asarray(rotations, dtype=float).reshape(-1, 3)
    if len(rotations) != skeleton.n_joints:
        raise dimension_error(KinematicsError, "pose rotations", (skeleton.n_joints, 3), rotations.shape)
    types = np.array([j.rotation == RotationType.EULER_XYZ for j in skeleton.joints])
    out = np.empty((skeleton.n_joints, 3, 3))
    if (~types).any():
        out[~types] = angle_axis_to_matrix(rotations[~types])
    if types.any():
        out[types] = euler_xyz_to_matrix(rotations[types])
    return out


def local_rotation_jacobians(skeleton: Skeleton, rotations: np.ndarray) -> np.ndarray:
    rotations = np.asarray(rotations, dtype=float).reshape(-1, 3)
    types = np.array([j.rotation == RotationType.EULER_XYZ for j in skeleton.joints])
    out = np.empty((skeleton.n_joints, 3, 3, 3))
    if (~types).any():
        out[~types] = angle_axis_jacobian(rotations[~types])
    if types.any():
        out[types] = euler_xyz_jacobian(rotations[types])
    return out


class KinematicState(NamedTuple):
    world: np.ndarray
    skinning: np.ndarray

    @property
    def joint_positions(self) -> np.ndarray:
        return self.world[:, :3, 3]


def _rest(skeleton: Skeleton, rest_positions: Optional[np.ndarray]) -> np.ndarray:
    if rest_positions is None:
        return skeleton.rest_positions()
    rest_positions = np.asarray(rest_positions, dtype=float)
    if rest_positions.shape != (skeleton.n_joints, 3):
        raise dimension_error(KinematicsError, "rest joint positions", (skeleton.n_joints, 3), rest_positions.shape)
    return rest_positions


def forward_kinematics(
    skeleton: Skeleton,
    pose: PoseVector,
    scales: Optional[np.ndarray] = None,
    rest_positions: Optional[np.ndarray] = None,
) -> KinematicState:
    """Per-joint world transforms A_j and skinning transforms T_j"""
    rest = _rest(skeleton, rest_positions)
    rotations = local_rotations(skeleton, pose.rotations)
    full_scales = expand_scales(skeleton, scales)
    frames = skeleton.frames()
    linear = frames @ (rotations * full_scales[:, None, :]) @ frames.transpose(0, 2, 1)
    offsets = skeleton.offsets_from_positions(rest)
    offsets[0] = rest[0] + pose.translation

    world = np.zeros((skeleton.n_joints, 4, 4))
    for j, joint in enumerate(skeleton.joints):
        local = np.eye(4)
        local[:3, :3] = linear[j]
        local[:3, 3] = offsets[j]
        world[j] = local if joint.parent < 0 else world[joint.parent] @ local
    return KinematicState(world, _skinning_from_world(world, rest))


def _skinning_from_world(world: np.ndarray, rest: np.ndarray) -> np.ndarray:
    skinning = world.copy()
    skinning[:, :3, 3] = world[:, :3, 3] - np.einsum("jab,jb->ja", world[:, :3, :3], rest)
    return skinning


@dataclass(frozen=True)
class KinematicColumns:
    """Parameter column of each kinematic degree of freedom, -1 where it is held fixed"""

    rotation: np.ndarray
    scale: np.ndarray
    translation: np.ndarray
    n_params: int


def forward_kinematics_jacobian(
    skeleton: Skeleton,
    pose: PoseVector,
    scales: Optional[np.ndarray],
    rest_positions: Optional[np.ndarray],
    rest_jacobian: Optional[np.ndarray],
    columns: KinematicColumns,
) -> Tuple[KinematicState, np.ndarray, np.ndarray]:
    """
    Forward kinematics plus derivatives of A_j and T_j, each shaped (J, 4, 4, P)

    `rest_jacobian` is dU/dparams shaped (J, 3, P) for shape-dependent joints.
    """
    n_joints = skeleton.n_joints
    n_params = columns.n_params
    rest = _rest(skeleton, rest_positions)
    rotations = local_rotations(skeleton, pose.rotations)
    d_rotations = local_rotation_jacobians(skeleton, pose.rotations)
    full_scales = expand_scales(skeleton, scales)
    frames = skeleton.frames()
    frames_t = frames.transpose(0, 2, 1)
    scaled = rotations * full_scales[:, None, :]
    linear = frames @ scaled @ frames_t

    offsets = skeleton.offsets_from_positions(rest)
    offsets[0] = rest[0] + pose.translation
    d_offsets = np.zeros((n_joints, 3, n_params))
    if rest_jacobian is not None:
        d_offsets += rest_jacobian
        d_offsets[1:] -= rest_jacobian[skeleton.parents[1:]]
    for axis in range(3):
        col = columns.translation[axis]
        if col >= 0:
            d_offsets[0, axis, col] += 1.0

    world = np.zeros((n_joints, 4, 4))
    d_world = np.zeros((n_joints, 4, 4, n_params))
    for j, joint in enumerate(skeleton.joints):
        local = np.eye(4)
        local[:3, :3] = linear[j]
        local[:3, 3] = offsets[j]
        d_local = np.zeros((4, 4, n_params))
        d_local[:3, 3, :] = d_offsets[j]
        for k in range(3):
            col = columns.rotation[j, k]
            if col >= 0:
                d_local[:3, :3, col] += frames[j] @ (d_rotations[j, k] * full_scales[j][None, :]) @ frames_t[j]
            col = columns.scale[j, k]
            if col >= 0:
                unit = np.zeros((3, 3))
                unit[:, k] = rotations[j][:, k]
                d_local[:3, :3, col] += frames[j] @ unit @ frames_t[j]
        if joint.parent < 0:
            world[j] = local
            d_world[j] = d_local
        else:
            parent = joint.parent
            world[j] = world[parent] @ local
            d_world[j] = np.einsum("abp,bc->acp", d_world[parent], local) + np.einsum("ab,bcp->acp", world[parent], d_local)

    skinning = _skinning_from_world(world, rest)
    d_skinning = d_world.copy()
    d_skinning[:, :3, 3, :] -= np.einsum("jabp,jb->jap", d_world[:, :3, :3, :], rest)
    if rest_jacobian is not None:
        d_skinning[:, :3, 3, :] -= np.einsum("jab,jbp->jap", world[:, :3, :3], rest_jacobian)
    return KinematicState(world, skinning), d_world, d_skinning


def as_weight_matrix(weights, n_vertices: Optional[int] = None) -> sp.csr_matrix:
    matrix = sp.csr_matrix(weights, dtype=float)
    if n_vertices is not None and matrix.shape[0] != n_vertices:
        raise dimension_error(KinematicsError, "skinning weight rows", n_vertices, matrix.shape[0])
    return matrix


def validate_skinning_weights(weights, n_joints: int, tol: float = 1e-6) -> sp.csr_matrix:
    """Check nonnegativity, partition of unity and the influence cap"""
    matrix = as_weight_matrix(weights)
    if matrix.shape[1] != n_joints:
        raise dimension_error(KinematicsError, "skinning weight columns", n_joints, matrix.shape[1])
    if matrix.nnz and matrix.data.min() < 0:
        raise KinematicsError(message="Skinning weights must be nonnegative", error_code="NEGATIVE_WEIGHT")
    sums = np.asarray(matrix.sum(axis=1)).ravel()
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if len(bad):
        raise KinematicsError(
            message=f"{len(bad)} skinning weight rows do not sum to 1",
            error_code="UNNORMALIZED_WEIGHTS",
            details={"rows": bad[:20].tolist()},
        )
    influences = np.diff(matrix.indptr)
    if influences.max(initial=0) > MAX_INFLUENCES:
        raise KinematicsError(
            message=f"A vertex has more than {MAX_INFLUENCES} influences",
            error_code="TOO_MANY_INFLUENCES",
            details={"max_influences": int(influences.max())},
        )
    return matrix


def normalize_weights(weights, max_influences: int = MAX_INFLUENCES) -> sp.csr_matrix:
    """Keep the strongest influences per row and renormalize to a partition of unity"""
    dense = np.asarray(sp.csr_matrix(weights).todense()) if sp.issparse(weights) else np.asarray(weights, dtype=float)
    dense = np.clip(dense, 0.0, None)
    if dense.shape[1] > max_influences:
        order = np.argsort(-dense, axis=1, kind="stable")
        drop = order[:, max_influences:]
        np.put_along_axis(dense, drop, 0.0, axis=1)
    dense[np.abs(dense) < 1e-12] = 0.0
    sums = dense.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        raise KinematicsError(message="Vertex without any skinning influence", error_code="EMPTY_WEIGHT_ROW")
    return sp.csr_matrix(dense / sums)


def blended_transforms(weights, transforms: np.ndarray) -> np.ndarray:
    """Per-vertex blended 3x4 matrices sum_j w_ij T_j"""
    matrix = as_weight_matrix(weights)
    n_joints = transforms.shape[0]
    if matrix.shape[1] != n_joints:
        raise dimension_error(KinematicsError, "transform count", matrix.shape[1], n_joints)
    return np.asarray(matrix @ transforms[:, :3, :].reshape(n_joints, 12)).reshape(-1, 3, 4)


def skin_vertices(rest_vertices: np.ndarray, weights, transforms: np.ndarray) -> np.ndarray:
    """v_i = I_3x4 . sum_j w_ij T_j (v0_i; 1)"""
    rest_vertices = np.asarray(getattr(rest_vertices, "vertices", rest_vertices), dtype=float).reshape(-1, 3)
    matrix = as_weight_matrix(weights, len(rest_vertices))
    sums = np.asarray(matrix.sum(axis=1)).ravel()
    if len(sums) and np.abs(sums - 1.0).max() > 1e-6:
        raise KinematicsError(message="Skinning weights are not normalized", error_code="UNNORMALIZED_WEIGHTS")
    blended = blended_transforms(matrix, transforms)
    return np.einsum("nab,nb->na", blended[:, :, :3], rest_vertices) + blended[:, :, 3]


def skin_vertices_jacobian(
    rest_vertices: np.ndarray,
    rest_jacobian: Optional[np.ndarray],
    weights,
    transforms: np.ndarray,
    d_transforms: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Posed vertices (N, 3) and their derivatives (N, 3, P)"""
    matrix = as_weight_matrix(weights, len(rest_vertices))
    n_joints, _, _, n_params = d_transforms.shape
    blended = blended_transforms(matrix, transforms)
    posed = np.einsum("nab,nb->na", blended[:, :, :3], rest_vertices) + blended[:, :, 3]
    d_blended = np.asarray(matrix @ d_transforms[:, :3, :, :].reshape(n_joints, 12 * n_params)).reshape(
        -1, 3, 4, n_params
    )
    d_posed = np.einsum("nabp,nb->nap", d_blended[:, :, :3, :], rest_vertices) + d_blended[:, :, 3, :]
    if rest_jacobian is not None:
        d_posed += np.einsum("nab,nbp->nap", blended[:, :, :3], rest_jacobian)
    return posed, d_posed


def unpose_vertices(
    posed_vertices: np.ndarray, weights, transforms: np.ndarray, on_singular: str = "raise", cond_limit: float = 1e12
) -> np.ndarray:
    """
    Inverse of skin_vertices with the per-vertex blended transform

    Singular blends raise KinematicsError listing the vertices, or yield NaN rows with on_singular="nan".
    """
    posed_vertices = np.asarray(posed_vertices, dtype=float).reshape(-1, 3)
    blended = blended_transforms(as_weight_matrix(weights, len(posed_vertices)), transforms)
    linear = blended[:, :, :3]
    conditioning = np.linalg.cond(linear)
    singular = ~np.isfinite(conditioning) | (conditioning > cond_limit)
    if singular.any() and on_singular == "raise":
        raise KinematicsError(
            message=f"{int(singular.sum())} vertices have a singular blended transform",
            error_code="SINGULAR_BLEND",
            details={"vertices": np.flatnonzero(singular)[:50].tolist()},
        )
    rest = np.full_like(posed_vertices, np.nan)
    ok = ~singular
    if ok.any():
        rest[ok] = np.linalg.solve(linear[ok], (posed_vertices[ok] - blended[ok, :, 3])[..., None])[..., 0]
    return rest


def transform_points(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return points @ matrix[:3, :3].T + matrix[:3, 3]


def rigid_transform(rotation: np.ndarray, translation: Sequence[float]) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = rotation
    out[:3, 3] = translation
    return out
