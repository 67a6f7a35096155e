"""
Stitched body + face + hands model with per-part parameter blocks

All parts are posed through one 53-joint skeleton: the 21 body joints, then the
16 left-hand and 16 right-hand joints hanging off the body wrists. Hand joints
keep their Euler parameterization in hand coordinates through the joint frame
Q = rotation of the hand's rest alignment. The body wrists are frozen and each
hand root takes over their rotation, so body vertices skinned to a wrist follow
that hand's root. The face is rigidly attached to the head joint. The stacked
vertices (body, face, left, right) are affine in the parameters at rest, and the
output mesh is C . stacked.
"""

from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from src.geometry.mesh import Mesh
from src.kinematics.skeleton import (
    Joint,
    PoseVector,
    Skeleton,
    expand_scales,
    forward_kinematics,
    normalize_weights,
    skin_vertices,
    transform_points,
)
from src.measurements.keypoints import KeypointAnchor, KeypointRegressor, build_keypoint_regressor
from src.models.base import ArticulatedCore, JointBlock, ModelEvaluation, blend_rows, label_mask
from src.models.parameters import ParameterBlock, ParameterLayout, ParameterVector
from src.models.part_models import HAND_JOINTS, BodyModel, FaceModel, HandModel, body_transforms, face_mesh, hand_mesh
from src.models.stitching import PARTS, PartAnnotation, Stitching, build_stitching, place_part
from src.utils.error_handling import ModelError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

ATTACH_JOINTS = {"face": "head", "left_hand": "l_wrist", "right_hand": "r_wrist"}
HAND_PARTS = ("left_hand", "right_hand")
ICP_EXCLUDED_REGIONS = ["face", "left_hand", "right_hand"]


def _check_rigid(name: str, gamma: np.ndarray) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float).reshape(4, 4)
    rotation = gamma[:3, :3]
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9) or np.linalg.det(rotation) <= 0:
        raise ModelError(message=f"Rest alignment of {name} is not a rigid transform", error_code="INVALID_ALIGNMENT")
    return gamma


class UnifiedModel:
    """Stitched model: part models, rest alignments, stitching and keypoint regressor"""

    def __init__(
        self,
        body: BodyModel,
        face: FaceModel,
        left_hand: HandModel,
        right_hand: HandModel,
        rest_alignment: Mapping[str, np.ndarray],
        stitching: Stitching,
        annotations: Mapping[str, PartAnnotation],
        keypoint_regressor: Optional[KeypointRegressor] = None,
    ):
        if left_hand.side != "left" or right_hand.side != "right":
            raise ModelError(message="Hand models are passed in the wrong order", error_code="INVALID_SIDE")
        self.body = body
        self.face = face
        self.hands = {"left_hand": left_hand, "right_hand": right_hand}
        self.rest_alignment = {name: _check_rigid(name, rest_alignment[name]) for name in PARTS[1:]}
        self.stitching = stitching
        self.annotations = dict(annotations)
        self.keypoint_regressor = keypoint_regressor
        self.attach = {name: body.skeleton.index(joint) for name, joint in ATTACH_JOINTS.items()}

        sizes = [body.n_vertices, face.n_vertices, left_hand.n_vertices, right_hand.n_vertices]
        if stitching.n_stacked != sum(sizes):
            raise ModelError(
                message="Stitching does not match the part vertex counts",
                error_code="DIMENSION_MISMATCH",
                details={"stacked": stitching.n_stacked, "parts": sizes},
            )
        if keypoint_regressor is not None and keypoint_regressor.n_vertices != stitching.n_output:
            raise ModelError(message="Keypoint regressor does not match the output mesh", error_code="DIMENSION_MISMATCH")

        self.layout = self._build_layout()
        self.skeleton = self._build_skeleton()
        self.core = ArticulatedCore(
            self.layout,
            self.skeleton,
            self.stacked_weights(),
            *self._rest_constants(),
            pose_blocks=(
                JointBlock("body_pose", 0),
                JointBlock("left_hand_pose", self.hand_offset("left_hand")),
                JointBlock("right_hand_pose", self.hand_offset("right_hand")),
            ),
            scale_blocks=(
                JointBlock("left_hand_scale", self.hand_offset("left_hand")),
                JointBlock("right_hand_scale", self.hand_offset("right_hand")),
            ),
        )

    @property
    def n_body_joints(self) -> int:
        return self.body.skeleton.n_joints

    def hand_offset(self, part: str) -> int:
        return self.n_body_joints + (0 if part == "left_hand" else HAND_JOINTS)

    @property
    def n_vertices(self) -> int:
        return self.stitching.n_output

    @property
    def triangles(self) -> np.ndarray:
        return self.stitching.triangles

    def _build_layout(self) -> ParameterLayout:
        n_body = self.n_body_joints
        blocks = (
            ParameterBlock("translation", 3, "translation"),
            ParameterBlock("body_pose", 3 * n_body, "pose"),
            ParameterBlock("body_shape", self.body.n_shape, "shape"),
            ParameterBlock("face_identity", self.face.n_identity, "shape"),
            ParameterBlock("face_expression", self.face.n_expression, "expression"),
            ParameterBlock("left_hand_pose", 3 * HAND_JOINTS, "pose"),
            ParameterBlock("right_hand_pose", 3 * HAND_JOINTS, "pose"),
            ParameterBlock("left_hand_scale", 3 * HAND_JOINTS, "scale", prior_mean=1.0),
            ParameterBlock("right_hand_scale", 3 * HAND_JOINTS, "scale", prior_mean=1.0),
        )
        probe = ParameterLayout(blocks)
        body_pose = probe.indices("body_pose")
        frozen = [body_pose[3 * self.attach[part] + k] for part in HAND_PARTS for k in range(3)]
        for part in HAND_PARTS:
            scale = probe.indices(f"{part}_scale").reshape(HAND_JOINTS, 3)
            fixed = np.setdiff1d(np.arange(HAND_JOINTS), self.hands[part].skeleton.scalable_indices)
            frozen += scale[fixed].ravel().tolist()
        unregularized = probe.indices("translation").tolist() + body_pose[:3].tolist()
        return ParameterLayout(blocks, tuple(int(i) for i in frozen), tuple(unregularized))

    def _build_skeleton(self) -> Skeleton:
        joints = [
            Joint(j.name, j.parent, j.offset, j.rotation, False, j.frame) for j in self.body.skeleton.joints
        ]
        for part in HAND_PARTS:
            hand = self.hands[part].skeleton
            first = len(joints)
            frame = self.rest_alignment[part][:3, :3]
            for j in hand.joints:
                parent = self.attach[part] if j.parent < 0 else first + j.parent
                joint_frame = frame if j.frame is None else frame @ j.frame
                joints.append(Joint(f"{part}:{j.name}", parent, np.zeros(3), j.rotation, j.scalable, joint_frame))
        skeleton = Skeleton(tuple(joints))
        return skeleton.with_rest_positions(self._rest_joint_positions())

    def _rest_joint_positions(self) -> np.ndarray:
        positions = [self.body.skeleton.rest_positions()]
        for part in HAND_PARTS:
            positions.append(transform_points(self.rest_alignment[part], self.hands[part].skeleton.rest_positions()))
        return np.concatenate(positions)

    def _rest_constants(self):
        """X0, dX, U0, dU for the stacked vertices and unified joints"""
        layout = self.layout
        n_params = layout.size
        shape_cols = layout.slice("body_shape")
        vertex_jac_shape = self.body.joint_shape_jacobian()

        rest_vertices = [self.body.mean]
        body_jac = np.zeros((self.body.n_vertices, 3, n_params))
        body_jac[:, :, shape_cols] = self.body.shape_basis
        jacobians = [body_jac]

        gamma_face = self.rest_alignment["face"]
        rotation = gamma_face[:3, :3]
        rest_vertices.append(transform_points(gamma_face, self.face.mean))
        face_jac = np.zeros((self.face.n_vertices, 3, n_params))
        face_jac[:, :, layout.slice("face_identity")] = np.einsum("ab,nbk->nak", rotation, self.face.identity_basis)
        face_jac[:, :, layout.slice("face_expression")] = np.einsum("ab,nbk->nak", rotation, self.face.expression_basis)
        face_jac[:, :, shape_cols] = vertex_jac_shape[self.attach["face"]][None]
        jacobians.append(face_jac)

        joint_jac = np.zeros((self.skeleton_size, 3, n_params))
        joint_jac[: self.n_body_joints, :, shape_cols] = vertex_jac_shape
        for part in HAND_PARTS:
            hand = self.hands[part]
            rest_vertices.append(transform_points(self.rest_alignment[part], hand.mean))
            hand_jac = np.zeros((hand.n_vertices, 3, n_params))
            hand_jac[:, :, shape_cols] = vertex_jac_shape[self.attach[part]][None]
            jacobians.append(hand_jac)
            first = self.hand_offset(part)
            joint_jac[first : first + HAND_JOINTS, :, shape_cols] = vertex_jac_shape[self.attach[part]][None]

        return (
            np.concatenate(rest_vertices),
            np.concatenate(jacobians),
            self._rest_joint_positions(),
            joint_jac,
        )

    @property
    def skeleton_size(self) -> int:
        return self.n_body_joints + 2 * HAND_JOINTS

    def body_joint_columns(self) -> np.ndarray:
        """Unified joint carrying each body joint's vertices; wrist vertices ride on the hand roots"""
        columns = np.arange(self.n_body_joints)
        for part in HAND_PARTS:
            columns[self.attach[part]] = self.hand_offset(part)
        return columns

    def stacked_weights(self) -> sp.csr_matrix:
        """Skinning weights of the stacked vertices over the unified joints"""
        n_joints = self.skeleton_size
        weights = sp.csr_matrix(self.body.weights)
        body = sp.csr_matrix(
            (weights.data, self.body_joint_columns()[weights.indices], weights.indptr),
            shape=(self.body.n_vertices, n_joints),
        )
        n_face = self.face.n_vertices
        face = sp.csr_matrix(
            (np.ones(n_face), (np.arange(n_face), np.full(n_face, self.attach["face"]))),
            shape=(n_face, n_joints),
        )
        blocks = [body, face]
        for part in HAND_PARTS:
            hand = self.hands[part]
            first = self.hand_offset(part)
            blocks.append(
                sp.hstack(
                    [
                        sp.csr_matrix((hand.n_vertices, first)),
                        hand.weights,
                        sp.csr_matrix((hand.n_vertices, n_joints - first - HAND_JOINTS)),
                    ]
                )
            )
        return sp.csr_matrix(sp.vstack(blocks))

    def output_weights(self) -> sp.csr_matrix:
        """C-weighted stacked weights, capped and renormalized per output vertex"""
        return normalize_weights(self.stitching.blend @ self.stacked_weights())

    def zeros(self) -> ParameterVector:
        return self.layout.zeros()

    def evaluate(self, params: ParameterVector, jacobian: bool = False) -> ModelEvaluation:
        state, stacked, d_stacked, d_joints = self.core.evaluate(params, jacobian)
        blend = self.stitching.blend
        return ModelEvaluation(
            vertices=blend_rows(blend, stacked),
            joints=state.joint_positions,
            stacked=stacked,
            vertex_jacobian=blend_rows(blend, d_stacked) if jacobian else None,
            stacked_jacobian=d_stacked,
            joint_jacobian=d_joints,
        )

    def mesh(self, params: ParameterVector) -> Mesh:
        return Mesh(self.evaluate(params).vertices, self.triangles)

    def rest_mesh(self) -> Mesh:
        return self.mesh(self.zeros())

    def rest_joints(self) -> np.ndarray:
        return self.core.rest_joints.copy()

    def keypoints(self, params: ParameterVector) -> np.ndarray:
        if self.keypoint_regressor is None:
            raise ModelError(message="Model has no keypoint regressor", error_code="MISSING_REGRESSOR")
        return self.keypoint_regressor.predict(self.evaluate(params).vertices)

    def default_icp_exclusion(self) -> np.ndarray:
        return label_mask(self.stitching.labels, ICP_EXCLUDED_REGIONS)

    def seam_gaps(self, stacked_vertices: np.ndarray) -> np.ndarray:
        return self.stitching.seams.gaps(stacked_vertices, self.body.triangles)

    def with_regressor(self, regressor: KeypointRegressor) -> "UnifiedModel":
        return UnifiedModel(
            self.body,
            self.face,
            self.hands["left_hand"],
            self.hands["right_hand"],
            self.rest_alignment,
            self.stitching,
            self.annotations,
            regressor,
        )

    def to_dict(self) -> Dict:
        return {
            "body": self.body.to_dict(),
            "face": self.face.to_dict(),
            "left_hand": self.hands["left_hand"].to_dict(),
            "right_hand": self.hands["right_hand"].to_dict(),
            "rest_alignment": {name: gamma.tolist() for name, gamma in self.rest_alignment.items()},
            "stitching": self.stitching.to_dict(),
            "annotations": {name: a.to_dict() for name, a in self.annotations.items()},
            "keypoint_regressor": self.keypoint_regressor.to_dict() if self.keypoint_regressor is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "UnifiedModel":
        regressor = data.get("keypoint_regressor")
        return cls(
            BodyModel.from_dict(data["body"]),
            FaceModel.from_dict(data["face"]),
            HandModel.from_dict(data["left_hand"]),
            HandModel.from_dict(data["right_hand"]),
            {name: np.asarray(gamma) for name, gamma in data["rest_alignment"].items()},
            Stitching.from_dict(data["stitching"]),
            {name: PartAnnotation.from_dict(a) for name, a in data["annotations"].items()},
            KeypointRegressor.from_dict(regressor) if regressor is not None else None,
        )


def part_alignment_transforms(model: UnifiedModel, body_shape: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Gamma for face and hands at a body shape

    The rotation stays at the rest calibration; the translation follows the
    shape-displaced attachment joint.
    """
    rest = model.body.skeleton.rest_positions()
    joints = model.body.joint_positions(body_shape)
    out = {}
    for name in PARTS[1:]:
        gamma = model.rest_alignment[name].copy()
        joint = model.attach[name]
        gamma[:3, 3] += joints[joint] - rest[joint]
        out[name] = gamma
    return out


def assemble_unified(model: UnifiedModel, params: ParameterVector) -> Mesh:
    """Evaluate each part with its own model, stack, and blend through C"""
    n_body = model.n_body_joints
    shape = params["body_shape"]
    pose = PoseVector(params["body_pose"].reshape(n_body, 3), params["translation"])
    transforms = body_transforms(model.body, pose, shape)
    gammas = part_alignment_transforms(model, shape)

    body_skinning = transforms.copy()
    for part in HAND_PARTS:
        hand = model.hands[part]
        scales = expand_scales(hand.skeleton, params[f"{part}_scale"].reshape(HAND_JOINTS, 3))
        state = forward_kinematics(hand.skeleton, PoseVector(params[f"{part}_pose"].reshape(HAND_JOINTS, 3)), scales)
        gamma = gammas[part]
        wrist = model.attach[part]
        body_skinning[wrist] = transforms[wrist] @ gamma @ state.skinning[0] @ np.linalg.inv(gamma)
    stacked = [skin_vertices(model.body.rest_vertices(shape), model.body.weights, body_skinning)]
    stacked.append(
        face_mesh(
            model.face, params["face_identity"], params["face_expression"], transforms[model.attach["face"]], gammas["face"]
        ).vertices
    )
    for part in HAND_PARTS:
        stacked.append(
            hand_mesh(
                model.hands[part],
                params[f"{part}_pose"].reshape(HAND_JOINTS, 3),
                params[f"{part}_scale"].reshape(HAND_JOINTS, 3),
                transforms[model.attach[part]],
                gammas[part],
            ).vertices
        )
    return Mesh(blend_rows(model.stitching.blend, np.concatenate(stacked)), model.triangles)


def build_unified_model(
    body: BodyModel,
    face: FaceModel,
    left_hand: HandModel,
    right_hand: HandModel,
    rest_alignment: Mapping[str, np.ndarray],
    annotations: Mapping[str, PartAnnotation],
    keypoint_anchors: Optional[Sequence[KeypointAnchor]] = None,
    merge_tolerance: float = 1e-6,
    seam_search_radius: float = 0.02,
) -> UnifiedModel:
    """Stitch the parts at their rest alignment and bind the keypoint anchors"""
    hands = {"left_hand": left_hand, "right_hand": right_hand}
    parts = {"face": place_part(face.mean, face.triangles, rest_alignment["face"])}
    for name, hand in hands.items():
        parts[name] = place_part(hand.mean, hand.triangles, rest_alignment[name])
    stitching = build_stitching(
        Mesh(body.mean, body.triangles),
        parts,
        annotations,
        merge_tolerance=merge_tolerance,
        seam_search_radius=seam_search_radius,
    )
    model = UnifiedModel(body, face, left_hand, right_hand, rest_alignment, stitching, annotations)
    if keypoint_anchors:
        regressor, audit = build_keypoint_regressor(
            model.rest_mesh(), keypoint_anchors, model.output_weights(), model.rest_joints()
        )
        model = model.with_regressor(regressor)
        logger.info(f"Unified model bound {len(regressor)} keypoints (worst anchor residual {max(audit.values()):.2e} m)")
    logger.info(
        f"Unified model: {model.n_vertices} vertices, {model.skeleton.n_joints} joints, {model.layout.size} parameters"
    )
    return model
