import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.kinematics.rotations import (
    angle_axis_jacobian,
    angle_axis_to_matrix,
    euler_xyz_jacobian,
    euler_xyz_to_matrix,
    is_rotation,
    matrix_to_angle_axis,
)
from src.kinematics.skeleton import (
    Joint,
    KinematicColumns,
    PoseVector,
    RotationType,
    Skeleton,
    expand_scales,
    forward_kinematics,
    forward_kinematics_jacobian,
    normalize_weights,
    rigid_transform,
    skin_vertices,
    unpose_vertices,
    validate_skinning_weights,
)
from src.utils.error_handling import KinematicsError


def _central_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    columns = []
    for k in range(x.size):
        step = np.zeros_like(x)
        step.flat[k] = h
        columns.append((fn(x + step) - fn(x - step)) / (2.0 * h))
    return np.stack(columns, axis=-1)


def _chain() -> Skeleton:
    return Skeleton(
        (
            Joint("root", -1, [0.0, 0.0, 0.0]),
            Joint("elbow", 0, [1.0, 0.0, 0.0], scalable=True),
            Joint("wrist", 1, [0.5, 0.0, 0.0], rotation=RotationType.EULER_XYZ),
        )
    )


@pytest.mark.parametrize("rotvec", [[0.3, -0.2, 0.5], [1e-9, 0.0, 0.0], [0.0, 0.0, 0.0], [2.5, 1.0, -0.4]])
def test_angle_axis_jacobian_matches_finite_differences(rotvec):
    v = np.array(rotvec, dtype=float)
    analytic = angle_axis_jacobian(v[None])[0]
    numeric = _central_difference(lambda x: angle_axis_to_matrix(x[None])[0], v)
    for k in range(3):
        assert np.allclose(analytic[k], numeric[..., k], atol=1e-6), f"dR/dv_{k} disagrees with finite differences"


def test_euler_xyz_matches_intrinsic_convention_and_jacobian():
    angles = np.array([0.4, -0.7, 1.1])
    assert np.allclose(euler_xyz_to_matrix(angles)[0], Rotation.from_euler("XYZ", angles).as_matrix())
    analytic = euler_xyz_jacobian(angles)[0]
    numeric = _central_difference(lambda x: euler_xyz_to_matrix(x)[0], angles)
    for k in range(3):
        assert np.allclose(analytic[k], numeric[..., k], atol=1e-7)


def test_angle_axis_roundtrip():
    rotvecs = np.array([[0.1, 0.2, 0.3], [-1.0, 0.5, 0.0]])
    matrices = angle_axis_to_matrix(rotvecs)
    assert all(is_rotation(m) for m in matrices)
    assert np.allclose(matrix_to_angle_axis(matrices), rotvecs)


def test_skeleton_requires_single_leading_root():
    with pytest.raises(KinematicsError) as info:
        Skeleton((Joint("a", -1, np.zeros(3)), Joint("b", -1, np.zeros(3))))
    assert info.value.error_code == "INVALID_SKELETON"
    with pytest.raises(KinematicsError):
        Skeleton((Joint("a", -1, np.zeros(3)), Joint("b", 2, np.zeros(3)), Joint("c", 1, np.zeros(3))))


def test_skeleton_queries_and_serialization():
    skeleton = _chain()
    assert skeleton.index("wrist") == 2
    assert skeleton.descendants(1).tolist() == [1, 2]
    assert np.allclose(skeleton.rest_positions(), [[0, 0, 0], [1, 0, 0], [1.5, 0, 0]])
    restored = Skeleton.from_dict(skeleton.to_dict())
    assert restored.names == skeleton.names
    assert restored.joints[2].rotation == RotationType.EULER_XYZ
    with pytest.raises(KinematicsError) as info:
        skeleton.index("ankle")
    assert info.value.error_code == "UNKNOWN_JOINT"


def test_forward_kinematics_identity_pose():
    skeleton = _chain()
    state = forward_kinematics(skeleton, PoseVector.zeros(3))
    assert np.allclose(state.joint_positions, skeleton.rest_positions())
    assert np.allclose(state.skinning, np.eye(4)[None].repeat(3, axis=0)), "Rest pose must skin to identity"


def test_forward_kinematics_two_link_chain():
    skeleton = _chain()
    rotations = np.zeros((3, 3))
    rotations[0] = [0.0, 0.0, np.pi / 2]
    state = forward_kinematics(skeleton, PoseVector(rotations, [0.0, 0.0, 2.0]))
    assert np.allclose(state.joint_positions[1], [0.0, 1.0, 2.0])
    assert np.allclose(state.joint_positions[2], [0.0, 1.5, 2.0])


def test_scaled_bone_stretches_children():
    skeleton = _chain()
    state = forward_kinematics(skeleton, PoseVector.zeros(3), scales=np.array([2.0, 1.0, 1.0]))
    assert np.allclose(state.joint_positions[2], [2.0, 0.0, 0.0]), "Scaling the elbow doubles the forearm along x"


def test_expand_scales_errors():
    skeleton = _chain()
    with pytest.raises(KinematicsError) as info:
        expand_scales(skeleton, np.array([0.0, 1.0, 1.0]))
    assert info.value.error_code == "NONPOSITIVE_SCALE"
    full = np.ones((3, 3))
    full[0] = 1.2
    with pytest.raises(KinematicsError) as info:
        expand_scales(skeleton, full)
    assert info.value.error_code == "NON_SCALABLE_JOINT"


def test_forward_kinematics_jacobian_matches_finite_differences():
    skeleton = _chain()
    columns = KinematicColumns(
        rotation=np.arange(9).reshape(3, 3),
        scale=np.array([[-1, -1, -1], [9, 10, 11], [-1, -1, -1]]),
        translation=np.array([12, 13, 14]),
        n_params=15,
    )
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0.0, 0.4, 9), 1.0 + rng.normal(0.0, 0.1, 3), rng.normal(0.0, 0.2, 3)])

    def state(p):
        return forward_kinematics(skeleton, PoseVector(p[:9], p[12:]), scales=p[9:12])

    _, d_world, d_skinning = forward_kinematics_jacobian(skeleton, PoseVector(x[:9], x[12:]), x[9:12], None, None, columns)
    assert np.allclose(d_world, _central_difference(lambda p: state(p).world, x), atol=1e-6)
    assert np.allclose(d_skinning, _central_difference(lambda p: state(p).skinning, x), atol=1e-6)


def test_half_blend_between_identity_and_translation():
    transforms = np.stack([np.eye(4), rigid_transform(np.eye(3), [2.0, 0.0, 0.0])])
    posed = skin_vertices(np.array([[0.0, 1.0, 0.0]]), np.array([[0.5, 0.5]]), transforms)
    assert np.allclose(posed, [[1.0, 1.0, 0.0]])


def test_unpose_inverts_skinning():
    rng = np.random.default_rng(1)
    rest = rng.normal(size=(50, 3))
    weights = normalize_weights(rng.uniform(0.0, 1.0, size=(50, 4)))
    transforms = np.stack(
        [rigid_transform(Rotation.from_rotvec(rng.normal(0.0, 0.3, 3)).as_matrix(), rng.normal(size=3)) for _ in range(4)]
    )
    posed = skin_vertices(rest, weights, transforms)
    assert np.abs(unpose_vertices(posed, weights, transforms) - rest).max() < 1e-8


def test_unpose_singular_blend():
    transforms = np.stack([np.eye(4), rigid_transform(np.diag([-1.0, -1.0, 1.0]), [0.0, 0.0, 0.0])])
    weights = np.array([[0.5, 0.5], [1.0, 0.0]])
    with pytest.raises(KinematicsError) as info:
        unpose_vertices(np.ones((2, 3)), weights, transforms)
    assert info.value.error_code == "SINGULAR_BLEND"
    rest = unpose_vertices(np.ones((2, 3)), weights, transforms, on_singular="nan")
    assert np.isnan(rest[0]).all() and np.allclose(rest[1], 1.0)


def test_skinning_weight_validation():
    with pytest.raises(KinematicsError) as info:
        validate_skinning_weights(np.array([[1.5, -0.5]]), 2)
    assert info.value.error_code == "NEGATIVE_WEIGHT"
    with pytest.raises(KinematicsError) as info:
        validate_skinning_weights(np.array([[0.5, 0.4]]), 2)
    assert info.value.error_code == "UNNORMALIZED_WEIGHTS"
    with pytest.raises(KinematicsError) as info:
        validate_skinning_weights(np.full((1, 9), 1.0 / 9.0), 9)
    assert info.value.error_code == "TOO_MANY_INFLUENCES"
    with pytest.raises(KinematicsError) as info:
        skin_vertices(np.zeros((1, 3)), np.array([[0.5, 0.4]]), np.stack([np.eye(4)] * 2))
    assert info.value.error_code == "UNNORMALIZED_WEIGHTS"


def test_normalize_weights_caps_influences():
    weights = normalize_weights(np.arange(1.0, 11.0)[None], max_influences=8)
    dense = weights.toarray()[0]
    assert np.count_nonzero(dense) == 8
    assert dense[:2].sum() == 0.0, "The two weakest influences are dropped"
    assert dense.sum() == pytest.approx(1.0)


@pytest.mark.slow
def test_unpose_inverts_skinning_over_many_model_poses(model):
    rng = np.random.default_rng(12)
    rest = model.rest_mesh().vertices
    weights = model.output_weights()
    layout = model.layout
    moving = ~layout.frozen_mask() & np.isin(layout.kinds(), ["pose", "translation"])
    worst = 0.0
    for _ in range(1000):
        params = model.zeros()
        params.values[moving] = rng.normal(0.0, 0.3, size=int(moving.sum()))
        transforms = model.core.kinematic_state(params).skinning
        posed = skin_vertices(rest, weights, transforms)
        worst = max(worst, float(np.abs(unpose_vertices(posed, weights, transforms) - rest).max()))
    assert worst < 1e-8
