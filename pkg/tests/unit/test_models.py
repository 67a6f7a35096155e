import numpy as np
import pytest
import scipy.sparse as sp

from src.kinematics.skeleton import Joint, PoseVector, Skeleton
from src.models.adam import AdamModel, adam_mesh
from src.models.archive import load_model, save_model
from src.models.part_models import body_mesh, face_mesh, hand_mesh
from src.models.unified import assemble_unified, part_alignment_transforms
from src.utils.error_handling import ModelError
from src.utils.serialization import write_json


def _random_params(model, seed=0, scale=0.2):
    rng = np.random.default_rng(seed)
    params = model.zeros()
    free = ~model.layout.frozen_mask()
    values = params.values
    values[free] += rng.normal(0.0, scale, size=int(free.sum()))
    return params


def _tiny_adam(with_frozen_wrist=False):
    names = ("pelvis", "l_wrist") if with_frozen_wrist else ("pelvis", "spine")
    skeleton = Skeleton((Joint(names[0], -1, [0.0, 0.0, 0.0]), Joint(names[1], 0, [0.0, 1.0, 0.0])))
    mean = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    rng = np.random.default_rng(2)
    weights = sp.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0], [0.3, 0.7], [0.0, 1.0]]))
    regressor = sp.csr_matrix(np.array([[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]]))
    return AdamModel(
        mean,
        np.array([[0, 1, 2], [0, 2, 3]]),
        rng.normal(0.0, 0.05, size=(4, 3, 2)),
        rng.normal(0.0, 0.01, size=(4, 3, 1)),
        skeleton,
        weights,
        regressor,
        np.zeros(4, dtype=int),
    )


def test_blend_matrix_is_an_affine_copy(model):
    blend = model.stitching.blend
    assert blend.min() >= 0.0
    assert np.allclose(np.asarray(blend.sum(axis=1)).ravel(), 1.0, atol=1e-9), "Every output row must sum to 1"
    assert model.stitching.copy_rows().mean() > 0.5, "Most output vertices copy one part vertex"
    assert model.n_vertices < model.stitching.n_stacked, "Redundant body vertices are dropped"


def test_rest_seams_are_closed(model):
    stacked = model.evaluate(model.zeros()).stacked
    assert np.abs(model.seam_gaps(stacked)).max() <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_posed_seams_stay_closed(model, seed):
    stacked = model.evaluate(_random_params(model, seed=seed)).stacked
    assert np.abs(model.seam_gaps(stacked)).max() < 1e-9


def test_seams_stay_closed_for_sampled_subjects(model, subject_params):
    assert np.abs(model.seam_gaps(model.evaluate(subject_params).stacked)).max() < 1e-9


@pytest.mark.parametrize("part", ["left_hand", "right_hand"])
def test_body_wrist_region_follows_the_hand_root(model, part):
    params = model.zeros()
    params[f"{part}_pose"][:3] = [0.4, -0.3, 0.2]
    params[f"{part}_scale"][:3] = [1.1, 0.9, 1.05]
    stacked = model.evaluate(params).stacked
    region = np.unique(model.body.triangles[model.annotations[part].body_region_triangles].ravel())
    lo, _ = model.stitching.part_offsets[part]
    # the palm is a copy of the replaced body region, in the same vertex order
    assert np.abs(stacked[region] - stacked[lo : lo + len(region)]).max() < 1e-9
    assert np.abs(stacked[region] - model.evaluate(model.zeros()).stacked[region]).max() > 1e-3


def test_evaluate_matches_part_by_part_assembly(model):
    params = _random_params(model)
    evaluated = model.evaluate(params).vertices
    assembled = assemble_unified(model, params).vertices
    assert np.abs(evaluated - assembled).max() < 1e-10


def test_translation_shifts_every_vertex(model):
    params = _random_params(model, seed=1)
    base = model.evaluate(params).vertices
    shifted = model.evaluate(params.set_block("translation", params["translation"] + [0.1, -0.2, 0.3])).vertices
    assert np.allclose(shifted - base, [0.1, -0.2, 0.3], atol=1e-12)


def test_output_is_linear_in_shape_at_rest_pose(model):
    zero = model.evaluate(model.zeros()).vertices
    shape = np.zeros(model.layout.block("body_shape").size)
    shape[0] = 1.0
    one = model.evaluate(model.zeros().set_block("body_shape", shape)).vertices
    two = model.evaluate(model.zeros().set_block("body_shape", 2.0 * shape)).vertices
    assert np.allclose(two - zero, 2.0 * (one - zero), atol=1e-12)


def test_vertex_jacobian_matches_finite_differences(model):
    params = _random_params(model, seed=2, scale=0.1)
    analytic = model.evaluate(params, jacobian=True).vertex_jacobian
    rng = np.random.default_rng(5)
    free = np.flatnonzero(~model.layout.frozen_mask())
    h = 1e-6
    for column in rng.choice(free, size=10, replace=False):
        plus, minus = params.copy(), params.copy()
        plus.values[column] += h
        minus.values[column] -= h
        numeric = (model.evaluate(plus).vertices - model.evaluate(minus).vertices) / (2.0 * h)
        assert np.abs(analytic[:, :, column] - numeric).max() < 1e-6, f"Jacobian column {column} is off"


def test_body_mesh_shape_linearity(model):
    body = model.body
    pose = PoseVector.zeros(body.skeleton.n_joints)
    assert np.allclose(body_mesh(body, pose).vertices, body.mean)
    for k in range(body.n_shape):
        unit = np.zeros(body.n_shape)
        unit[k] = 1.0
        assert np.allclose(body_mesh(body, pose, unit).vertices, body.mean + body.shape_basis[:, :, k], atol=1e-12)


def test_body_mesh_rejects_wrong_pose_size(model):
    with pytest.raises(ModelError) as info:
        body_mesh(model.body, PoseVector.zeros(3))
    assert info.value.error_code == "DIMENSION_MISMATCH"


def test_face_mesh_expression_linearity(model):
    face = model.face
    eye = np.eye(4)
    assert np.allclose(face_mesh(face, None, None, eye, eye).vertices, face.mean)
    expression = np.zeros(face.n_expression)
    expression[1] = 1.0
    moved = face_mesh(face, None, expression, eye, eye).vertices
    assert np.allclose(moved, face.mean + face.expression_basis[:, :, 1], atol=1e-12)


def test_hand_root_scale_scales_about_wrist(model):
    hand = model.hands["left_hand"]
    scales = np.ones((16, 3))
    scales[0] = 2.0
    eye = np.eye(4)
    assert np.allclose(hand_mesh(hand, None, None, eye, eye).vertices, hand.mean)
    assert np.allclose(hand_mesh(hand, None, scales, eye, eye).vertices, 2.0 * hand.mean, atol=1e-12)


def test_finger_curl_only_moves_its_subtree(model):
    hand = model.hands["right_hand"]
    joint = hand.skeleton.index("index_2")
    angles = np.zeros((16, 3))
    angles[joint, 2] = np.pi / 2
    eye = np.eye(4)
    moved = hand_mesh(hand, angles, None, eye, eye).vertices - hand.mean
    influenced = np.asarray(hand.weights[:, hand.skeleton.descendants(joint)].sum(axis=1)).ravel() > 0
    assert np.abs(moved[~influenced]).max() < 1e-12
    assert np.abs(moved[influenced]).max() > 1e-3


def test_alignment_transforms_follow_body_shape(model):
    rest = part_alignment_transforms(model)
    for name, gamma in rest.items():
        assert np.allclose(gamma, model.rest_alignment[name])
        assert np.allclose(gamma[:3, :3].T @ gamma[:3, :3], np.eye(3), atol=1e-9)

    shape = np.zeros(model.body.n_shape)
    shape[0] = 1.0
    shifted = part_alignment_transforms(model, shape)
    head = model.attach["face"]
    displacement = model.body.joint_positions(shape)[head] - model.body.skeleton.rest_positions()[head]
    assert np.allclose(shifted["face"][:3, 3] - rest["face"][:3, 3], displacement)
    assert np.allclose(shifted["face"][:3, :3], rest["face"][:3, :3]), "Rotation stays at the rest calibration"


def test_keypoints_regressed_from_vertices(model, subject_params):
    keypoints = model.keypoints(subject_params)
    assert keypoints.shape == (len(model.keypoint_regressor.ids), 3)
    assert np.isfinite(keypoints).all()


def test_unified_archive_roundtrip(tmp_path, model, subject_params):
    path = save_model(model, tmp_path / "model.json")
    restored = load_model(path)
    assert restored.layout == model.layout
    assert np.allclose(restored.evaluate(subject_params).vertices, model.evaluate(subject_params).vertices, atol=1e-12)


def test_archive_rejects_foreign_documents(tmp_path):
    write_json(tmp_path / "other.json", {"format": "something-else"})
    with pytest.raises(ModelError) as info:
        load_model(tmp_path / "other.json")
    assert info.value.error_code == "INVALID_ARCHIVE"
    write_json(tmp_path / "future.json", {"format": "bodyfit-model", "version": 99, "type": "adam", "model": {}})
    with pytest.raises(ModelError):
        load_model(tmp_path / "future.json")


def test_adam_mesh_linearity_and_archive(tmp_path):
    adam = _tiny_adam()
    pose = PoseVector.zeros(2)
    assert np.allclose(adam_mesh(adam, pose).vertices, adam.mean)
    assert np.allclose(adam_mesh(adam, pose, shape=[1.0, 0.0]).vertices, adam.mean + adam.shape_basis[:, :, 0], atol=1e-12)
    with pytest.raises(ModelError):
        adam_mesh(adam, pose, shape=[1.0, 0.0, 0.0])

    restored = load_model(save_model(adam, tmp_path / "adam.json"))
    assert isinstance(restored, AdamModel)
    params = _random_params(adam, seed=4)
    assert np.allclose(restored.evaluate(params).vertices, adam.evaluate(params).vertices)


def test_adam_jacobian_matches_finite_differences():
    adam = _tiny_adam()
    params = _random_params(adam, seed=6, scale=0.3)
    analytic = adam.evaluate(params, jacobian=True).vertex_jacobian
    h = 1e-6
    for column in range(adam.layout.size):
        plus, minus = params.copy(), params.copy()
        plus.values[column] += h
        minus.values[column] -= h
        numeric = (adam.evaluate(plus).vertices - adam.evaluate(minus).vertices) / (2.0 * h)
        assert np.abs(analytic[:, :, column] - numeric).max() < 1e-6


def test_adam_freezes_wrist_rotations():
    adam = _tiny_adam(with_frozen_wrist=True)
    assert adam.layout.frozen == (6, 7, 8), "Wrist angles are carried by the hand roots"
    assert adam.layout.unregularized == (0, 1, 2, 3, 4, 5)
