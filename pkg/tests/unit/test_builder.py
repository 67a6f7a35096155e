import numpy as np
import pytest
import scipy.sparse as sp

from src.builder.adam_builder import BuildConfig, assemble_adam, build_adam_model, write_build_report
from src.builder.corpus import CorpusEntry, FitCorpus, read_corpus, write_corpus
from src.builder.displacements import default_smoothness_weights, solve_displacements
from src.builder.regressor import corpus_residual, fit_row, regress_keypoint_targets
from src.builder.shape_space import build_shape_space, remove_translation
from src.builder.skinning_transfer import transfer_skinning
from src.fitting.config import FitConfig
from src.fitting.fitter import fit_adam_frame, read_fit, write_fit
from src.geometry.mesh import OrientedPointCloud
from src.measurements.frames import Keypoint3D, MeasurementFrame
from src.measurements.keypoints import KeypointRegressor
from src.measurements.synthesis import synthesize_measurements
from src.models.adam import AdamModel
from src.models.base import REGION_LABELS
from src.models.parameters import ParameterBlock, ParameterLayout
from src.models.synthetic import sample_pose, sample_subject
from src.utils.error_handling import FittingError, ModelBuildError
from src.utils.serialization import read_json, write_json

TINY_LAYOUT = ParameterLayout((ParameterBlock("pose", 3, "pose"),))


def _planted_meshes(n_meshes=12, n_vertices=30, seed=0):
    rng = np.random.default_rng(seed)
    mean = rng.normal(size=(n_vertices, 3))
    directions, _ = np.linalg.qr(rng.normal(size=(3 * n_vertices, 2)))
    coefficients = rng.normal(size=(n_meshes, 2)) * [3.0, 1.0]
    meshes = mean.ravel() + coefficients @ directions.T
    return meshes.reshape(n_meshes, n_vertices, 3), directions


def test_planted_shape_space_is_recovered():
    meshes, directions = _planted_meshes()
    space = build_shape_space(meshes, n_components=5, center_translation=False)
    assert space.n_components == 5
    assert space.explained_variance_ratio[:2].sum() == pytest.approx(1.0, abs=1e-9)
    top = space.components[:2].reshape(2, -1)
    # the top two components span the planted plane
    assert np.allclose(np.abs(np.linalg.svd(top @ directions, compute_uv=False)), 1.0, atol=1e-8)
    assert np.abs(space.reconstruct(meshes, 2) - meshes).max() < 1e-9
    assert space.basis.shape == (30, 3, 5)


def test_reconstruction_error_is_nonincreasing():
    rng = np.random.default_rng(1)
    meshes = rng.normal(size=(8, 20, 3))
    errors = build_shape_space(meshes, n_components=7).reconstruction_errors(remove_translation(meshes))
    assert len(errors) == 8
    assert np.all(np.diff(errors) <= 1e-12)
    assert errors[-1] < 1e-9, "M - 1 components reproduce M centered meshes"


def test_zero_components_reconstruct_the_mean():
    meshes, _ = _planted_meshes(n_meshes=5)
    space = build_shape_space(meshes, n_components=3, center_translation=False)
    assert space.project(meshes, 0).shape == (5, 0)
    assert np.allclose(space.reconstruct(meshes, 0), np.broadcast_to(space.mean, meshes.shape))
    expected = np.sqrt(np.mean((meshes - space.mean) ** 2))
    assert space.reconstruction_errors(meshes)[0] == pytest.approx(expected)


def test_component_count_is_capped_by_corpus_size():
    meshes, _ = _planted_meshes(n_meshes=3)
    space = build_shape_space(meshes, n_components=40)
    assert space.n_components == 2
    assert space.to_dict()["requested_components"] == 40


def test_shape_space_input_errors():
    with pytest.raises(ModelBuildError) as info:
        build_shape_space(np.zeros((4, 10)))
    assert info.value.error_code == "DIMENSION_MISMATCH"
    with pytest.raises(ModelBuildError) as info:
        build_shape_space(np.zeros((1, 10, 3)))
    assert info.value.error_code == "INSUFFICIENT_CORPUS"


def test_remove_translation_cancels_rigid_shifts():
    meshes, _ = _planted_meshes(n_meshes=4)
    shifted = meshes + np.array([[[1.0, 0.0, 0.0]], [[-1.0, 0.0, 0.0]], [[0.0, 2.0, -1.0]], [[0.0, -2.0, 1.0]]])
    assert np.allclose(remove_translation(shifted), remove_translation(meshes))


def _offset_cloud(mesh, offset):
    normals = np.tile([0.0, 0.0, 1.0], (mesh.n_vertices, 1))
    return OrientedPointCloud(mesh.vertices + offset * normals, normals)


def test_constant_offset_is_recovered(grid):
    field = solve_displacements(grid, _offset_cloud(grid, 0.01))
    assert np.abs(field.values - 0.01).max() < 1e-8
    assert field.matched.all()
    assert np.allclose(field.apply(grid)[:, 2], 0.01, atol=1e-8)


def test_zero_offset_gives_zero_field(grid):
    field = solve_displacements(grid, _offset_cloud(grid, 0.0), weights=np.full(grid.n_vertices, 10.0))
    assert np.abs(field.values).max() < 1e-9
    assert field.stats()["matched_fraction"] == 1.0


def test_displacements_without_matches_are_singular(grid):
    with pytest.raises(ModelBuildError) as info:
        solve_displacements(grid, _offset_cloud(grid, 1.0))
    assert info.value.error_code == "SINGULAR_SYSTEM"


def test_smoothness_weights_favor_detail_regions():
    labels = np.array([REGION_LABELS["body"], REGION_LABELS["face"], REGION_LABELS["right_hand"]])
    assert default_smoothness_weights(labels, 5.0).tolist() == [1.0, 5.0, 5.0]


def _tiny_corpus(n_frames=25, sparse_frames=5, seed=0):
    rng = np.random.default_rng(seed)
    planted = np.array([0.1, 0.2, 0.3, 0.4])
    entries = []
    for f in range(n_frames):
        vertices = rng.normal(size=(4, 3))
        keypoints = [Keypoint3D("nose", planted @ vertices)]
        if f < sparse_frames:
            keypoints.append(Keypoint3D("neck", vertices.mean(axis=0)))
        entries.append(CorpusEntry("s0", f, TINY_LAYOUT.zeros(), vertices, MeasurementFrame(f, tuple(keypoints))))
    return FitCorpus(entries), planted


def test_fit_row_recovers_planted_weights():
    corpus, planted = _tiny_corpus()
    meshes = corpus.vertices()
    targets = np.stack([e.measurement.keypoint("nose").position for e in corpus])
    assert np.allclose(fit_row(meshes, targets, np.arange(4)), planted, atol=1e-6)


def test_regressor_rows_are_relearned_with_audit():
    corpus, planted = _tiny_corpus()
    regressor = KeypointRegressor(("nose", "neck"), sp.csr_matrix(np.full((2, 4), 0.25)))
    before = corpus_residual(corpus, regressor)
    relearned, audit = regress_keypoint_targets(corpus, regressor, corpus.entries[0].vertices, min_frames=20)
    assert audit["nose"]["status"] == "regressed"
    assert audit["nose"]["after"] <= audit["nose"]["before"]
    assert audit["neck"] == {"frames": 5, "status": "insufficient_frames"}
    indices, weights = relearned.support("nose")
    dense = np.zeros(4)
    dense[indices] = weights
    assert np.allclose(dense, planted, atol=1e-6)
    assert np.array_equal(relearned.support("neck")[1], regressor.support("neck")[1])
    assert corpus_residual(corpus, relearned) < before


def _truth_corpus(model, n_subjects=2, n_frames=2):
    rng = np.random.default_rng(3)
    entries = []
    for s in range(n_subjects):
        subject = sample_subject(model, rng, shape_std=0.8, scale_std=0.02)
        for f in range(n_frames):
            params = sample_pose(model, rng, subject, pose_std=0.05, hand_pose_std=0.05, root_std=0.1, translation_std=0.05)
            frame, _ = synthesize_measurements(model, params, frame=f, rng=rng)
            entries.append(CorpusEntry(f"s{s}", f, params, model.evaluate(params).vertices, frame))
    return FitCorpus(entries)


def test_corpus_roundtrip(tmp_path, model):
    corpus = _truth_corpus(model, n_subjects=1)
    write_corpus(tmp_path / "corpus", corpus, model.triangles)
    restored = read_corpus(tmp_path / "corpus")
    assert [e.key for e in restored] == ["s0_f0000", "s0_f0001"]
    restored.check(model)
    assert len(restored.entries[0].measurement.cloud) == len(corpus.entries[0].measurement.cloud)


def test_corpus_errors(tmp_path, model):
    corpus = _truth_corpus(model, n_subjects=1)
    with pytest.raises(ModelBuildError) as info:
        FitCorpus(corpus.entries + corpus.entries[:1])
    assert info.value.error_code == "DUPLICATE_ENTRY"

    first, second = corpus.entries
    broken = FitCorpus([CorpusEntry("s0", 0, first.params, second.vertices, first.measurement)])
    with pytest.raises(ModelBuildError) as info:
        broken.check(model)
    assert info.value.error_code == "INCONSISTENT_CORPUS"

    write_json(tmp_path / "bad" / "corpus.json", {"format": "bodyfit-corpus", "version": 2, "entries": []})
    with pytest.raises(ModelBuildError) as info:
        read_corpus(tmp_path / "bad")
    assert info.value.error_code == "INVALID_CORPUS"


@pytest.mark.slow
def test_build_adam_from_truth_corpus(tmp_path, model):
    corpus = _truth_corpus(model)
    adam, report = build_adam_model(model, corpus, BuildConfig(n_components=3, regress_keypoints=False))
    assert isinstance(adam, AdamModel)
    assert adam.shape_basis.shape == (model.n_vertices, 3, 3)
    assert report.n_frames == 4 and report.n_subjects == 2
    assert all(d["max_abs"] < 1e-6 for d in report.displacements), "Exact clouds need no displacement"
    assert np.isfinite(adam.evaluate(adam.zeros()).vertices).all()

    write_build_report(tmp_path / "build.json", report, tmp_path / "spectrum.png")
    assert read_json(tmp_path / "build.json")["n_frames"] == 4
    assert (tmp_path / "spectrum.png").exists()

    frame, _ = synthesize_measurements(adam, adam.zeros())
    config = FitConfig.from_dict({"stage_iterations": {"B": 10}, "icp_rounds": 1})
    fit = fit_adam_frame(adam, frame, config, init=adam.zeros(), stages=("B",))
    drift = np.linalg.norm(adam.keypoints(fit.params) - adam.keypoints(adam.zeros()), axis=1)
    assert drift.mean() < 0.005
    assert "seam" not in fit.costs


def test_build_needs_two_frames(model):
    corpus = _truth_corpus(model, n_subjects=1, n_frames=1)
    with pytest.raises(ModelBuildError) as info:
        build_adam_model(model, corpus)
    assert info.value.error_code == "INSUFFICIENT_CORPUS"


def test_skinning_transfers_to_the_unified_skeleton(model):
    skeleton, weights = transfer_skinning(model)
    assert skeleton.n_joints == model.skeleton.n_joints
    assert weights.shape == (model.n_vertices, skeleton.n_joints)
    assert np.allclose(np.asarray(weights.sum(axis=1)).ravel(), 1.0)
    assert np.allclose(skeleton.rest_positions(), model.rest_joints())


def test_adam_fit_rejects_other_models(model):
    frame, _ = synthesize_measurements(model, model.zeros())
    with pytest.raises(FittingError) as info:
        fit_adam_frame(model, frame)
    assert info.value.error_code == "UNKNOWN_MODEL_TYPE"


@pytest.fixture(scope="module")
def small_adam(model):
    rng = np.random.default_rng(9)
    rest = [model.mesh(sample_subject(model, rng, shape_std=0.8, scale_std=0.0)).vertices for _ in range(5)]
    return assemble_adam(model, build_shape_space(np.stack(rest), n_components=3))


@pytest.mark.slow
def test_adam_fit_roundtrip(tmp_path, small_adam):
    adam = small_adam
    rng = np.random.default_rng(10)
    layout = adam.layout
    pose = ~layout.frozen_mask() & (layout.kinds() == "pose")
    truth = adam.zeros()
    truth.values[pose] = rng.normal(0.0, 0.05, size=int(pose.sum()))
    truth["shape"][:] = rng.normal(0.0, 0.5, size=adam.n_shape)
    truth["translation"][:] = [0.05, -0.02, 0.1]
    frame, _ = synthesize_measurements(adam, truth)

    init = truth.copy()
    init.values[pose] += rng.uniform(-0.05, 0.05, size=int(pose.sum()))
    result = fit_adam_frame(adam, frame, init=init)
    assert "seam" not in result.costs
    error = np.linalg.norm(adam.keypoints(result.params) - adam.keypoints(truth), axis=1)
    assert error.mean() < 1e-3
    assert np.abs(result.params["translation"] - truth["translation"]).max() < 1e-3

    restored = read_fit(write_fit(tmp_path / "adam_fit.json", result), layout)
    assert np.array_equal(restored.params.values, result.params.values)
    assert restored.costs == result.costs
