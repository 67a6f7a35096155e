import numpy as np
import pytest

from src.fitting.config import FitConfig, LMSettings
from src.fitting.fitter import Objective, cloud_distance, cold_start, fit_frame, kabsch, read_fit, write_fit
from src.fitting.lm import levenberg_marquardt
from src.fitting.residuals import (
    VertexTargets,
    find_correspondences,
    icp_residuals,
    keypoint_residuals,
    prior_residuals,
    seam_residuals,
)
from src.kinematics.rotations import angle_axis_to_matrix
from src.measurements.keypoints import TORSO_KEYPOINTS
from src.measurements.synthesis import NoiseSpec, synthesize_measurements
from src.models.parameters import ParameterVector, block_rmse
from src.models.synthetic import SyntheticModelConfig, generate_synthetic_model, sample_pose, sample_subject
from src.utils.error_handling import ConfigurationError, FittingError


def _linear_problem(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(12, 4))
    b = rng.normal(size=12)
    return A, b, (lambda x: (A @ x - b, A))


def test_lm_solves_linear_least_squares():
    A, b, fun = _linear_problem()
    x, diagnostics = levenberg_marquardt(fun, np.zeros(4))
    expected = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.allclose(x, expected, atol=1e-8)
    assert diagnostics.converged
    assert diagnostics.final_cost <= diagnostics.initial_cost
    assert diagnostics.accepted_steps <= 10
    assert np.all(np.diff(diagnostics.cost_history) <= 0), "Accepted steps never increase the cost"


def test_lm_keeps_frozen_entries():
    A, b, fun = _linear_problem(1)
    free = np.array([True, False, True, True])
    x0 = np.array([0.0, 0.7, 0.0, 0.0])
    x, _ = levenberg_marquardt(fun, x0, free=free)
    assert x[1] == 0.7
    expected = np.linalg.lstsq(A[:, free], b - 0.7 * A[:, 1], rcond=None)[0]
    assert np.allclose(x[free], expected, atol=1e-8)


def test_lm_without_free_parameters():
    _, _, fun = _linear_problem()
    x, diagnostics = levenberg_marquardt(fun, np.ones(4), free=np.zeros(4, dtype=bool))
    assert np.array_equal(x, np.ones(4))
    assert diagnostics.reason == "no_free_parameters"


def test_lm_raises_on_non_finite_residuals():
    def fun(x):
        return np.array([np.nan, 1.0]), np.eye(2)

    with pytest.raises(FittingError) as info:
        levenberg_marquardt(fun, np.zeros(2), name="broken")
    assert info.value.error_code == "NON_FINITE_RESIDUAL"
    assert info.value.details["stage"] == "broken"


def test_lm_iteration_cap_is_reported():
    def fun(x):
        return np.array([x[0] ** 2 - 2.0, x[1] - 1.0]), np.array([[2.0 * x[0], 0.0], [0.0, 1.0]])

    _, diagnostics = levenberg_marquardt(fun, np.array([10.0, 0.0]), LMSettings(max_iterations=1))
    assert diagnostics.iterations == 1
    assert diagnostics.reason == "max_iterations" and not diagnostics.converged


def test_lm_linear_problem_needs_at_most_two_steps():
    A, b, fun = _linear_problem(2)
    x, diagnostics = levenberg_marquardt(fun, np.zeros(4), LMSettings(initial_damping=1e-16))
    assert np.allclose(x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-10)
    assert diagnostics.converged
    assert diagnostics.accepted_steps <= 2


def test_lm_minimizes_rosenbrock():
    def fun(x):
        residuals = np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
        return residuals, np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])

    x, diagnostics = levenberg_marquardt(fun, np.array([-1.2, 1.0]), LMSettings(max_iterations=200))
    assert diagnostics.converged
    assert diagnostics.final_cost < 1e-12
    assert np.allclose(x, [1.0, 1.0], atol=1e-6)
    assert np.all(np.diff(diagnostics.cost_history) <= 0)


def _check_block_jacobian(block_fn, params, columns, h=1e-6, atol=1e-6):
    analytic = block_fn(params).jacobian
    for column in columns:
        plus, minus = params.copy(), params.copy()
        plus.values[column] += h
        minus.values[column] -= h
        numeric = (block_fn(plus).residuals - block_fn(minus).residuals) / (2.0 * h)
        assert np.abs(analytic[:, column] - numeric).max() < atol, f"column {column}"


def _sample_columns(model, n=8, seed=3):
    free = np.flatnonzero(~model.layout.frozen_mask())
    return np.random.default_rng(seed).choice(free, size=n, replace=False)


def test_keypoint_residuals_jacobian(model, subject_params):
    frame, _ = synthesize_measurements(model, model.zeros(), noise=NoiseSpec(keypoint_sigma=0.01))
    block = keypoint_residuals(subject_params, model, frame, weight=4.0)
    assert len(block.residuals) == 3 * len(frame.keypoints)
    _check_block_jacobian(lambda p: keypoint_residuals(p, model, frame, weight=4.0), subject_params, _sample_columns(model))


def test_keypoint_residuals_vanish_at_the_truth(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    assert keypoint_residuals(subject_params, model, frame).cost < 1e-20


def test_icp_residuals_jacobian(model, subject_params):
    frame, _ = synthesize_measurements(model, model.zeros())
    vertices = model.evaluate(subject_params).vertices
    correspondences = find_correspondences(vertices, model.triangles, frame.cloud, 0.2, np.pi / 2)
    assert len(correspondences) > 0
    _check_block_jacobian(lambda p: icp_residuals(p, model, correspondences, 2.0), subject_params, _sample_columns(model))


def test_icp_correspondences_at_the_truth_are_exact(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    vertices = model.evaluate(subject_params).vertices
    correspondences = find_correspondences(vertices, model.triangles, frame.cloud, 0.05, np.deg2rad(60))
    assert len(correspondences) == len(frame.cloud)
    assert icp_residuals(subject_params, model, correspondences).cost < 1e-20


def test_seam_residuals_jacobian(model, subject_params):
    block = seam_residuals(subject_params, model, weight=10.0)
    assert len(block.residuals) == 3 * len(model.stitching.seams)
    _check_block_jacobian(lambda p: seam_residuals(p, model, 10.0), subject_params, _sample_columns(model, seed=4))


def test_prior_residuals_skip_global_and_frozen(model):
    params = model.zeros()
    values = params.values + 0.5
    block = prior_residuals(ParameterVector(params.layout, values), {"pose": 2.0, "shape": 1.0, "scale": 3.0})
    layout = params.layout
    skipped = set(layout.unregularized) | set(np.flatnonzero(layout.frozen_mask()))
    touched = set(np.flatnonzero(np.abs(block.jacobian).sum(axis=0)))
    assert not touched & skipped
    scale_cols = layout.indices("left_hand_scale")
    assert set(scale_cols) - skipped <= touched
    rows = [np.flatnonzero(block.jacobian[:, c])[0] for c in scale_cols if c not in skipped]
    assert np.allclose(block.residuals[rows], 3.0 * 0.5), "Scales are pulled toward 1, not 0"


def test_vertex_targets_validate_lengths():
    with pytest.raises(FittingError):
        VertexTargets([0, 1], np.zeros((1, 3)))
    targets = VertexTargets(np.arange(10), np.zeros((10, 3)))
    assert len(targets.strided(3)) == 4


def test_kabsch_recovers_rigid_motion():
    rng = np.random.default_rng(0)
    source = rng.normal(size=(6, 3))
    R = angle_axis_to_matrix(np.array([[0.2, -0.4, 0.9]]))[0]
    t = np.array([0.5, -1.0, 2.0])
    R_hat, t_hat = kabsch(source, source @ R.T + t)
    assert np.allclose(R_hat, R) and np.allclose(t_hat, t)


def test_cold_start_recovers_global_motion(model):
    truth = model.zeros()
    columns = model.core.columns
    truth.values[columns.translation] = [0.3, 0.05, -0.2]
    truth.values[columns.rotation[0]] = [0.0, 0.7, 0.0]
    frame, _ = synthesize_measurements(model, truth)
    start = cold_start(model, frame)
    assert np.allclose(model.keypoints(start), model.keypoints(truth), atol=1e-8)


def test_cold_start_needs_torso_keypoints(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    with pytest.raises(FittingError) as info:
        cold_start(model, frame.with_keypoints([k for k in frame.keypoints if k.keypoint_id != TORSO_KEYPOINTS[0]]))
    assert info.value.error_code == "COLD_START_FAILED"


def test_fit_from_the_truth_does_not_increase_cost(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    result = fit_frame(model, frame, init=subject_params, stages=["B"])
    solver = result.stages[0].solver
    assert solver.final_cost <= solver.initial_cost
    drift = np.linalg.norm(model.keypoints(result.params) - model.keypoints(subject_params), axis=1)
    assert drift.mean() < 0.005, "Priors may pull slightly off the truth but not far"
    assert [s.stage for s in result.stages] == ["B"]


def test_fit_rejects_unknown_stage(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    with pytest.raises(FittingError) as info:
        fit_frame(model, frame, init=subject_params, stages=["D"])
    assert info.value.error_code == "INVALID_STAGE"


def test_frozen_blocks_stay_at_their_initial_values(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    init = model.zeros().set_block("translation", subject_params["translation"])
    frozen = ["face_expression", "left_hand_pose", "right_hand_scale"]
    result = fit_frame(model, frame, FitConfig(frozen_blocks=frozen), init=init, stages=["B"])
    for name in frozen:
        assert np.array_equal(result.params[name], init[name]), name
    assert np.abs(result.params["body_pose"] - init["body_pose"]).max() > 1e-3

    with pytest.raises(FittingError) as info:
        fit_frame(model, frame, FitConfig(frozen_blocks=["tail_pose"]), init=init, stages=["B"])
    assert info.value.error_code == "UNKNOWN_BLOCK"


def test_fit_result_roundtrip(tmp_path, model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    config = FitConfig(stage_iterations={"A": 2, "B": 2, "C": 2}, icp_rounds=1)
    result = fit_frame(model, frame, config, init=subject_params)
    assert [s.stage for s in result.stages] == ["A", "B", "C"]
    assert result.icp_correspondences and result.icp_correspondences[0] > 0

    restored = read_fit(write_fit(tmp_path / "fit.json", result))
    assert restored.frame == result.frame
    assert np.array_equal(restored.params.values, result.params.values)
    assert restored.costs == result.costs
    assert [s.to_dict() for s in restored.stages] == [s.to_dict() for s in result.stages]


@pytest.mark.slow
def test_fit_recovers_keypoints_from_cold_start(model, subject_params):
    noise = NoiseSpec(keypoint_sigma=0.002, cloud_points=2000, cloud_sigma=0.001)
    frame, _ = synthesize_measurements(model, subject_params, noise=noise, rng=np.random.default_rng(1))
    result = fit_frame(model, frame)
    error = np.linalg.norm(model.keypoints(result.params) - model.keypoints(subject_params), axis=1)
    assert error.mean() < 0.015
    # one data term, evaluated identically at both ends
    start = cold_start(model, frame)
    assert keypoint_residuals(result.params, model, frame).cost < keypoint_residuals(start, model, frame).cost


def test_fit_config_from_dict_merges_and_rejects():
    config = FitConfig.from_dict({"prior_weights": {"pose": 0.5}, "lm": {"max_iterations": 7}})
    assert config.prior_weights["pose"] == 0.5
    assert config.prior_weights["shape"] == 0.1, "Unset entries keep their defaults"
    assert config.lm.max_iterations == 7
    assert config.prior_weight("pose", "A") == pytest.approx(50.0)
    assert config.effective_candidate_weight == 0.5

    with pytest.raises(ConfigurationError):
        FitConfig.from_dict({"lambda_keypoint": 1.0})
    with pytest.raises(ConfigurationError):
        FitConfig(lambda_icp=-1.0).validate()
    with pytest.raises(ConfigurationError):
        FitConfig(icp_rounds=0).validate()


def _perturbed(truth, rng, angle=0.1, offset=0.05):
    layout = truth.layout
    init = truth.copy()
    free = ~layout.frozen_mask()
    pose = free & (layout.kinds() == "pose")
    init.values[pose] += rng.uniform(-angle, angle, size=int(pose.sum()))
    translation = layout.kinds() == "translation"
    init.values[translation] += rng.uniform(-offset, offset, size=int(translation.sum()))
    return init


def _seam_gap_norms(model, params):
    return np.linalg.norm(model.seam_gaps(model.evaluate(params).stacked).reshape(-1, 3), axis=1)


def _max_seam_gap(model, params):
    return float(_seam_gap_norms(model, params).max())


@pytest.mark.slow
def test_objective_jacobian_matches_finite_differences_on_random_states(model, subject_params):
    frame, _ = synthesize_measurements(model, subject_params)
    vertices = model.evaluate(subject_params).vertices
    correspondences = find_correspondences(vertices, model.triangles, frame.cloud, 0.2, np.pi / 2)
    objective = Objective(model, model.layout, FitConfig(), "C", frame, correspondences)
    rng = np.random.default_rng(11)
    free = np.flatnonzero(~model.layout.frozen_mask())
    h = 1e-6
    for _ in range(100):
        values = subject_params.values.copy()
        values[free] += rng.normal(0.0, 0.1, size=len(free))
        _, analytic = objective(values)
        for column in rng.choice(free, size=3, replace=False):
            plus, minus = values.copy(), values.copy()
            plus[column] += h
            minus[column] -= h
            numeric = (objective(plus)[0] - objective(minus)[0]) / (2.0 * h)
            error = np.linalg.norm(analytic[:, column] - numeric)
            assert error <= 1e-4 * max(np.linalg.norm(numeric), 1e-3), f"column {column}"


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noiseless_fit_recovers_the_truth(model, seed):
    rng = np.random.default_rng(seed)
    subject = sample_subject(model, rng, shape_std=0.5, scale_std=0.02)
    truth = sample_pose(model, rng, subject, pose_std=0.1, hand_pose_std=0.05, root_std=0.1, translation_std=0.05)
    frame, _ = synthesize_measurements(model, truth)
    assert _max_seam_gap(model, truth) < 1e-9
    result = fit_frame(model, frame, init=_perturbed(truth, rng))
    errors = block_rmse(truth, result.params, ("pose", "translation", "shape"))
    assert errors["pose"] < 1e-3
    assert errors["translation"] < 1e-4
    assert errors["shape"] < 1e-2


@pytest.mark.slow
def test_noisy_keypoints_keep_joint_error_small(model, subject_params):
    noise = NoiseSpec(keypoint_sigma=0.005, cloud_points=3000)
    frame, _ = synthesize_measurements(model, subject_params, noise=noise, rng=np.random.default_rng(4))
    result = fit_frame(model, frame)
    joints = model.evaluate(result.params).joints - model.evaluate(subject_params).joints
    assert np.sqrt(np.mean(np.sum(joints**2, axis=1))) < 0.015


@pytest.mark.slow
def test_icp_stage_brings_the_surface_closer_than_keypoints_alone(model, subject_params):
    noise = NoiseSpec(keypoint_sigma=0.005, cloud_points=3000)
    frame, _ = synthesize_measurements(model, subject_params, noise=noise, rng=np.random.default_rng(5))
    exclusion = model.default_icp_exclusion()
    keypoints_only = fit_frame(model, frame, stages=("A", "B"))
    with_icp = fit_frame(model, frame)
    assert cloud_distance(model, with_icp.params, frame.cloud, exclusion) < cloud_distance(
        model, keypoints_only.params, frame.cloud, exclusion
    )


@pytest.mark.slow
def test_dropped_hand_keypoints_leave_hands_at_the_prior(model):
    rng = np.random.default_rng(8)
    subject = sample_subject(model, rng, shape_std=0.5, scale_std=0.0)
    truth = sample_pose(model, rng, subject, pose_std=0.1, hand_pose_std=0.01, root_std=0.1, translation_std=0.05)
    full, _ = synthesize_measurements(model, truth)
    dropped, _ = synthesize_measurements(
        model, truth, noise=NoiseSpec(group_drop_rates={"left_hand": 1.0, "right_hand": 1.0})
    )
    assert not any(k.startswith(("l_hand_", "r_hand_")) for k in dropped.ids)

    reference = fit_frame(model, full)
    ablated = fit_frame(model, dropped)
    for part in ("left_hand", "right_hand"):
        assert np.abs(ablated.params[f"{part}_pose"]).max() < 0.05
    body = ~model.layout.frozen_mask()[model.layout.slice("body_pose")]
    difference = ablated.params["body_pose"] - reference.params["body_pose"]
    assert np.abs(difference[body]).max() < 1e-3


@pytest.fixture(scope="module")
def blended_seam_model():
    config = SyntheticModelConfig(n_body_shape=4, n_face_identity=3, n_face_expression=3, rigid_seams=False)
    return generate_synthetic_model(config)


@pytest.mark.slow
def test_seam_term_narrows_open_seams(blended_seam_model):
    model = blended_seam_model
    truth = model.zeros()
    for part in ("left_hand", "right_hand"):
        truth[f"{part}_pose"][:3] = [0.0, 0.6, 0.4]
    frame, _ = synthesize_measurements(model, truth)
    assert _max_seam_gap(model, truth) > 1e-3, "Blended wrists open the seams under pose"

    stages = ("B", "C")
    gaps = {}
    for weight in (0.0, 1.0, 100.0):
        fit = fit_frame(model, frame, FitConfig(lambda_seam=weight), init=truth, stages=stages)
        assert (fit.costs["seam"] > 0.0) == (weight > 0.0)
        gaps[weight] = float(np.sqrt(np.mean(_seam_gap_norms(model, fit.params) ** 2)))
    assert gaps[1.0] <= gaps[0.0] + 1e-6
    assert gaps[100.0] < 0.8 * gaps[0.0]
