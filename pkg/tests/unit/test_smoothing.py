import numpy as np
import pytest

from src.fitting.config import FitConfig
from src.fitting.fitter import FitResult
from src.measurements.synthesis import synthesize_measurements
from src.models.synthetic import sample_pose
from src.smoothing.flow import VertexFlowField, read_flows, synthesize_flows, write_flows
from src.smoothing.temporal import (
    CandidateSet,
    _nearest_fitted,
    build_candidates,
    jitter,
    propagate_candidates,
    smooth_sequence,
)
from src.utils.error_handling import FittingError, MeasurementError


def _walking_meshes(n_frames=3, n_vertices=5, step=0.01):
    base = np.random.default_rng(0).normal(size=(n_vertices, 3))
    return {t: base + [t * step, 0.0, 0.0] for t in range(n_frames)}


def test_consistent_flow_propagates_exactly():
    meshes = _walking_meshes()
    flows = synthesize_flows(meshes)
    prop = propagate_candidates(meshes[1], flows[1], flows[2], flows[0])
    assert np.allclose(prop.next_positions, meshes[2])
    assert np.allclose(prop.prev_positions, meshes[0])
    assert prop.next_valid.all() and prop.prev_valid.all()


def test_inconsistent_flow_is_rejected():
    meshes = _walking_meshes()
    flows = synthesize_flows(meshes)
    backward = flows[2].backward.copy()
    backward[3] += [0.0, 0.02, 0.0]
    flows[2] = VertexFlowField(2, flows[2].forward, backward, flows[2].forward_valid, flows[2].backward_valid)
    prop = propagate_candidates(meshes[1], flows[1], next_flow=flows[2], epsilon=0.005)
    assert prop.next_valid.tolist() == [True, True, True, False, True]
    assert prop.prev_positions is None


def test_sequence_ends_have_one_sided_flow():
    flows = synthesize_flows(_walking_meshes())
    assert not flows[0].backward_valid.any() and flows[0].forward_valid.all()
    assert not flows[2].forward_valid.any()


def test_non_finite_flow_is_invalid():
    forward = np.zeros((2, 3))
    forward[1, 0] = np.nan
    flow = VertexFlowField(0, forward, np.zeros((2, 3)), np.ones(2), np.ones(2))
    assert flow.forward_valid.tolist() == [True, False]
    assert np.all(flow.forward[1] == 0.0)
    with pytest.raises(MeasurementError):
        VertexFlowField(0, np.zeros((2, 3)), np.zeros((3, 3)), np.ones(2), np.ones(3))


def test_noisy_flows_keep_shape(tmp_path):
    flows = synthesize_flows(_walking_meshes(), sigma=0.001, rng=np.random.default_rng(2))
    restored = read_flows(write_flows(tmp_path / "flows", flows))
    assert sorted(restored) == [0, 1, 2]
    assert np.allclose(restored[1].forward, flows[1].forward)
    assert restored[0].backward_valid.tolist() == flows[0].backward_valid.tolist()


def test_jitter_of_uniform_motion():
    meshes = _walking_meshes(n_frames=4, step=0.01)
    assert jitter([meshes[t] for t in range(4)]) == pytest.approx(0.03)
    assert jitter([meshes[0]]) == 0.0


def test_candidate_set_targets_and_counts():
    cset = CandidateSet(1)
    cset.add("original", np.zeros((3, 3)), np.ones(3))
    cset.add("forward", np.ones((3, 3)), [True, False, True])
    assert cset.counts().tolist() == [2, 1, 2]
    targets = cset.targets()
    assert targets.vertices.tolist() == [0, 1, 2, 0, 2]
    with pytest.raises(FittingError) as info:
        cset.add("sideways", np.zeros((3, 3)), np.ones(3))
    assert info.value.error_code == "UNKNOWN_SOURCE"


def test_nearest_fitted_prefers_earlier_on_ties():
    assert _nearest_fitted(2, [1, 3]) == 1
    assert _nearest_fitted(5, [1, 3, 9]) == 3
    assert _nearest_fitted(0, []) is None


def _sequence(model, n_frames=3, noise=0.0):
    rng = np.random.default_rng(5)
    truth = sample_pose(model, rng, pose_std=0.05, hand_pose_std=0.02, root_std=0.05, translation_std=0.02)
    frames, fits, meshes = {}, {}, {}
    for t in range(n_frames):
        params = truth.copy()
        params.values[model.core.columns.translation] += [0.01 * t, 0.0, 0.0]
        frames[t], _ = synthesize_measurements(model, params, frame=t)
        meshes[t] = model.evaluate(params).vertices
        noisy = params.copy()
        free = ~model.layout.frozen_mask()
        noisy.values[free] += rng.normal(0.0, noise, size=int(free.sum()))
        fits[t] = FitResult(t, noisy, {})
    return frames, fits, meshes


def test_unfitted_frames_receive_neighbour_candidates(model):
    frames, fits, meshes = _sequence(model)
    flows = synthesize_flows(meshes)
    candidates = build_candidates(model, {0: fits[0], 2: fits[2]}, flows, [0, 1, 2])
    assert set(candidates[1].positions) == {"forward", "backward"}
    assert set(candidates[0].positions) == {"original"}, "Frame 1 has no fit to propagate back"
    assert np.allclose(candidates[1].positions["forward"], meshes[1], atol=1e-12)


def test_isolated_frame_passes_through(model):
    frames, fits, meshes = _sequence(model, n_frames=1)
    calls = []

    def recording_map(fn, tasks):
        calls.extend(tasks)
        return map(fn, tasks)

    smoothed = smooth_sequence(model, frames, fits, synthesize_flows(meshes), passes=2, map_fn=recording_map)
    assert smoothed[0] is fits[0]
    assert calls == []
    assert smooth_sequence(model, frames, {}, {}) == {}


@pytest.mark.slow
def test_smoothing_reduces_jitter(model):
    frames, fits, meshes = _sequence(model, n_frames=3, noise=0.03)
    config = FitConfig(stage_iterations={"A": 5, "B": 10, "C": 5}, icp_rounds=1)
    before = jitter([model.evaluate(fits[t].params).vertices for t in range(3)])
    smoothed = smooth_sequence(model, frames, fits, synthesize_flows(meshes), config, passes=1)
    after = jitter([model.evaluate(smoothed[t].params).vertices for t in range(3)])
    assert sorted(smoothed) == [0, 1, 2]
    assert after < before


def test_zero_noise_sequence_is_a_fixed_point(model):
    frames, fits, meshes = _sequence(model, n_frames=3)
    smoothed = smooth_sequence(model, frames, fits, synthesize_flows(meshes), passes=1)
    for t in range(3):
        assert np.abs(smoothed[t].params.values - fits[t].params.values).max() < 1e-6
        assert [s.stage for s in smoothed[t].stages] == ["C"] * FitConfig().icp_rounds


def test_pass_that_raises_jitter_is_discarded(model):
    frames, fits, meshes = _sequence(model, n_frames=3)
    free = ~model.layout.frozen_mask()
    rng = np.random.default_rng(6)

    def scrambling_map(fn, tasks):
        out = []
        for task in tasks:
            params = task.init.copy()
            params.values[free] += rng.normal(0.0, 0.05, size=int(free.sum()))
            out.append(FitResult(task.frame.frame, params, {}))
        return out

    smoothed = smooth_sequence(model, frames, fits, synthesize_flows(meshes), passes=2, map_fn=scrambling_map)
    assert all(smoothed[t] is fits[t] for t in range(3))


@pytest.mark.slow
def test_jitter_never_increases_across_passes(model):
    frames, fits, meshes = _sequence(model, n_frames=3, noise=0.03)
    flows = synthesize_flows(meshes)
    config = FitConfig(stage_iterations={"A": 5, "B": 10, "C": 5}, icp_rounds=1)
    history = [jitter([model.evaluate(fits[t].params).vertices for t in range(3)])]
    current = fits
    for _ in range(3):
        current = smooth_sequence(model, frames, current, flows, config, passes=1)
        history.append(jitter([model.evaluate(current[t].params).vertices for t in range(3)]))
    assert np.all(np.diff(history) <= 0.0)
    assert history[-1] < history[0]
