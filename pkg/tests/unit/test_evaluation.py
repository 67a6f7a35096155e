import json

import numpy as np
import pandas as pd
import pytest

from src.evaluation.report import EvaluationReport, compare_reports, evaluate_masks, evaluate_sequence, write_comparison
from src.evaluation.silhouette import (
    SilhouetteMask,
    _fill_triangles,
    overlap_score,
    rasterize_silhouette,
    read_masks,
    read_pgm,
    write_masks,
    write_pgm,
)
from src.fitting.fitter import FitResult
from src.geometry.mesh import Mesh
from src.measurements.cameras import Camera
from src.utils.error_handling import FileOperationError, MeasurementError


def _pixel_camera(size=100, view=0):
    """Identity projection: a point at depth 1 lands on pixel (x, y)"""
    return Camera(view, np.hstack([np.eye(3), np.zeros((3, 1))]), size, size)


def _flat(corners, z=1.0, triangles=((0, 1, 2),)):
    vertices = np.column_stack([np.asarray(corners, dtype=float), np.full(len(corners), z)])
    return Mesh(vertices, np.array(triangles))


def _columns(lo, hi, width=8, height=4):
    mask = np.zeros((height, width), dtype=bool)
    mask[:, lo:hi] = True
    return SilhouetteMask(mask)


def test_overlap_score_cases():
    left = _columns(0, 4)
    assert overlap_score(left, left) == 100.0
    assert overlap_score(left, _columns(4, 8)) == 0.0
    assert overlap_score(left, _columns(2, 6)) == pytest.approx(100.0 / 3.0)
    assert overlap_score(_columns(2, 6), left) == overlap_score(left, _columns(2, 6))
    assert overlap_score(SilhouetteMask.empty(8, 4), SilhouetteMask.empty(8, 4)) == 100.0


def test_overlap_score_rejects_size_mismatch():
    with pytest.raises(MeasurementError) as info:
        overlap_score(SilhouetteMask.empty(8, 4), SilhouetteMask.empty(4, 8))
    assert info.value.error_code == "DIMENSION_MISMATCH"


def test_rasterized_triangle_area():
    mask = rasterize_silhouette(_flat([[10.3, 10.3], [190.3, 10.3], [10.3, 190.3]]), _pixel_camera(200))
    assert mask.area == pytest.approx(0.5 * 180.0 * 180.0, rel=0.01)
    assert mask.mask[100, 50] and not mask.mask[150, 150]


def test_shared_edge_pixels_are_counted_once():
    corners = [[10.0, 10.0], [50.0, 10.0], [50.0, 50.0], [10.0, 50.0]]
    camera = _pixel_camera()
    lower = rasterize_silhouette(_flat(corners, triangles=((0, 1, 2),)), camera).mask
    upper = rasterize_silhouette(_flat(corners, triangles=((0, 2, 3),)), camera).mask
    assert not (lower & upper).any(), "Diagonal pixels belong to exactly one triangle"
    assert (lower | upper).sum() == 40 * 40
    whole = rasterize_silhouette(_flat(corners, triangles=((0, 1, 2), (0, 2, 3))), camera)
    assert whole.area == 1600


def test_one_pixel_shift_moves_the_mask():
    corners = np.array([[20.3, 30.7], [80.1, 25.2], [40.6, 90.4]])
    camera = _pixel_camera()
    base = rasterize_silhouette(_flat(corners), camera).mask
    shifted = rasterize_silhouette(_flat(corners + [1.0, 0.0]), camera).mask
    assert base.any()
    assert np.array_equal(shifted[:, 1:], base[:, :-1])


def test_geometry_behind_the_camera_is_invisible():
    camera = _pixel_camera()
    assert rasterize_silhouette(_flat([[10.0, 10.0], [60.0, 10.0], [10.0, 60.0]], z=-1.0), camera).area == 0
    empty = Mesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))
    assert rasterize_silhouette(empty, camera).area == 0


def test_mesh_mask_is_the_union_of_its_triangles(model, subject_params, cameras):
    mesh = model.mesh(subject_params)
    rng = np.random.default_rng(3)
    triangles = mesh.triangles[rng.choice(mesh.n_triangles, size=150, replace=False)]
    camera = cameras[1]
    whole = rasterize_silhouette(Mesh(mesh.vertices, triangles), camera).mask
    union = np.zeros_like(whole)
    for tri in triangles:
        union |= rasterize_silhouette(Mesh(mesh.vertices, tri[None]), camera).mask
    assert whole.any()
    assert np.array_equal(whole, union)


def test_batched_fill_matches_a_single_batch():
    rng = np.random.default_rng(4)
    triangles = rng.uniform(-10.0, 110.0, size=(60, 3, 2))
    single, batched = np.zeros((100, 100), dtype=bool), np.zeros((100, 100), dtype=bool)
    _fill_triangles(single, triangles.copy())
    _fill_triangles(batched, triangles.copy(), chunk_pixels=97)
    assert single.any()
    assert np.array_equal(single, batched)


def test_triangle_crossing_the_near_plane_is_clipped():
    camera = _pixel_camera()
    # one corner behind the camera; the near-plane cut widens the front part into a wedge
    vertices = np.array([[10.0, 10.0, 1.0], [50.0, 10.0, 1.0], [10.0, 50.0, -1.0]])
    mask = rasterize_silhouette(Mesh(vertices, np.array([[0, 1, 2]])), camera).mask
    assert mask[40, 50] and mask[90, 90]
    assert not mask[40, 15] and not mask[5, 30]


def test_pgm_roundtrip_with_comment(tmp_path):
    mask = _columns(1, 3, width=5, height=3)
    restored = read_pgm(write_pgm(tmp_path / "m.pgm", mask))
    assert np.array_equal(restored.mask, mask.mask)

    commented = tmp_path / "c.pgm"
    commented.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 200]))
    assert read_pgm(commented).mask.tolist() == [[False, True]]


def test_pgm_rejects_other_formats(tmp_path):
    ascii_pgm = tmp_path / "a.pgm"
    ascii_pgm.write_bytes(b"P2\n2 1\n255\n0 255\n")
    with pytest.raises(FileOperationError) as info:
        read_pgm(ascii_pgm)
    assert info.value.error_code == "INVALID_PGM"
    with pytest.raises(FileOperationError):
        read_pgm(tmp_path / "missing.pgm")


def test_mask_directory_naming(tmp_path):
    masks = {(0, 1): _columns(0, 2), (3, 0): _columns(2, 4)}
    write_masks(tmp_path, masks)
    (tmp_path / "notes.pgm").write_bytes(b"P5\n1 1\n255\n\x00")
    restored = read_masks(tmp_path)
    assert sorted(restored) == [(0, 1), (3, 0)]
    assert restored[(3, 0)].frame == 3 and restored[(3, 0)].view == 0


def _report():
    scores = pd.DataFrame(
        {"frame": [0, 0, 1, 1], "view": [0, 1, 0, 1], "overlap": [100.0, 80.0, 60.0, 60.0]},
        columns=["frame", "view", "overlap"],
    )
    return EvaluationReport(scores=scores, missing_frames=[2])


def test_report_aggregates_per_frame():
    report = _report()
    assert report.frame_scores.tolist() == [90.0, 60.0]
    assert report.mean == pytest.approx(75.0)
    assert report.std == pytest.approx(15.0), "Population std over frames"
    summary = report.to_dict()
    assert summary["n_frames"] == 2 and summary["n_views"] == 2
    assert summary["n_missing"] == 1 and summary["missing_frames"] == [2]
    assert summary["frame_scores"] == {"0": 90.0, "1": 60.0}
    assert "mean: 75.00 %" in report.to_text()


def test_empty_report_is_nan():
    report = EvaluationReport(scores=pd.DataFrame(columns=["frame", "view", "overlap"]))
    assert np.isnan(report.mean) and report.to_dict()["n_views"] == 0


def test_report_write(tmp_path):
    directory = _report().write(tmp_path / "eval", plot=True)
    assert json.loads((directory / "evaluation.json").read_text())["overlap_mean"] == pytest.approx(75.0)
    assert len(pd.read_csv(directory / "evaluation.csv")) == 4
    assert (directory / "evaluation.txt").read_text().startswith("Silhouette overlap")
    assert (directory / "overlap.png").exists()


def test_comparison_lists_methods_in_order(tmp_path):
    perfect = EvaluationReport(
        scores=pd.DataFrame({"frame": [0, 1], "view": [0, 0], "overlap": [100.0, 100.0]}),
        joint_rmse_mm=0.5,
    )
    reports = {"body_only": _report(), "unified_icp": perfect}
    table = compare_reports(reports)
    assert table.index.tolist() == ["body_only", "unified_icp"]
    assert table.loc["body_only", "overlap_mean"] == pytest.approx(75.0)
    assert table.loc["unified_icp", "joint_rmse_mm"] == 0.5
    assert table.loc["body_only", "n_missing"] == 1

    write_comparison(tmp_path / "eval", reports, plot=True)
    restored = pd.read_csv(tmp_path / "eval" / "comparison.csv", index_col="method")
    assert restored["overlap_mean"].tolist() == pytest.approx([75.0, 100.0])
    assert "unified_icp" in (tmp_path / "eval" / "comparison.txt").read_text()
    assert (tmp_path / "eval" / "comparison.png").exists()


def test_evaluate_masks_counts_missing_predictions():
    gt = {(0, 0): _columns(0, 4), (1, 0): _columns(0, 4)}
    report = evaluate_masks(gt, {(0, 0): _columns(0, 4)})
    assert report.mean == 100.0
    assert report.missing_frames == [1]


def test_evaluate_sequence_against_own_ground_truth(model, subject_params, cameras):
    fits = {0: FitResult(0, subject_params, {})}
    report = evaluate_sequence(model, fits, cameras[:2], gt_params={0: subject_params, 1: subject_params})
    assert report.scores["overlap"].tolist() == [100.0, 100.0]
    assert report.missing_frames == [1]
    assert report.joint_rmse_mm == 0.0
    assert all(v == 0.0 for v in report.parameter_rmse.values())
    assert report.jitter is None


def test_evaluate_sequence_needs_ground_truth(model, subject_params, cameras):
    with pytest.raises(MeasurementError) as info:
        evaluate_sequence(model, {0: FitResult(0, subject_params, {})}, cameras)
    assert info.value.error_code == "MISSING_GROUND_TRUTH"
