"""
Sequence evaluation: multi-view silhouette overlap against ground-truth masks,
plus parameter and joint errors when synthetic ground truth is available
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.evaluation.plots import plot_overlap, plot_overlap_comparison
from src.evaluation.silhouette import SilhouetteMask, overlap_score, rasterize_silhouette
from src.fitting.fitter import FitResult
from src.geometry.mesh import Mesh
from src.measurements.cameras import Camera
from src.models.parameters import ParameterVector, block_rmse
from src.smoothing.temporal import jitter
from src.utils.error_handling import MeasurementError
from src.utils.logging_config import get_logger, log_data_operation
from src.utils.serialization import write_json

logger = get_logger(__name__)

PathLike = Union[str, Path]
MaskKey = Tuple[int, int]


@dataclass
class EvaluationReport:
    """Per-(frame, view) overlap table and the aggregates derived from it"""

    scores: pd.DataFrame
    missing_frames: List[int] = field(default_factory=list)
    parameter_rmse: Dict[str, float] = field(default_factory=dict)
    joint_rmse_mm: Optional[float] = None
    jitter: Optional[float] = None

    @property
    def frame_scores(self) -> pd.Series:
        if self.scores.empty:
            return pd.Series(dtype=float, name="overlap")
        return self.scores.groupby("frame")["overlap"].mean()

    @property
    def mean(self) -> float:
        values = self.frame_scores.to_numpy()
        return float(values.mean()) if len(values) else float("nan")

    @property
    def std(self) -> float:
        values = self.frame_scores.to_numpy()
        return float(values.std()) if len(values) else float("nan")

    def to_dict(self) -> Dict:
        return {
            "overlap_mean": self.mean,
            "overlap_std": self.std,
            "n_frames": int(len(self.frame_scores)),
            "n_views": int(self.scores["view"].nunique()) if not self.scores.empty else 0,
            "missing_frames": list(self.missing_frames),
            "n_missing": len(self.missing_frames),
            "frame_scores": {str(int(f)): float(s) for f, s in self.frame_scores.items()},
            "scores": [
                {"frame": int(r.frame), "view": int(r.view), "overlap": float(r.overlap)}
                for r in self.scores.itertuples(index=False)
            ],
            "parameter_rmse": dict(self.parameter_rmse),
            "joint_rmse_mm": self.joint_rmse_mm,
            "jitter": self.jitter,
        }

    def to_text(self) -> str:
        lines = [
            "Silhouette overlap",
            f"  frames evaluated: {len(self.frame_scores)}  missing: {len(self.missing_frames)}",
            f"  mean: {self.mean:.2f} %  std: {self.std:.2f} %",
        ]
        if self.joint_rmse_mm is not None:
            lines.append(f"  joint RMSE: {self.joint_rmse_mm:.3f} mm")
        for kind, value in sorted(self.parameter_rmse.items()):
            lines.append(f"  {kind} RMSE: {value:.6f}")
        if self.jitter is not None:
            lines.append(f"  jitter: {self.jitter:.6f} m")
        if not self.scores.empty:
            table = self.scores.pivot(index="frame", columns="view", values="overlap")
            table["mean"] = table.mean(axis=1)
            lines += ["", table.to_string(float_format=lambda v: f"{v:.2f}")]
        return "\n".join(lines) + "\n"

    def write(self, directory: PathLike, plot: bool = False) -> Path:
        """evaluation.json, evaluation.csv and evaluation.txt, plus overlap.png when `plot`"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_json(directory / "evaluation.json", self.to_dict())
        self.scores.to_csv(directory / "evaluation.csv", index=False, float_format="%.6f")
        (directory / "evaluation.txt").write_text(self.to_text())
        if plot:
            plot_overlap(self.scores, directory / "overlap.png")
        return directory


def _score(task: Tuple[Mesh, Camera, SilhouetteMask, int]) -> float:
    mesh, camera, gt, frame = task
    return overlap_score(gt, rasterize_silhouette(mesh, camera, frame))


def render_ground_truth(
    model, params: Mapping[int, ParameterVector], cameras: Sequence[Camera]
) -> Dict[MaskKey, SilhouetteMask]:
    """Masks of a known model state per (frame, view)"""
    masks: Dict[MaskKey, SilhouetteMask] = {}
    for frame in sorted(params):
        mesh = model.mesh(params[frame])
        for camera in cameras:
            masks[(frame, camera.view)] = rasterize_silhouette(mesh, camera, frame)
    return masks


@log_data_operation(logger, "evaluate_sequence")
def evaluate_sequence(
    model,
    fits: Mapping[int, FitResult],
    cameras: Union[Sequence[Camera], Mapping[int, Camera]],
    gt_masks: Optional[Mapping[MaskKey, SilhouetteMask]] = None,
    gt_params: Optional[Mapping[int, ParameterVector]] = None,
    gt_model=None,
    frames: Optional[Sequence[int]] = None,
    map_fn: Callable = map,
) -> EvaluationReport:
    """
    Score fitted frames against ground truth over every camera

    Ground-truth masks come from `gt_masks` or, failing that, are rendered from
    `gt_params` with `gt_model` (default `model`). Frames lacking a fit or any
    ground truth are skipped and counted as missing.
    """
    camera_list = sorted(cameras.values() if isinstance(cameras, Mapping) else cameras, key=lambda c: c.view)
    gt_model = gt_model if gt_model is not None else model
    if gt_masks is None and gt_params is None:
        raise MeasurementError(message="Evaluation needs ground-truth masks or parameters", error_code="MISSING_GROUND_TRUTH")
    if gt_masks is None:
        gt_masks = render_ground_truth(gt_model, gt_params or {}, camera_list)

    if frames is None:
        known = {f for f, _ in gt_masks} | set(gt_params or {})
        frames = sorted(known | set(fits))

    keys: List[MaskKey] = []
    tasks = []
    missing: List[int] = []
    evaluated: List[int] = []
    for frame in frames:
        views = [c for c in camera_list if (frame, c.view) in gt_masks]
        if frame not in fits or not views:
            missing.append(int(frame))
            continue
        mesh = model.mesh(fits[frame].params)
        for camera in views:
            keys.append((int(frame), camera.view))
            tasks.append((mesh, camera, gt_masks[(frame, camera.view)], int(frame)))
        evaluated.append(int(frame))

    overlaps = list(map_fn(_score, tasks))
    scores = pd.DataFrame(
        {"frame": [k[0] for k in keys], "view": [k[1] for k in keys], "overlap": overlaps},
        columns=["frame", "view", "overlap"],
    )
    report = EvaluationReport(scores=scores, missing_frames=missing)

    if gt_params:
        report.parameter_rmse, report.joint_rmse_mm = _ground_truth_errors(model, gt_model, fits, gt_params, evaluated)
    if len(evaluated) > 1:
        report.jitter = jitter([model.evaluate(fits[f].params).vertices for f in evaluated])

    if missing:
        logger.warning(f"Skipped {len(missing)} frames without fits or ground truth: {missing}")
    logger.info(f"Silhouette overlap over {len(evaluated)} frames: {report.mean:.2f} +/- {report.std:.2f} %")
    return report


def _ground_truth_errors(
    model, gt_model, fits: Mapping[int, FitResult], gt_params: Mapping[int, ParameterVector], frames: Sequence[int]
) -> Tuple[Dict[str, float], Optional[float]]:
    frames = [f for f in frames if f in gt_params]
    per_kind: Dict[str, List[float]] = {}
    joint_errors: List[np.ndarray] = []
    for f in frames:
        estimate, reference = fits[f].params, gt_params[f]
        if estimate.layout.names == reference.layout.names and estimate.layout.size == reference.layout.size:
            for kind, value in block_rmse(reference, estimate).items():
                per_kind.setdefault(kind, []).append(value**2)
        joints = model.evaluate(estimate).joints
        gt_joints = gt_model.evaluate(reference).joints
        if joints.shape == gt_joints.shape:
            joint_errors.append(np.linalg.norm(joints - gt_joints, axis=1))
    rmse = {kind: float(np.sqrt(np.mean(values))) for kind, values in per_kind.items()}
    joint_rmse = float(np.sqrt(np.mean(np.concatenate(joint_errors) ** 2)) * 1000.0) if joint_errors else None
    return rmse, joint_rmse


def evaluate_masks(
    gt_masks: Mapping[MaskKey, SilhouetteMask], pred_masks: Mapping[MaskKey, SilhouetteMask]
) -> EvaluationReport:
    """Score precomputed prediction masks; ground-truth frames without predictions count as missing"""
    keys = sorted(k for k in gt_masks if k in pred_masks)
    scores = pd.DataFrame(
        {
            "frame": [k[0] for k in keys],
            "view": [k[1] for k in keys],
            "overlap": [overlap_score(gt_masks[k], pred_masks[k]) for k in keys],
        },
        columns=["frame", "view", "overlap"],
    )
    scored = {k[0] for k in keys}
    missing = sorted({f for f, _ in gt_masks} - scored)
    if missing:
        logger.warning(f"Skipped {len(missing)} frames without predicted masks: {missing}")
    return EvaluationReport(scores=scores, missing_frames=missing)


def compare_reports(reports: Mapping[str, EvaluationReport]) -> pd.DataFrame:
    """One row per method, in the given order"""
    rows = [
        {
            "method": method,
            "overlap_mean": report.mean,
            "overlap_std": report.std,
            "n_frames": int(len(report.frame_scores)),
            "n_missing": len(report.missing_frames),
            "joint_rmse_mm": report.joint_rmse_mm,
        }
        for method, report in reports.items()
    ]
    columns = ["method", "overlap_mean", "overlap_std", "n_frames", "n_missing", "joint_rmse_mm"]
    return pd.DataFrame(rows, columns=columns).set_index("method")


def write_comparison(directory: PathLike, reports: Mapping[str, EvaluationReport], plot: bool = False) -> pd.DataFrame:
    """comparison.csv and comparison.txt, plus comparison.png when `plot`"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = compare_reports(reports)
    table.to_csv(directory / "comparison.csv", float_format="%.6f")
    text = table.to_string(float_format=lambda v: f"{v:.2f}", na_rep="-")
    (directory / "comparison.txt").write_text("Silhouette overlap by method\n\n" + text + "\n")
    if plot:
        frame_scores = {method: report.frame_scores for method, report in reports.items()}
        plot_overlap_comparison(frame_scores, directory / "comparison.png")
    return table
