"""
Staged per-frame fitting of the unified and Adam models

Stage A aligns the global rotation and translation to the torso keypoints
under strong priors. Stage B adds every keypoint with relaxed priors and frees
all parameters. Stage C adds point-to-plane ICP and re-solves once per
correspondence round.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.fitting.config import STAGES, FitConfig, LMSettings
from src.fitting.lm import LMDiagnostics, levenberg_marquardt
from src.fitting.residuals import (
    Correspondences,
    ResidualBlock,
    VertexTargets,
    candidate_residuals,
    find_correspondences,
    icp_residuals,
    keypoint_residuals,
    prior_residuals,
    seam_residuals,
    stack_blocks,
)
from src.geometry.mesh import OrientedPointCloud, PointCloudIndex
from src.kinematics.rotations import matrix_to_angle_axis
from src.measurements.frames import MeasurementFrame
from src.measurements.keypoints import TORSO_KEYPOINTS
from src.models.adam import AdamModel
from src.models.parameters import ParameterLayout, ParameterVector
from src.utils.error_handling import FittingError
from src.utils.logging_config import BodyFitLogger, get_logger
from src.utils.serialization import read_json, write_json

logger = get_logger(__name__)


@dataclass
class StageDiagnostics:
    stage: str
    round: int
    solver: LMDiagnostics
    correspondences: int = 0

    def to_dict(self) -> Dict:
        return {"stage": self.stage, "round": self.round, "correspondences": self.correspondences, **self.solver.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict) -> "StageDiagnostics":
        return cls(data["stage"], int(data["round"]), LMDiagnostics.from_dict(data), int(data.get("correspondences", 0)))


@dataclass
class FitResult:
    frame: int
    params: ParameterVector
    costs: Dict[str, float]
    stages: List[StageDiagnostics] = field(default_factory=list)
    icp_correspondences: List[int] = field(default_factory=list)
    skipped_keypoints: List[str] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs.values()))

    def to_dict(self) -> Dict:
        return {
            "frame": self.frame,
            "parameters": self.params.to_dict(),
            "layout": self.params.layout.to_dict(),
            "costs": dict(self.costs),
            "total_cost": self.total_cost,
            "stages": [s.to_dict() for s in self.stages],
            "icp_correspondences": list(self.icp_correspondences),
            "skipped_keypoints": list(self.skipped_keypoints),
        }

    @classmethod
    def from_dict(cls, data: Dict, layout: Optional[ParameterLayout] = None) -> "FitResult":
        layout = layout or ParameterLayout.from_dict(data["layout"])
        return cls(
            frame=int(data["frame"]),
            params=ParameterVector.from_dict(layout, data["parameters"]),
            costs={k: float(v) for k, v in data["costs"].items()},
            stages=[StageDiagnostics.from_dict(s) for s in data.get("stages", [])],
            icp_correspondences=[int(c) for c in data.get("icp_correspondences", [])],
            skipped_keypoints=list(data.get("skipped_keypoints", [])),
        )


def write_fit(path: Union[str, Path], result: FitResult) -> Path:
    return write_json(path, result.to_dict())


def read_fit(path: Union[str, Path], layout: Optional[ParameterLayout] = None) -> FitResult:
    return FitResult.from_dict(read_json(path), layout)


class Objective:
    """Term set of one solve; evaluates the model once per call and stacks the blocks"""

    def __init__(
        self,
        model,
        layout: ParameterLayout,
        config: FitConfig,
        stage: str,
        frame: MeasurementFrame,
        correspondences: Optional[Correspondences] = None,
        candidates: Optional[VertexTargets] = None,
    ):
        self.model = model
        self.layout = layout
        self.config = config
        self.stage = stage
        self.frame = frame
        self.correspondences = correspondences
        self.candidates = candidates
        self.with_seam = getattr(model, "stitching", None) is not None
        self.prior_weights = {kind: config.prior_weight(kind, stage) for kind in config.prior_weights}

    def blocks(self, values: np.ndarray) -> List[ResidualBlock]:
        params = ParameterVector(self.layout, values)
        ev = self.model.evaluate(params, jacobian=True)
        blocks = [keypoint_residuals(params, self.model, self.frame, self.config.lambda_keypoints, ev)]
        if self.correspondences is not None:
            blocks.append(icp_residuals(params, self.model, self.correspondences, self.config.lambda_icp, ev))
        if self.with_seam:
            blocks.append(seam_residuals(params, self.model, self.config.lambda_seam, ev))
        if self.candidates is not None:
            blocks.append(candidate_residuals(params, self.model, self.candidates, self.config.effective_candidate_weight, ev))
        blocks.append(prior_residuals(params, self.prior_weights))
        return blocks

    def __call__(self, values: np.ndarray):
        return stack_blocks(self.blocks(values), self.layout.size)

    def costs(self, values: np.ndarray) -> Dict[str, float]:
        return {b.name: b.cost for b in self.blocks(values)}


def kabsch(source: np.ndarray, target: np.ndarray):
    """Rotation R and translation t minimizing ||R source + t - target||"""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_t - R @ mu_s


def cold_start(model, frame: MeasurementFrame) -> ParameterVector:
    """Root rotation and translation from a rigid fit of the rest-pose torso keypoints"""
    if not frame.has(TORSO_KEYPOINTS) or model.keypoint_regressor is None:
        raise FittingError(
            message=f"Frame {frame.frame} lacks the torso keypoints needed for a cold start",
            error_code="COLD_START_FAILED",
            details={"frame": frame.frame, "required": list(TORSO_KEYPOINTS), "present": frame.ids},
        )
    regressor = model.keypoint_regressor
    missing = [k for k in TORSO_KEYPOINTS if regressor.row(k) is None]
    if missing:
        raise FittingError(message=f"Model cannot predict torso keypoints {missing}", error_code="COLD_START_FAILED")

    params = model.zeros()
    rest = model.keypoints(params)[[regressor.row(k) for k in TORSO_KEYPOINTS]]
    observed = np.stack([frame.keypoint(k).position for k in TORSO_KEYPOINTS])
    R, t = kabsch(rest, observed)
    # posed = R (x - root) + root + translation
    root = model.core.rest_joints[0]
    values = params.values.copy()
    values[model.core.columns.translation] = t + R @ root - root
    values[model.core.columns.rotation[0]] = matrix_to_angle_axis(R)[0]
    return ParameterVector(params.layout, values)


def _solve(objective: Objective, params: ParameterVector, free: np.ndarray, settings: LMSettings, name: str):
    values, diagnostics = levenberg_marquardt(objective, params.values, settings, free, name)
    return ParameterVector(params.layout, values), diagnostics


def fit_frame(
    model,
    frame: MeasurementFrame,
    config: Optional[FitConfig] = None,
    init: Optional[ParameterVector] = None,
    stages: Sequence[str] = STAGES,
    candidates: Optional[VertexTargets] = None,
    exclusion: Optional[np.ndarray] = None,
) -> FitResult:
    """Fit one frame independently of every other frame"""
    config = (config or FitConfig()).validate()
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise FittingError(message=f"Unknown stages {unknown}", error_code="INVALID_STAGE")
    start = time.time()

    params = init.copy() if init is not None else cold_start(model, frame)
    layout = params.layout
    if layout != model.layout:
        raise FittingError(message="Initial parameters do not match the model layout", error_code="LAYOUT_MISMATCH")
    free_all = ~layout.frozen_mask()
    unknown = [name for name in config.frozen_blocks if not layout.has(name)]
    if unknown:
        raise FittingError(message=f"Unknown frozen blocks {unknown}", error_code="UNKNOWN_BLOCK")
    for name in config.frozen_blocks:
        free_all[layout.slice(name)] = False
    free_global = np.zeros(layout.size, dtype=bool)
    free_global[list(layout.unregularized)] = True
    free_global &= free_all

    if candidates is not None:
        candidates = candidates.strided(config.candidate_stride)
    exclusion = exclusion if exclusion is not None else frame.exclusion
    if exclusion is None:
        exclusion = model.default_icp_exclusion()

    diagnostics: List[StageDiagnostics] = []
    counts: List[int] = []
    objective: Optional[Objective] = None

    for stage in STAGES:
        if stage not in stages:
            continue
        settings = LMSettings(
            config.lm.gradient_tolerance, config.lm.step_tolerance, config.lm.initial_damping, config.stage_iterations[stage]
        )
        name = f"frame{frame.frame}:{stage}"
        if stage == "A":
            objective = Objective(model, layout, config, stage, frame.subset(TORSO_KEYPOINTS))
            params, solver = _solve(objective, params, free_global, settings, name)
            diagnostics.append(StageDiagnostics(stage, 0, solver))
        elif stage == "B":
            objective = Objective(model, layout, config, stage, frame, candidates=candidates)
            params, solver = _solve(objective, params, free_all, settings, name)
            diagnostics.append(StageDiagnostics(stage, 0, solver))
        else:
            index = PointCloudIndex(frame.cloud) if len(frame.cloud) else None
            for round_ in range(config.icp_rounds):
                correspondences = Correspondences.empty()
                if index is not None:
                    vertices = model.evaluate(params).vertices
                    correspondences = find_correspondences(
                        vertices, model.triangles, index, config.icp_max_dist, config.icp_max_normal_angle, exclusion
                    )
                counts.append(len(correspondences))
                objective = Objective(model, layout, config, stage, frame, correspondences, candidates)
                params, solver = _solve(objective, params, free_all, settings, f"{name}:{round_}")
                diagnostics.append(StageDiagnostics(stage, round_, solver, len(correspondences)))
                if index is None:
                    break

    if objective is None:
        objective = Objective(model, layout, config, "B", frame, candidates=candidates)
    costs = objective.costs(params.values)
    skipped = [k for k in frame.ids if model.keypoint_regressor is None or model.keypoint_regressor.row(k) is None]
    result = FitResult(frame.frame, params, costs, diagnostics, counts, skipped)
    BodyFitLogger.log_performance_metrics(
        logger, "fit_frame", time.time() - start, frame=frame.frame, total_cost=result.total_cost, stages=list(stages)
    )
    return result


def fit_adam_frame(
    model: AdamModel,
    frame: MeasurementFrame,
    config: Optional[FitConfig] = None,
    init: Optional[ParameterVector] = None,
    stages: Sequence[str] = STAGES,
    candidates: Optional[VertexTargets] = None,
    exclusion: Optional[np.ndarray] = None,
) -> FitResult:
    """Adam objective: the frame objective without the seam term"""
    if not isinstance(model, AdamModel):
        raise FittingError(message="fit_adam_frame expects an AdamModel", error_code="UNKNOWN_MODEL_TYPE")
    return fit_frame(model, frame, config, init, stages, candidates, exclusion)


def cloud_distance(model, params: ParameterVector, cloud: OrientedPointCloud, exclusion: Optional[np.ndarray] = None) -> float:
    """Median distance from model vertices to their nearest cloud point"""
    if len(cloud) == 0:
        return float("inf")
    vertices = model.evaluate(params).vertices
    if exclusion is not None:
        vertices = vertices[~np.asarray(exclusion, dtype=bool)]
    return float(np.median(PointCloudIndex(cloud).nearest_distances(vertices)))
