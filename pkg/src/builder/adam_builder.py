"""
End-to-end construction of an Adam model from a corpus of unified-model fits

Per corpus frame: normal displacements toward the cloud, then unposing with the
fit's skinning transforms. Across frames: PCA shape space, keypoint regressor
re-learning, and skinning/joint transfer from the unified model.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.builder.corpus import FitCorpus
from src.builder.displacements import default_smoothness_weights, solve_displacements
from src.builder.regressor import MIN_FRAMES, corpus_residual, regress_keypoint_targets
from src.builder.shape_space import ShapeSpace, build_shape_space
from src.builder.skinning_transfer import adam_rest_joints, joint_displacement_regressor, transfer_skinning
from src.evaluation.plots import plot_spectrum
from src.geometry.mesh import Mesh, build_laplacian
from src.kinematics.skeleton import unpose_vertices
from src.models.adam import AdamModel
from src.models.base import blend_rows
from src.models.unified import UnifiedModel
from src.utils.error_handling import ModelBuildError
from src.utils.logging_config import get_logger, log_data_operation
from src.utils.serialization import write_json

logger = get_logger(__name__)


@dataclass
class BuildConfig:
    n_components: int = 40
    smoothness: float = 1.0
    detail_weight: float = 10.0
    icp_max_dist: float = 0.05
    icp_max_normal_angle: float = float(np.deg2rad(60.0))
    apply_displacements: bool = True
    regress_keypoints: bool = True
    min_regressor_frames: int = MIN_FRAMES

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "BuildConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class BuildReport:
    n_frames: int
    n_subjects: int
    shape_space: Dict
    regressor_residual_before: float
    regressor_residual_after: float
    regressor_audit: Dict[str, Dict] = field(default_factory=dict)
    displacements: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def unposed_corpus_meshes(model: UnifiedModel, corpus: FitCorpus, config: BuildConfig) -> Tuple[np.ndarray, List[Dict]]:
    """Displaced, unposed output meshes (M, N, 3) plus per-frame displacement statistics"""
    weights = model.output_weights()
    detail = default_smoothness_weights(model.stitching.labels, config.detail_weight)
    rest: List[np.ndarray] = []
    stats: List[Dict] = []
    for entry in corpus:
        mesh = Mesh(entry.vertices, model.triangles)
        vertices = entry.vertices
        if config.apply_displacements and len(entry.measurement.cloud):
            field_ = solve_displacements(
                mesh,
                entry.measurement.cloud,
                build_laplacian(mesh),
                detail,
                config.smoothness,
                config.icp_max_dist,
                config.icp_max_normal_angle,
            )
            vertices = field_.apply(mesh)
            stats.append({"entry": entry.key, **field_.stats()})
        transforms = model.core.kinematic_state(entry.params).skinning
        rest.append(unpose_vertices(vertices, weights, transforms))
    return np.stack(rest), stats


def assemble_adam(model: UnifiedModel, space: ShapeSpace, keypoint_regressor=None) -> AdamModel:
    skeleton, weights = transfer_skinning(model)
    joint_regressor = joint_displacement_regressor(model.rest_mesh().vertices, model.rest_joints())
    skeleton = skeleton.with_rest_positions(adam_rest_joints(model, joint_regressor, space.mean))
    expression = blend_rows(model.stitching.blend, model.core.vertex_jacobian[:, :, model.layout.slice("face_expression")])
    return AdamModel(
        mean=space.mean,
        triangles=model.triangles,
        shape_basis=space.basis,
        expression_basis=expression,
        skeleton=skeleton,
        weights=weights,
        joint_regressor=joint_regressor,
        labels=model.stitching.labels,
        keypoint_regressor=keypoint_regressor if keypoint_regressor is not None else model.keypoint_regressor,
        shape_std=space.std,
    )


@log_data_operation(logger, "build_adam_model")
def build_adam_model(
    model: UnifiedModel, corpus: FitCorpus, config: Optional[BuildConfig] = None
) -> Tuple[AdamModel, BuildReport]:
    config = config or BuildConfig()
    if len(corpus) < 2:
        raise ModelBuildError(message="Building Adam needs at least two corpus frames", error_code="INSUFFICIENT_CORPUS")

    rest_meshes, displacement_stats = unposed_corpus_meshes(model, corpus, config)
    space = build_shape_space(rest_meshes, config.n_components)

    regressor = model.keypoint_regressor
    before = after = corpus_residual(corpus, regressor) if regressor is not None else 0.0
    audit: Dict[str, Dict] = {}
    if regressor is not None and config.regress_keypoints:
        regressor, audit = regress_keypoint_targets(
            corpus, regressor, model.rest_mesh().vertices, min_frames=config.min_regressor_frames
        )
        after = corpus_residual(corpus, regressor)

    adam = assemble_adam(model, space, regressor)
    report = BuildReport(
        n_frames=len(corpus),
        n_subjects=len(corpus.subjects),
        shape_space=space.to_dict(),
        regressor_residual_before=before,
        regressor_residual_after=after,
        regressor_audit=audit,
        displacements=displacement_stats,
    )
    logger.info(
        f"Adam built from {len(corpus)} frames: {space.n_components} shape components, "
        f"regressor residual {before * 1000:.2f} -> {after * 1000:.2f} mm"
    )
    return adam, report


def write_build_report(path: Union[str, Path], report: BuildReport, plot_path: Optional[Union[str, Path]] = None) -> Path:
    if plot_path is not None:
        plot_spectrum(report.shape_space["singular_values"], report.shape_space["explained_variance_ratio"], plot_path)
    return write_json(path, report.to_dict())
