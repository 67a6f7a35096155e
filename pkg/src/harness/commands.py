"""
Command implementations shared by the CLI and the pipeline orchestrator
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.builder.adam_builder import BuildReport, build_adam_model, write_build_report
from src.builder.corpus import FitCorpus, read_corpus, write_corpus
from src.evaluation.report import EvaluationReport, evaluate_masks, evaluate_sequence
from src.evaluation.silhouette import mask_filename, rasterize_silhouette, read_masks, write_pgm
from src.fitting.config import FitConfig
from src.fitting.fitter import FitResult, fit_frame, read_fit, write_fit
from src.geometry.mesh_io import write_obj, write_ply
from src.harness.config import RunConfig, SynthConfig
from src.harness.dataset import (
    DATASET_FORMAT,
    DATASET_VERSION,
    SubjectData,
    frame_stem,
    read_ground_truth,
    subject_name,
    write_ground_truth,
)
from src.harness.workers import mapper, ordered_map, spawn_seeds
from src.measurements.cameras import Camera, make_camera_rig
from src.measurements.frames import MeasurementFrame
from src.measurements.io import load_frame, read_cameras, write_cameras, write_detections, write_keypoints
from src.measurements.synthesis import synthesize_measurements
from src.models.adam import AdamModel
from src.models.archive import load_model, save_model
from src.models.parameters import ParameterVector
from src.models.synthetic import generate_synthetic_model, sample_pose, sample_subject
from src.models.unified import UnifiedModel
from src.smoothing.flow import read_flows, synthesize_flows, write_flows
from src.smoothing.temporal import smooth_sequence
from src.utils.error_handling import ConfigurationError, ModelError, validate_file_path
from src.utils.logging_config import get_logger, log_data_operation
from src.utils.serialization import write_json

logger = get_logger(__name__)

PathLike = Union[str, Path]


# synth


@dataclass
class _SubjectTask:
    model: UnifiedModel
    cameras: List[Camera]
    synth: SynthConfig
    name: str
    seed: np.random.SeedSequence
    directory: Path


def _synthesize_subject(task: _SubjectTask) -> Dict:
    """Ground truth, measurements, masks and flows of one subject's clip"""
    model, synth = task.model, task.synth
    rng = np.random.default_rng(task.seed)
    identity = sample_subject(model, rng, shape_std=synth.shape_std)
    start = sample_pose(model, rng, identity, pose_std=synth.pose_std)
    end = sample_pose(model, rng, identity, pose_std=synth.pose_std)

    truth: Dict[int, ParameterVector] = {}
    meshes: Dict[int, np.ndarray] = {}
    detections = {}
    n_keypoints = 0
    for t in range(synth.frames):
        s = synth.motion * t / (synth.frames - 1) if synth.frames > 1 else 0.0
        params = ParameterVector(model.layout, (1.0 - s) * start.values + s * end.values)
        measurement, detections[t] = synthesize_measurements(model, params, task.cameras, synth.noise, rng, frame=t)
        write_keypoints(task.directory / "keypoints" / f"{frame_stem(t)}.json", t, measurement.keypoints)
        if len(measurement.cloud):
            write_ply(measurement.cloud, task.directory / "clouds" / f"{frame_stem(t)}.ply")
        mesh = model.mesh(params)
        for camera in task.cameras[: synth.mask_views]:
            write_pgm(task.directory / "masks" / mask_filename(t, camera.view), rasterize_silhouette(mesh, camera, t))
        truth[t] = params
        meshes[t] = mesh.vertices
        n_keypoints += len(measurement.keypoints)

    write_detections(task.directory / "detections.jsonl", detections)
    write_ground_truth(task.directory / "ground_truth.json", truth)
    write_flows(task.directory / "flows", synthesize_flows(meshes, synth.flow_sigma, rng))
    return {"subject": task.name, "frames": synth.frames, "keypoints": n_keypoints}


@log_data_operation(logger, "synth")
def cmd_synth(config: RunConfig, out: PathLike) -> Dict:
    """Synthetic model, camera rig and per-subject captures; identical bytes for a fixed seed"""
    synth = config.synth.validate()
    out = Path(out)
    model = generate_synthetic_model(synth.model)
    cameras = make_camera_rig(
        synth.views, synth.rig_radius, synth.rig_height, focal=synth.focal, width=synth.width, image_height=synth.height
    )
    save_model(model, out / "model.json")
    write_cameras(out / "cameras.json", cameras)

    names = [subject_name(i) for i in range(synth.subjects)]
    tasks = [
        _SubjectTask(model, cameras, synth, name, seed, out / "subjects" / name)
        for name, seed in zip(names, spawn_seeds(config.seed, len(names)))
    ]
    summaries = ordered_map(_synthesize_subject, tasks, config.workers, desc="synth")
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": config.seed,
        "subjects": names,
        "frames": list(range(synth.frames)),
        "views": [c.view for c in cameras],
        "mask_views": [c.view for c in cameras[: synth.mask_views]],
        "summaries": summaries,
        "synth": synth.to_dict(),
    }
    write_json(out / "dataset.json", manifest)
    logger.info(f"Synthesized {len(names)} subjects x {synth.frames} frames into {out}")
    return manifest


# fitting


@dataclass
class _FitTask:
    model: object
    frame: MeasurementFrame
    config: FitConfig
    init: Optional[ParameterVector] = None


def _fit(task: _FitTask) -> FitResult:
    return fit_frame(task.model, task.frame, task.config, init=task.init)


def fit_frames(
    model,
    frames: Mapping[int, MeasurementFrame],
    config: RunConfig,
    desc: str = "fit",
    fit_config: Optional[FitConfig] = None,
) -> Dict[int, FitResult]:
    """Independent per-frame fits; `fit_config` replaces `config.fit` when given"""
    order = sorted(frames)
    fit_config = fit_config or config.fit
    results = ordered_map(_fit, [_FitTask(model, frames[t], fit_config) for t in order], config.workers, desc=desc)
    return dict(zip(order, results))


def write_fits(directory: PathLike, fits: Mapping[int, FitResult]) -> Path:
    directory = Path(directory)
    for t in sorted(fits):
        write_fit(directory / f"fit_{frame_stem(t)}.json", fits[t])
    return directory


def read_fits(directory: PathLike, layout=None) -> Dict[int, FitResult]:
    fits = [read_fit(path, layout) for path in sorted(Path(directory).glob("fit_f*.json"))]
    return {fit.frame: fit for fit in fits}


def cmd_fit_frame(
    config: RunConfig,
    model_path: PathLike,
    out: PathLike,
    frame: int = 0,
    keypoints_path: Optional[PathLike] = None,
    detections_path: Optional[PathLike] = None,
    cameras_path: Optional[PathLike] = None,
    cloud_path: Optional[PathLike] = None,
    obj_path: Optional[PathLike] = None,
) -> FitResult:
    for path in (model_path, keypoints_path, detections_path, cameras_path, cloud_path):
        if path is not None:
            validate_file_path(path, logger)
    model = load_model(model_path)
    measurement = load_frame(frame, keypoints_path, detections_path, cameras_path, cloud_path)
    result = fit_frame(model, measurement, config.fit)
    write_fit(out, result)
    if obj_path is not None:
        write_obj(model.mesh(result.params), obj_path)
    logger.info(f"Frame {frame}: total cost {result.total_cost:.6e}, fit written to {out}")
    return result


def fit_subject_sequence(
    model, subject: SubjectData, config: RunConfig, smooth_passes: int = 0, flows_dir: Optional[PathLike] = None
) -> Tuple[Dict[int, FitResult], Dict[int, FitResult]]:
    """Independent per-frame fits, then flow smoothing when passes > 0 and flows exist"""
    frames = subject.measurement_frames()
    raw = fit_frames(model, frames, config, desc=f"fit {subject.name}")
    if smooth_passes <= 0:
        return raw, raw
    flows = read_flows(flows_dir) if flows_dir is not None else subject.flows()
    if not flows:
        logger.warning(f"No flows for {subject.name}; smoothing skipped")
        return raw, raw
    smoothed = smooth_sequence(
        model,
        frames,
        raw,
        flows,
        config.fit,
        passes=smooth_passes,
        epsilon=config.pipeline.smooth_epsilon,
        map_fn=mapper(config.workers, desc="smooth"),
    )
    return raw, smoothed


@log_data_operation(logger, "fit_sequence")
def cmd_fit_sequence(
    config: RunConfig,
    model_path: PathLike,
    subject_dir: PathLike,
    out: PathLike,
    cameras_path: Optional[PathLike] = None,
    smooth_passes: Optional[int] = None,
    flows_dir: Optional[PathLike] = None,
) -> Dict[int, FitResult]:
    model = load_model(model_path)
    passes = config.pipeline.smooth_passes if smooth_passes is None else smooth_passes
    raw, smoothed = fit_subject_sequence(model, SubjectData(subject_dir, cameras_path), config, passes, flows_dir)
    out = Path(out)
    write_fits(out / "fits", smoothed)
    if smoothed is not raw:
        write_fits(out / "fits_unsmoothed", raw)
    return smoothed


# model building


def fit_corpus(
    model: UnifiedModel, subjects: Sequence[SubjectData], config: RunConfig
) -> Tuple[FitCorpus, Dict[str, FitResult]]:
    """Unified-model fits of every frame of every subject"""
    subject_fits: Dict[str, List[FitResult]] = {}
    frames: Dict[str, List[MeasurementFrame]] = {}
    keyed: Dict[str, FitResult] = {}
    for subject in subjects:
        measurements = subject.measurement_frames()
        fits = fit_frames(model, measurements, config, desc=f"fit {subject.name}")
        subject_fits[subject.name] = [fits[t] for t in sorted(fits)]
        frames[subject.name] = [measurements[t] for t in sorted(measurements)]
        keyed.update({f"{subject.name}_{frame_stem(t)}": fits[t] for t in fits})
    return FitCorpus.from_fits(model, subject_fits, frames), keyed


@log_data_operation(logger, "build_model")
def cmd_build(
    config: RunConfig,
    model_path: PathLike,
    corpus_dir: PathLike,
    out: PathLike,
    n_components: Optional[int] = None,
    plot: bool = False,
) -> Tuple[AdamModel, BuildReport]:
    model = load_model(model_path)
    if not isinstance(model, UnifiedModel):
        raise ModelError(message="Adam is built from a unified model archive", error_code="UNKNOWN_MODEL_TYPE")
    if n_components is not None:
        config = config.with_overrides(**{"build.n_components": n_components})
    corpus = read_corpus(corpus_dir)
    if config.pipeline.check_corpus:
        corpus.check(model, tol=1e-9)
    adam, report = build_adam_model(model, corpus, config.build)
    out = Path(out)
    save_model(adam, out / "adam.json")
    write_build_report(out / "build_report.json", report, out / "spectrum.png" if plot else None)
    return adam, report


def write_fit_corpus(directory: PathLike, model: UnifiedModel, corpus: FitCorpus, fits: Dict[str, FitResult]) -> Path:
    return write_corpus(directory, corpus, model.triangles, fits)


# evaluation


def cmd_eval(
    config: RunConfig,
    out: PathLike,
    gt_masks_dir: Optional[PathLike] = None,
    pred_masks_dir: Optional[PathLike] = None,
    model_path: Optional[PathLike] = None,
    fits_dir: Optional[PathLike] = None,
    cameras_path: Optional[PathLike] = None,
    ground_truth_path: Optional[PathLike] = None,
    gt_model_path: Optional[PathLike] = None,
    plot: bool = False,
) -> EvaluationReport:
    """
    Either compare two mask directories, or render fits through cameras and
    compare them with ground-truth masks and/or ground-truth parameters
    """
    if pred_masks_dir is not None:
        if gt_masks_dir is None:
            raise ConfigurationError(message="Comparing masks needs --gt-masks", error_code="INVALID_ARGUMENTS")
        report = evaluate_masks(read_masks(gt_masks_dir), read_masks(pred_masks_dir))
    else:
        if model_path is None or fits_dir is None or cameras_path is None:
            raise ConfigurationError(
                message="Evaluating fits needs --model, --fits and --cameras", error_code="INVALID_ARGUMENTS"
            )
        model = load_model(model_path)
        gt_model = load_model(gt_model_path) if gt_model_path is not None else model
        cameras = read_cameras(cameras_path)
        gt_masks = read_masks(gt_masks_dir) if gt_masks_dir is not None else None
        gt_params = read_ground_truth(ground_truth_path, gt_model.layout) if ground_truth_path is not None else None
        report = evaluate_sequence(
            model,
            read_fits(fits_dir, model.layout),
            cameras,
            gt_masks=gt_masks,
            gt_params=gt_params,
            gt_model=gt_model,
            map_fn=mapper(config.workers, desc="evaluate"),
        )
    report.write(out, plot=plot)
    logger.info(f"Mean overlap {report.mean:.2f} % (std {report.std:.2f}) written to {out}")
    return report
