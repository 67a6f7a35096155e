"""
BodyFit command-line interface

Examples:
 # Synthetic dataset of 8 subjects, 5 frames each
 bodyfit synth --out data/synth --subjects 8 --frames 5 --seed 1

 # Fit one frame from triangulated detections
 bodyfit fit-frame --model data/synth/model.json --detections data/synth/subjects/s00/detections.jsonl \\
   --cameras data/synth/cameras.json --frame 0 --out fit.json --obj fit.obj

 # Fit and smooth a sequence
 bodyfit fit-sequence --model adam.json --subject data/synth/subjects/s00 --out seq --smooth-passes 3

 # Build Adam from a corpus of unified fits
 bodyfit build-model --model data/synth/model.json --corpus corpus --out adam --K 40

 # Silhouette overlap of two mask directories
 bodyfit evaluate --gt-masks gt --pred-masks pred --out eval

 # Everything, end to end
 bodyfit pipeline --config configs/pipeline_config.json --workdir runs/desk
"""

import argparse
import sys
from typing import Callable, Dict, List, Optional

from dotenv import load_dotenv

from src.harness.commands import cmd_build, cmd_eval, cmd_fit_frame, cmd_fit_sequence, cmd_synth
from src.harness.config import LOG_LEVELS, RunConfig
from src.harness.pipeline import cmd_pipeline
from src.utils.error_handling import BodyFitError, ErrorContext
from src.utils.logging_config import BodyFitLogger, get_logger

logger = get_logger(__name__)


def positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{value}'")
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {number}")
    return number


def nonnegative_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{value}'")
    if number < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {number}")
    return number


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=str, help="Run configuration JSON (sections run, fit, synth, build, pipeline, acceptance)"
    )
    common.add_argument("--seed", type=nonnegative_int, help="Random seed; overrides run.seed")
    common.add_argument("--workers", type=positive_int, help="Worker processes; results do not depend on it")
    common.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, help="Console log level")

    parser = argparse.ArgumentParser(
        prog="bodyfit",
        description="Markerless whole-body capture: part-model fitting, Adam construction, smoothing and evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic model and capture dataset")
    p.add_argument("--out", required=True, help="Output dataset directory")
    p.add_argument("--subjects", type=positive_int, help="Number of subjects; overrides synth.subjects")
    p.add_argument("--frames", type=positive_int, help="Frames per subject; overrides synth.frames")
    p.add_argument("--views", type=positive_int, help="Cameras in the ring rig; overrides synth.views")
    p.add_argument("--keypoint-noise", type=float, help="3D keypoint noise sigma in meters")

    p = sub.add_parser("fit-frame", parents=[common], help="Fit one frame")
    p.add_argument("--model", required=True, help="Model archive (unified or Adam)")
    p.add_argument("--out", required=True, help="FitResult JSON path")
    p.add_argument("--frame", type=nonnegative_int, default=0, help="Frame id")
    p.add_argument("--keypoints", help="3D keypoint JSON")
    p.add_argument("--detections", help="2D detections JSONL (needs --cameras)")
    p.add_argument("--cameras", help="Camera list JSON")
    p.add_argument("--cloud", help="Oriented point cloud PLY")
    p.add_argument("--obj", help="Also export the fitted mesh as OBJ")

    p = sub.add_parser("fit-sequence", parents=[common], help="Fit every frame of a subject, then smooth")
    p.add_argument("--model", required=True, help="Model archive")
    p.add_argument("--subject", required=True, help="Subject directory (keypoints/, clouds/, detections.jsonl)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--cameras", help="Camera list JSON, needed when frames come from detections")
    p.add_argument("--smooth-passes", type=nonnegative_int, help="Smoothing passes; overrides pipeline.smooth_passes")
    p.add_argument("--flows", help="Flow directory (default: <subject>/flows)")
    p.add_argument("--epsilon", type=float, help="Forward-backward consistency threshold in meters")

    p = sub.add_parser("build-model", parents=[common], help="Build Adam from a corpus of unified fits")
    p.add_argument("--model", required=True, help="Unified model archive")
    p.add_argument("--corpus", required=True, help="Corpus directory containing corpus.json")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--K", dest="n_components", type=positive_int, help="Shape components; overrides build.n_components")
    p.add_argument("--plot", action="store_true", help="Write the spectrum figure")

    p = sub.add_parser("evaluate", parents=[common], help="Silhouette overlap and ground-truth errors")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--gt-masks", help="Ground-truth mask directory (f<frame>_v<view>.pgm)")
    p.add_argument("--pred-masks", help="Predicted mask directory; compared with --gt-masks directly")
    p.add_argument("--model", help="Model archive of the fits")
    p.add_argument("--fits", help="Directory of fit_f<frame>.json files")
    p.add_argument("--cameras", help="Camera list JSON")
    p.add_argument("--ground-truth", help="Ground-truth parameter JSON (synthetic data)")
    p.add_argument("--gt-model", help="Model archive the ground truth refers to (default --model)")
    p.add_argument("--plot", action="store_true", help="Write the per-frame overlap figure")

    p = sub.add_parser("pipeline", parents=[common], help="Synthesize, fit, build, smooth and evaluate")
    p.add_argument("--workdir", required=True, help="Directory for every artifact and the pipeline report")
    p.add_argument("--data", help="Existing dataset directory; skips synthesis")
    p.add_argument("--subjects", type=positive_int, help="Number of synthetic subjects; overrides synth.subjects")
    p.add_argument("--frames", type=positive_int, help="Frames per subject; overrides synth.frames")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "log_level": args.log_level,
        "synth.subjects": getattr(args, "subjects", None),
        "synth.frames": getattr(args, "frames", None),
        "synth.views": getattr(args, "views", None),
        "pipeline.smooth_passes": getattr(args, "smooth_passes", None),
        "pipeline.smooth_epsilon": getattr(args, "epsilon", None),
        "build.n_components": getattr(args, "n_components", None),
    }
    config = RunConfig.load(args.config).with_overrides(**overrides)
    noise = getattr(args, "keypoint_noise", None)
    if noise is not None:
        config = config.with_overrides(**{"synth.noise": {**config.synth.noise.to_dict(), "keypoint_sigma": noise}})
    return config


def _synth(config: RunConfig, args: argparse.Namespace) -> int:
    cmd_synth(config, args.out)
    return 0


def _fit_frame(config: RunConfig, args: argparse.Namespace) -> int:
    cmd_fit_frame(
        config, args.model, args.out, args.frame, args.keypoints, args.detections, args.cameras, args.cloud, args.obj
    )
    return 0


def _fit_sequence(config: RunConfig, args: argparse.Namespace) -> int:
    cmd_fit_sequence(config, args.model, args.subject, args.out, args.cameras, config.pipeline.smooth_passes, args.flows)
    return 0


def _build(config: RunConfig, args: argparse.Namespace) -> int:
    cmd_build(config, args.model, args.corpus, args.out, plot=args.plot)
    return 0


def _evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    cmd_eval(
        config,
        args.out,
        gt_masks_dir=args.gt_masks,
        pred_masks_dir=args.pred_masks,
        model_path=args.model,
        fits_dir=args.fits,
        cameras_path=args.cameras,
        ground_truth_path=args.ground_truth,
        gt_model_path=args.gt_model,
        plot=args.plot,
    )
    return 0


def _pipeline(config: RunConfig, args: argparse.Namespace) -> int:
    return cmd_pipeline(config, args.workdir, args.data)


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "synth": _synth,
    "fit-frame": _fit_frame,
    "fit-sequence": _fit_sequence,
    "build-model": _build,
    "evaluate": _evaluate,
    "pipeline": _pipeline,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on a BodyFit error, 2 on usage errors (via argparse)"""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level:
        BodyFitLogger.set_level(args.log_level)

    try:
        with ErrorContext(args.command, logger):
            config = resolve_config(args)
            BodyFitLogger.set_level(config.log_level)
            return COMMANDS[args.command](config, args)
    except BodyFitError as e:
        print(f"bodyfit {args.command} failed: [{e.error_code}] {e.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
