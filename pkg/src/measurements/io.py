"""
Measurement file formats: JSON-lines detections, camera lists, 3D keypoints
"""

import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

from src.geometry.mesh import OrientedPointCloud
from src.geometry.mesh_io import read_ply
from src.measurements.cameras import Camera
from src.measurements.frames import Detection2D, Keypoint3D, MeasurementFrame
from src.measurements.triangulation import DEFAULT_MIN_CONFIDENCE, triangulate_frame
from src.utils.error_handling import FileOperationError, MeasurementError
from src.utils.logging_config import get_logger
from src.utils.serialization import read_json, to_jsonable, write_json

logger = get_logger(__name__)

PathLike = Union[str, Path]


def write_detections(path: PathLike, detections: Mapping[int, Sequence[Detection2D]]) -> Path:
    """One line per (frame, view): {frame, view, keypoints: [{id, u, v, conf}]}"""
    lines = []
    for frame in sorted(detections):
        by_view: Dict[int, List[Detection2D]] = defaultdict(list)
        for d in detections[frame]:
            by_view[d.view].append(d)
        for view in sorted(by_view):
            payload = {"frame": frame, "view": view, "keypoints": [d.to_dict() for d in by_view[view]]}
            lines.append(json.dumps(to_jsonable(payload), sort_keys=True))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in lines))
    except OSError as e:
        raise FileOperationError(message=f"Could not write {path}: {e}", error_code="FILE_OPERATION_FAILED")
    return path


def read_detections(path: PathLike) -> Dict[int, List[Detection2D]]:
    out: Dict[int, List[Detection2D]] = defaultdict(list)
    try:
        with open(path, "r") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                record = json.loads(line)
                for k in record["keypoints"]:
                    out[int(record["frame"])].append(
                        Detection2D(k["id"], float(k["u"]), float(k["v"]), float(k["conf"]), int(record["view"]))
                    )
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise FileOperationError(
            message=f"Could not read detections from {path}: {e}",
            error_code="FILE_OPERATION_FAILED",
            details={"file_path": str(path), "error_type": type(e).__name__},
        )
    return dict(out)


def write_cameras(path: PathLike, cameras: Sequence[Camera]) -> Path:
    return write_json(path, [camera.to_dict() for camera in sorted(cameras, key=lambda c: c.view)])


def read_cameras(path: PathLike) -> Dict[int, Camera]:
    cameras = [Camera.from_dict(c) for c in read_json(path)]
    return {c.view: c for c in cameras}


def write_keypoints(path: PathLike, frame: int, keypoints: Sequence[Keypoint3D]) -> Path:
    return write_json(path, {"frame": frame, "points": [k.to_dict() for k in keypoints]})


def read_keypoints(path: PathLike) -> MeasurementFrame:
    data = read_json(path)
    return MeasurementFrame(int(data["frame"]), tuple(Keypoint3D.from_dict(p) for p in data["points"]))


def load_frame(
    frame: int,
    keypoints_path: PathLike = None,
    detections_path: PathLike = None,
    cameras_path: PathLike = None,
    cloud_path: PathLike = None,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> MeasurementFrame:
    """Assemble a frame from precomputed 3D keypoints or from detections triangulated with cameras"""
    if keypoints_path is not None:
        measurement = read_keypoints(keypoints_path)
        keypoints = measurement.keypoints
    elif detections_path is not None and cameras_path is not None:
        detections = read_detections(detections_path).get(frame, [])
        keypoints, diagnostics = triangulate_frame(detections, read_cameras(cameras_path), min_confidence)
        if diagnostics["missing"]:
            logger.info(f"Frame {frame}: {len(diagnostics['missing'])} keypoints could not be triangulated")
    else:
        raise MeasurementError(
            message="A frame needs 3D keypoints or detections with cameras", error_code="MISSING_MEASUREMENTS"
        )
    cloud = read_ply(cloud_path) if cloud_path is not None else OrientedPointCloud.empty()
    return MeasurementFrame(frame, tuple(keypoints), cloud)
