"""
On-disk layout of a capture dataset, synthetic or real

    dataset.json                 manifest (subjects, frames, views, seed)
    model.json                   unified model archive used to synthesize
    cameras.json
    subjects/<name>/
        ground_truth.json        per-frame parameters (synthetic only)
        detections.jsonl
        keypoints/f0000.json     3D keypoints
        clouds/f0000.ply         oriented point clouds
        masks/f0000_v00.pgm      silhouettes
        flows/flow_0000.json     per-vertex flows
"""

from pathlib import Path
from typing import Dict, List, Optional, Union

from src.evaluation.silhouette import SilhouetteMask, read_masks
from src.geometry.mesh import OrientedPointCloud
from src.geometry.mesh_io import read_ply
from src.measurements.cameras import Camera
from src.measurements.frames import MeasurementFrame
from src.measurements.io import load_frame, read_cameras, read_detections
from src.models.parameters import ParameterLayout, ParameterVector
from src.smoothing.flow import VertexFlowField, read_flows
from src.utils.error_handling import FileOperationError
from src.utils.serialization import read_json, write_json

PathLike = Union[str, Path]

DATASET_FORMAT = "bodyfit-dataset"
DATASET_VERSION = 1


def subject_name(index: int) -> str:
    return f"s{index:02d}"


def frame_stem(frame: int) -> str:
    return f"f{frame:04d}"


def write_ground_truth(path: PathLike, params: Dict[int, ParameterVector]) -> Path:
    frames = sorted(params)
    layout = params[frames[0]].layout.to_dict() if frames else None
    return write_json(path, {"layout": layout, "frames": {str(t): params[t].to_dict() for t in frames}})


def read_ground_truth(path: PathLike, layout: Optional[ParameterLayout] = None) -> Dict[int, ParameterVector]:
    data = read_json(path)
    layout = layout or ParameterLayout.from_dict(data["layout"])
    return {int(t): ParameterVector.from_dict(layout, values) for t, values in data["frames"].items()}


class SubjectData:
    """Measurement files of one subject"""

    def __init__(self, directory: PathLike, cameras_path: Optional[PathLike] = None):
        self.directory = Path(directory)
        self.cameras_path = Path(cameras_path) if cameras_path is not None else None
        if not self.directory.is_dir():
            raise FileOperationError(message=f"Subject directory {self.directory} not found", error_code="FILE_NOT_FOUND")

    @property
    def name(self) -> str:
        return self.directory.name

    def frames(self) -> List[int]:
        keypoint_files = sorted((self.directory / "keypoints").glob("f*.json"))
        if keypoint_files:
            return [int(p.stem[1:]) for p in keypoint_files]
        detections = self.directory / "detections.jsonl"
        if detections.exists():
            return sorted(read_detections(detections))
        return []

    def frame(self, t: int, min_confidence: Optional[float] = None) -> MeasurementFrame:
        keypoints = self.directory / "keypoints" / f"{frame_stem(t)}.json"
        cloud = self.directory / "clouds" / f"{frame_stem(t)}.ply"
        kwargs = {} if min_confidence is None else {"min_confidence": min_confidence}
        if keypoints.exists():
            return load_frame(t, keypoints_path=keypoints, cloud_path=cloud if cloud.exists() else None)
        return load_frame(
            t,
            detections_path=self.directory / "detections.jsonl",
            cameras_path=self.cameras_path,
            cloud_path=cloud if cloud.exists() else None,
            **kwargs,
        )

    def measurement_frames(self) -> Dict[int, MeasurementFrame]:
        return {t: self.frame(t) for t in self.frames()}

    def cloud(self, t: int) -> OrientedPointCloud:
        path = self.directory / "clouds" / f"{frame_stem(t)}.ply"
        return read_ply(path) if path.exists() else OrientedPointCloud.empty()

    def ground_truth(self, layout: Optional[ParameterLayout] = None) -> Dict[int, ParameterVector]:
        path = self.directory / "ground_truth.json"
        return read_ground_truth(path, layout) if path.exists() else {}

    def masks(self) -> Dict:
        directory = self.directory / "masks"
        return read_masks(directory) if directory.is_dir() else {}

    def flows(self) -> Dict[int, VertexFlowField]:
        directory = self.directory / "flows"
        return read_flows(directory) if directory.is_dir() else {}


class Dataset:
    def __init__(self, root: PathLike):
        self.root = Path(root)
        manifest = self.root / "dataset.json"
        if not manifest.exists():
            raise FileOperationError(message=f"No dataset manifest in {self.root}", error_code="FILE_NOT_FOUND")
        self.manifest = read_json(manifest)
        if self.manifest.get("format") != DATASET_FORMAT or self.manifest.get("version") != DATASET_VERSION:
            raise FileOperationError(
                message=f"{manifest} is not a version {DATASET_VERSION} dataset", error_code="INVALID_DATASET"
            )

    @property
    def subjects(self) -> List[str]:
        return list(self.manifest["subjects"])

    @property
    def model_path(self) -> Path:
        return self.root / "model.json"

    @property
    def cameras_path(self) -> Path:
        return self.root / "cameras.json"

    def cameras(self) -> Dict[int, Camera]:
        return read_cameras(self.cameras_path)

    def subject(self, name: str) -> SubjectData:
        return SubjectData(self.root / "subjects" / name, self.cameras_path)

    def masks(self, name: str) -> Dict[tuple, SilhouetteMask]:
        return self.subject(name).masks()
