"""
Per-frame measurement containers: 2D detections, 3D keypoints and point clouds
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.geometry.mesh import OrientedPointCloud
from src.measurements.keypoints import keypoint_group
from src.utils.error_handling import MeasurementError


@dataclass(frozen=True)
class Detection2D:
    keypoint_id: str
    u: float
    v: float
    confidence: float
    view: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise MeasurementError(
                message=f"Detection confidence {self.confidence} outside [0, 1]",
                error_code="INVALID_CONFIDENCE",
                details={"id": self.keypoint_id, "view": self.view},
            )

    @property
    def pixel(self) -> np.ndarray:
        return np.array([self.u, self.v])

    def to_dict(self) -> Dict:
        return {"id": self.keypoint_id, "u": self.u, "v": self.v, "conf": self.confidence}


@dataclass(frozen=True)
class Keypoint3D:
    keypoint_id: str
    position: np.ndarray
    support: int = 2

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.support < 2:
            raise MeasurementError(
                message=f"Keypoint {self.keypoint_id} needs support from at least 2 views",
                error_code="INSUFFICIENT_SUPPORT",
            )

    def to_dict(self) -> Dict:
        x, y, z = self.position.tolist()
        return {"id": self.keypoint_id, "x": x, "y": y, "z": z, "support": self.support}

    @classmethod
    def from_dict(cls, data: Dict) -> "Keypoint3D":
        return cls(data["id"], np.array([data["x"], data["y"], data["z"]]), int(data.get("support", 2)))


@dataclass
class MeasurementFrame:
    """Everything the fitter sees for one frame"""

    frame: int
    keypoints: Tuple[Keypoint3D, ...] = ()
    cloud: OrientedPointCloud = field(default_factory=OrientedPointCloud.empty)
    exclusion: Optional[np.ndarray] = None

    def __post_init__(self):
        self.keypoints = tuple(self.keypoints)
        ids = [k.keypoint_id for k in self.keypoints]
        if len(set(ids)) != len(ids):
            duplicates = sorted({i for i in ids if ids.count(i) > 1})
            raise MeasurementError(
                message="Keypoint ids must be unique within a frame",
                error_code="DUPLICATE_KEYPOINT",
                details={"frame": self.frame, "ids": duplicates},
            )
        if self.exclusion is not None:
            self.exclusion = np.asarray(self.exclusion, dtype=bool)

    @property
    def ids(self) -> List[str]:
        return [k.keypoint_id for k in self.keypoints]

    def positions(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 3))
        return np.stack([k.position for k in self.keypoints])

    def keypoint(self, keypoint_id: str) -> Optional[Keypoint3D]:
        for k in self.keypoints:
            if k.keypoint_id == keypoint_id:
                return k
        return None

    def has(self, ids: Iterable[str]) -> bool:
        present = set(self.ids)
        return all(i in present for i in ids)

    def subset(self, ids: Sequence[str]) -> "MeasurementFrame":
        wanted = set(ids)
        return MeasurementFrame(
            self.frame, tuple(k for k in self.keypoints if k.keypoint_id in wanted), self.cloud, self.exclusion
        )

    def without_groups(self, groups: Sequence[str]) -> "MeasurementFrame":
        dropped = set(groups)
        kept = tuple(k for k in self.keypoints if keypoint_group(k.keypoint_id) not in dropped)
        return MeasurementFrame(self.frame, kept, self.cloud, self.exclusion)

    def with_keypoints(self, keypoints: Sequence[Keypoint3D]) -> "MeasurementFrame":
        return MeasurementFrame(self.frame, tuple(keypoints), self.cloud, self.exclusion)
