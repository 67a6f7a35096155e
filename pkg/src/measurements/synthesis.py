"""
Synthetic measurements from a model evaluated at known parameters
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.geometry.mesh import Mesh, OrientedPointCloud, compute_vertex_normals
from src.measurements.cameras import Camera
from src.measurements.frames import Detection2D, Keypoint3D, MeasurementFrame
from src.measurements.keypoints import keypoint_group
from src.models.parameters import ParameterVector
from src.utils.error_handling import ConfigurationError, ModelError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)


@dataclass
class NoiseSpec:
    """Noise and dropout applied to synthesized measurements; lengths in meters, pixel noise in pixels"""

    keypoint_sigma: float = 0.0
    drop_rate: float = 0.0
    group_drop_rates: Dict[str, float] = field(default_factory=dict)
    cloud_points: int = 0
    cloud_sigma: float = 0.0
    pixel_sigma: float = 0.0
    confidence: float = 1.0

    def validate(self) -> "NoiseSpec":
        rates = [self.drop_rate] + list(self.group_drop_rates.values())
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigurationError(message="Drop rates must lie in [0, 1]", error_code="INVALID_CONFIG")
        if min(self.keypoint_sigma, self.cloud_sigma, self.pixel_sigma) < 0:
            raise ConfigurationError(message="Noise levels must be nonnegative", error_code="INVALID_CONFIG")
        if not 0.0 <= self.confidence <= 1.0:
            raise ConfigurationError(message="Confidence must lie in [0, 1]", error_code="INVALID_CONFIG")
        return self

    def drop_rate_for(self, keypoint_id: str) -> float:
        return self.group_drop_rates.get(keypoint_group(keypoint_id), self.drop_rate)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "NoiseSpec":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__}).validate()


def synthesize_cloud(mesh: Mesh, rng: np.random.Generator, n_points: int = 0, sigma: float = 0.0) -> OrientedPointCloud:
    """Vertex samples with vertex normals, displaced along the normal by Gaussian noise"""
    normals = compute_vertex_normals(mesh)
    valid = np.flatnonzero(~normals.degenerate)
    if 0 < n_points < len(valid):
        valid = np.sort(rng.choice(valid, size=n_points, replace=False))
    offsets = rng.normal(0.0, sigma, size=len(valid)) if sigma > 0 else np.zeros(len(valid))
    points = mesh.vertices[valid] + offsets[:, None] * normals.normals[valid]
    return OrientedPointCloud(points, normals.normals[valid])


def synthesize_measurements(
    model,
    params: ParameterVector,
    cameras: Sequence[Camera] = (),
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
    frame: int = 0,
) -> Tuple[MeasurementFrame, List[Detection2D]]:
    """
    3D keypoints J.V plus noise with per-group dropout, an oriented cloud sampled
    from the posed mesh, and 2D projections of the kept keypoints into every camera
    """
    noise = (noise or NoiseSpec()).validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    if model.keypoint_regressor is None:
        raise ModelError(message="Model has no keypoint regressor", error_code="MISSING_REGRESSOR")

    vertices = model.evaluate(params).vertices
    mesh = Mesh(vertices, model.triangles)
    truth = model.keypoint_regressor.predict(vertices)
    ids = model.keypoint_regressor.ids

    dropped = np.array([rng.random() < noise.drop_rate_for(kid) for kid in ids], dtype=bool)
    measured = truth + (rng.normal(0.0, noise.keypoint_sigma, size=truth.shape) if noise.keypoint_sigma > 0 else 0.0)

    keypoints: List[Keypoint3D] = []
    detections: List[Detection2D] = []
    for camera in cameras:
        pixels = camera.project(truth)
        if noise.pixel_sigma > 0:
            pixels = pixels + rng.normal(0.0, noise.pixel_sigma, size=pixels.shape)
        visible = (camera.depth(truth) > 0) & camera.in_image(pixels)
        for r in np.flatnonzero(visible & ~dropped):
            detections.append(Detection2D(ids[r], float(pixels[r, 0]), float(pixels[r, 1]), noise.confidence, camera.view))

    views_per_id: Dict[str, int] = {}
    for d in detections:
        views_per_id[d.keypoint_id] = views_per_id.get(d.keypoint_id, 0) + 1
    for r in np.flatnonzero(~dropped):
        keypoints.append(Keypoint3D(ids[r], measured[r], support=max(2, views_per_id.get(ids[r], 0))))

    cloud = synthesize_cloud(mesh, rng, noise.cloud_points, noise.cloud_sigma)
    logger.debug(
        f"Frame {frame}: {len(keypoints)}/{len(ids)} keypoints, {len(cloud)} cloud points, {len(detections)} detections"
    )
    return MeasurementFrame(frame, tuple(keypoints), cloud), detections
