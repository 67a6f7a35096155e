"""
Confidence-weighted linear (DLT) triangulation with a reprojection outlier pass
"""

from collections import defaultdict
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.measurements.cameras import Camera
from src.measurements.frames import Detection2D, Keypoint3D
from src.measurements.keypoints import KEYPOINT_REGISTRY
from src.utils.error_handling import MeasurementError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

DEFAULT_MIN_CONFIDENCE = 0.3
DEFAULT_MAX_REPROJECTION_ERROR = 15.0

_REGISTRY_ORDER = {kid: i for i, kid in enumerate(KEYPOINT_REGISTRY)}


def _solve(detections: Sequence[Detection2D], cameras: Mapping[int, Camera]) -> Optional[np.ndarray]:
    rows = []
    for d in detections:
        P = cameras[d.view].P
        for row in (d.u * P[2] - P[0], d.v * P[2] - P[1]):
            rows.append(d.confidence * row / np.linalg.norm(row))
    _, singular, vh = np.linalg.svd(np.asarray(rows))
    solution = vh[-1]
    if singular[2] <= 1e-12 * singular[0] or abs(solution[3]) < 1e-12:
        return None
    return solution[:3] / solution[3]


def reprojection_errors(point: np.ndarray, detections: Sequence[Detection2D], cameras: Mapping[int, Camera]) -> np.ndarray:
    return np.array([np.linalg.norm(cameras[d.view].project(point)[0] - d.pixel) for d in detections])


def triangulate(
    detections: Sequence[Detection2D],
    cameras: Mapping[int, Camera],
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    max_reprojection_error: float = DEFAULT_MAX_REPROJECTION_ERROR,
) -> Optional[Keypoint3D]:
    """
    3D keypoint from the detections of one keypoint id across views

    Views below the confidence threshold are ignored. While more than two views
    remain and the worst reprojection error exceeds the threshold, the worst view
    is dropped and the point re-solved. Returns None with fewer than two usable
    views or degenerate ray geometry.
    """
    if not detections:
        return None
    ids = {d.keypoint_id for d in detections}
    if len(ids) != 1:
        raise MeasurementError(message="triangulate expects detections of a single keypoint", error_code="MIXED_KEYPOINTS")
    keypoint_id = ids.pop()
    usable = [d for d in detections if d.confidence >= min_confidence and d.view in cameras]
    if len(usable) < 2:
        logger.debug(f"{keypoint_id}: {len(usable)} usable views, not triangulated")
        return None

    point = _solve(usable, cameras)
    while point is not None and len(usable) > 2:
        errors = reprojection_errors(point, usable, cameras)
        worst = int(np.argmax(errors))
        if errors[worst] <= max_reprojection_error:
            break
        logger.debug(f"{keypoint_id}: dropping view {usable[worst].view} ({errors[worst]:.1f} px)")
        usable = usable[:worst] + usable[worst + 1 :]
        point = _solve(usable, cameras)

    if point is None:
        logger.warning(f"{keypoint_id}: degenerate triangulation geometry across views {[d.view for d in usable]}")
        return None
    return Keypoint3D(keypoint_id, point, support=len(usable))


def triangulate_frame(
    detections: Sequence[Detection2D],
    cameras: Mapping[int, Camera],
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    max_reprojection_error: float = DEFAULT_MAX_REPROJECTION_ERROR,
) -> Tuple[List[Keypoint3D], Dict[str, List[str]]]:
    """Triangulate every keypoint id of one frame; returns keypoints in registry order and the ids that failed"""
    grouped: Dict[str, List[Detection2D]] = defaultdict(list)
    for d in detections:
        grouped[d.keypoint_id].append(d)
    keypoints: List[Keypoint3D] = []
    missing: List[str] = []
    for keypoint_id in sorted(grouped, key=lambda k: (_REGISTRY_ORDER.get(k, len(_REGISTRY_ORDER)), k)):
        views = sorted(grouped[keypoint_id], key=lambda d: d.view)
        result = triangulate(views, cameras, min_confidence, max_reprojection_error)
        if result is None:
            missing.append(keypoint_id)
        else:
            keypoints.append(result)
    return keypoints, {"missing": missing}
