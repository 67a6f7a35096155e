"""
Pinhole cameras given by 3x4 projection matrices
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.linalg import rq

from src.utils.error_handling import MeasurementError, dimension_error


@dataclass(frozen=True)
class Camera:
    """P = K [R | t]; pixel u to the right, v down, camera looking along +z"""

    view: int
    P: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.size != 12:
            raise dimension_error(MeasurementError, "projection matrix", (3, 4), P.shape)
        object.__setattr__(self, "P", P.reshape(3, 4))
        if self.width <= 0 or self.height <= 0:
            raise MeasurementError(message="Image size must be positive", error_code="INVALID_CAMERA")
        _, R, _ = self.decompose()
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise MeasurementError(message=f"Camera {self.view} has a non-orthonormal rotation", error_code="INVALID_CAMERA")

    def decompose(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(K, R, t) with a positive K diagonal"""
        M = self.P[:, :3]
        if abs(np.linalg.det(M)) < 1e-12:
            raise MeasurementError(message=f"Camera {self.view} is degenerate", error_code="INVALID_CAMERA")
        K, R = rq(M)
        signs = np.diag(np.sign(np.diag(K)))
        K, R = K @ signs, signs @ R
        t = np.linalg.solve(K, self.P[:, 3])
        if np.linalg.det(R) < 0:
            R, t = -R, -t
        scale = K[2, 2]
        return K / scale, R, t

    @property
    def center(self) -> np.ndarray:
        M = self.P[:, :3]
        return -np.linalg.solve(M, self.P[:, 3])

    def depth(self, points: np.ndarray) -> np.ndarray:
        """Signed distance along the viewing axis"""
        _, R, t = self.decompose()
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return points @ R[2] + t[2]

    def project(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        homogeneous = points @ self.P[:, :3].T + self.P[:, 3]
        return homogeneous[:, :2] / homogeneous[:, 2:3]

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels).reshape(-1, 2)
        return (pixels[:, 0] >= 0) & (pixels[:, 0] < self.width) & (pixels[:, 1] >= 0) & (pixels[:, 1] < self.height)

    @classmethod
    def from_parameters(cls, view: int, K: np.ndarray, R: np.ndarray, t: np.ndarray, width: int, height: int) -> "Camera":
        P = np.asarray(K, dtype=float) @ np.hstack([np.asarray(R, dtype=float), np.asarray(t, dtype=float).reshape(3, 1)])
        return cls(view, P, width, height)

    @classmethod
    def look_at(
        cls,
        view: int,
        eye: Sequence[float],
        target: Sequence[float],
        focal: float = 1000.0,
        width: int = 1280,
        height: int = 960,
        up: Sequence[float] = (0.0, 1.0, 0.0),
    ) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-9:
            raise MeasurementError(message="Camera up vector is parallel to the view direction", error_code="INVALID_CAMERA")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls.from_parameters(view, K, R, -R @ eye, width, height)

    def to_dict(self) -> Dict:
        return {"view": self.view, "P": self.P.ravel().tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, data: Dict) -> "Camera":
        return cls(int(data["view"]), np.asarray(data["P"], dtype=float), int(data["width"]), int(data["height"]))


def make_camera_rig(
    n_views: int = 8,
    radius: float = 3.0,
    height: float = 1.2,
    target: Sequence[float] = (0.0, 1.0, 0.0),
    focal: float = 1000.0,
    width: int = 1280,
    image_height: int = 960,
) -> List[Camera]:
    """Cameras evenly spaced on a horizontal circle, all looking at `target`"""
    if n_views < 1:
        raise MeasurementError(message="A camera rig needs at least one view", error_code="INVALID_CAMERA")
    cameras = []
    for view in range(n_views):
        angle = 2.0 * np.pi * view / n_views
        eye = (radius * np.sin(angle), height, radius * np.cos(angle))
        cameras.append(Camera.look_at(view, eye, target, focal, width, image_height))
    return cameras
