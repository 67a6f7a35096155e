"""
Per-vertex 3D flow between neighbouring frames
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

from src.utils.error_handling import MeasurementError, dimension_error
from src.utils.serialization import read_json, write_json

PathLike = Union[str, Path]


@dataclass(frozen=True)
class VertexFlowField:
    """Displacements of frame t's vertices toward t+1 (forward) and t-1 (backward), in meters"""

    frame: int
    forward: np.ndarray
    backward: np.ndarray
    forward_valid: np.ndarray
    backward_valid: np.ndarray

    def __post_init__(self):
        forward = np.asarray(self.forward, dtype=float).reshape(-1, 3)
        backward = np.asarray(self.backward, dtype=float).reshape(-1, 3)
        if forward.shape != backward.shape:
            raise dimension_error(MeasurementError, "backward flow", forward.shape, backward.shape)
        forward_valid = np.asarray(self.forward_valid, dtype=bool).reshape(-1) & np.isfinite(forward).all(axis=1)
        backward_valid = np.asarray(self.backward_valid, dtype=bool).reshape(-1) & np.isfinite(backward).all(axis=1)
        if len(forward_valid) != len(forward) or len(backward_valid) != len(backward):
            raise MeasurementError(message="Flow validity flags do not cover every vertex", error_code="DIMENSION_MISMATCH")
        object.__setattr__(self, "forward", np.where(forward_valid[:, None], forward, 0.0))
        object.__setattr__(self, "backward", np.where(backward_valid[:, None], backward, 0.0))
        object.__setattr__(self, "forward_valid", forward_valid)
        object.__setattr__(self, "backward_valid", backward_valid)

    @property
    def n_vertices(self) -> int:
        return len(self.forward)

    @classmethod
    def zeros(cls, frame: int, n_vertices: int) -> "VertexFlowField":
        z = np.zeros((n_vertices, 3))
        ones = np.ones(n_vertices, dtype=bool)
        return cls(frame, z, z, ones, ones)

    def to_dict(self) -> Dict:
        return {
            "frame": self.frame,
            "forward": self.forward.tolist(),
            "backward": self.backward.tolist(),
            "forward_valid": self.forward_valid.astype(int).tolist(),
            "backward_valid": self.backward_valid.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "VertexFlowField":
        return cls(
            int(data["frame"]),
            np.asarray(data["forward"], dtype=float),
            np.asarray(data["backward"], dtype=float),
            np.asarray(data["forward_valid"], dtype=bool),
            np.asarray(data["backward_valid"], dtype=bool),
        )


def synthesize_flows(
    meshes: Mapping[int, np.ndarray], sigma: float = 0.0, rng: Optional[np.random.Generator] = None
) -> Dict[int, VertexFlowField]:
    """Ground-truth flows between consecutive frames of known meshes, optionally with Gaussian noise"""
    rng = rng if rng is not None else np.random.default_rng(0)
    frames = sorted(meshes)
    flows: Dict[int, VertexFlowField] = {}
    for t in frames:
        current = np.asarray(meshes[t], dtype=float)
        n = len(current)
        forward = np.zeros((n, 3))
        backward = np.zeros((n, 3))
        has_next, has_prev = t + 1 in meshes, t - 1 in meshes
        if has_next:
            forward = np.asarray(meshes[t + 1]) - current
        if has_prev:
            backward = np.asarray(meshes[t - 1]) - current
        if sigma > 0:
            forward = forward + rng.normal(0.0, sigma, size=forward.shape)
            backward = backward + rng.normal(0.0, sigma, size=backward.shape)
        flows[t] = VertexFlowField(t, forward, backward, np.full(n, has_next), np.full(n, has_prev))
    return flows


def write_flows(directory: PathLike, flows: Mapping[int, VertexFlowField]) -> Path:
    directory = Path(directory)
    for t in sorted(flows):
        write_json(directory / f"flow_{t:04d}.json", flows[t].to_dict())
    return directory


def read_flows(directory: PathLike) -> Dict[int, VertexFlowField]:
    flows = [VertexFlowField.from_dict(read_json(path)) for path in sorted(Path(directory).glob("flow_*.json"))]
    return {f.frame: f for f in flows}
