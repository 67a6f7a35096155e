"""
Binary silhouette rendering and overlap scoring

A pixel is foreground when its center lies inside any projected triangle,
front or back facing. Centers exactly on an edge follow a top-left rule so
pixels on shared edges are counted once. Geometry behind the near plane is
clipped before projection.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np

from src.geometry.mesh import Mesh
from src.measurements.cameras import Camera
from src.utils.error_handling import FileOperationError, MeasurementError

NEAR_PLANE = 1e-3


@dataclass(frozen=True)
class SilhouetteMask:
    mask: np.ndarray
    view: int = 0
    frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.mask.ndim != 2:
            raise MeasurementError(message="Silhouette masks are 2D", error_code="DIMENSION_MISMATCH")

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def empty(cls, width: int, height: int, view: int = 0, frame: int = 0) -> "SilhouetteMask":
        return cls(np.zeros((height, width), dtype=bool), view, frame)


def _clip_near(polygon: np.ndarray, near: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon against z >= near"""
    out: List[np.ndarray] = []
    n = len(polygon)
    for i in range(n):
        a, b = polygon[i], polygon[(i + 1) % n]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            out.append(a)
        if a_in != b_in:
            s = (near - a[2]) / (b[2] - a[2])
            out.append(a + s * (b - a))
    return np.array(out).reshape(-1, 3)


def _project_triangles(points: np.ndarray, triangles: np.ndarray, K: np.ndarray, near: float) -> np.ndarray:
    """Pixel-space corners (n, 3, 2) of every visible triangle, near-clipped pieces fanned into triangles"""
    corners = points[triangles]
    in_front = corners[:, :, 2] >= near
    whole = corners[in_front.all(axis=1)]
    pieces = [whole]
    for tri in corners[in_front.any(axis=1) & ~in_front.all(axis=1)]:
        polygon = _clip_near(tri, near)
        pieces += [polygon[[0, k, k + 1]][None] for k in range(1, len(polygon) - 1)]
    camera_space = np.concatenate(pieces)
    projected = camera_space @ K.T
    return projected[:, :, :2] / projected[:, :, 2:3]


def _fill_triangles(mask: np.ndarray, triangles: np.ndarray, chunk_pixels: int = 1 << 22) -> None:
    """Set every pixel whose center lies inside one of `triangles` (n, 3, 2)"""
    p0, p1, p2 = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    keep = (area != 0) & np.isfinite(area)
    triangles, area = triangles[keep], area[keep]
    # counter-clockwise in pixel coordinates
    flip = area < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    height, width = mask.shape
    lo = np.ceil(triangles.min(axis=1) - 0.5)
    hi = np.floor(triangles.max(axis=1) - 0.5)
    x0 = np.clip(lo[:, 0], 0, width).astype(int)
    y0 = np.clip(lo[:, 1], 0, height).astype(int)
    x1 = np.clip(hi[:, 0], -1, width - 1).astype(int)
    y1 = np.clip(hi[:, 1], -1, height - 1).astype(int)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    counts = w * h
    visible = np.flatnonzero(counts > 0)
    if not len(visible):
        return

    # batches of triangles whose bounding boxes hold at most `chunk_pixels` candidate pixels
    bounds = np.cumsum(counts[visible])
    starts = np.searchsorted(bounds, np.arange(0, bounds[-1], chunk_pixels), side="right")
    for batch in np.split(visible, np.unique(starts[1:])):
        n = counts[batch]
        tri = np.repeat(batch, n)
        offset = np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)
        px = x0[tri] + offset % w[tri]
        py = y0[tri] + offset // w[tri]
        cx, cy = px + 0.5, py + 0.5
        inside = np.ones(len(tri), dtype=bool)
        for i, j in ((0, 1), (1, 2), (2, 0)):
            a, b = triangles[tri, i], triangles[tri, j]
            dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
            edge = dx * (cy - a[:, 1]) - dy * (cx - a[:, 0])
            # ties go to edges pointing down, or exactly horizontal and pointing left
            owns_tie = (dy > 0) | ((dy == 0) & (dx < 0))
            inside &= (edge > 0) | ((edge == 0) & owns_tie)
        mask[py[inside], px[inside]] = True


def rasterize_silhouette(mesh: Mesh, camera: Camera, frame: int = 0, near: float = NEAR_PLANE) -> SilhouetteMask:
    mask = np.zeros((camera.height, camera.width), dtype=bool)
    if mesh.n_triangles == 0:
        return SilhouetteMask(mask, camera.view, frame)
    K, R, t = camera.decompose()
    points = mesh.vertices @ R.T + t
    _fill_triangles(mask, _project_triangles(points, np.asarray(mesh.triangles), K, near))
    return SilhouetteMask(mask, camera.view, frame)


def overlap_score(gt: SilhouetteMask, pred: SilhouetteMask) -> float:
    """100 * |intersection| / |union|; 100 when both masks are empty"""
    if gt.mask.shape != pred.mask.shape:
        raise MeasurementError(
            message=f"Mask sizes differ: {gt.mask.shape} vs {pred.mask.shape}",
            error_code="DIMENSION_MISMATCH",
        )
    union = int(np.logical_or(gt.mask, pred.mask).sum())
    if union == 0:
        return 100.0
    return 100.0 * int(np.logical_and(gt.mask, pred.mask).sum()) / union


def write_pgm(path: Union[str, Path], mask: SilhouetteMask) -> Path:
    """Binary P5 image, 0 background and 255 foreground"""
    path = Path(path)
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + (mask.mask.astype(np.uint8) * 255).tobytes())
    except OSError as e:
        raise FileOperationError(message=f"Could not write {path}: {e}", error_code="FILE_OPERATION_FAILED")
    return path


def read_pgm(path: Union[str, Path], view: int = 0, frame: int = 0) -> SilhouetteMask:
    """Reads P5 masks; values above half of maxval are foreground"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FileOperationError(message=f"Could not read {path}: {e}", error_code="FILE_OPERATION_FAILED")

    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1

    if tokens[0] != b"P5":
        raise FileOperationError(message=f"{path} is not a binary PGM", error_code="INVALID_PGM")
    width, height, maxval = (int(tok) for tok in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return SilhouetteMask(pixels > maxval / 2, view, frame)


def mask_filename(frame: int, view: int) -> str:
    return f"f{frame:04d}_v{view:02d}.pgm"


_MASK_NAME = re.compile(r"^f(\d+)_v(\d+)\.pgm$")


def write_masks(directory: Union[str, Path], masks: Mapping[Tuple[int, int], SilhouetteMask]) -> Path:
    directory = Path(directory)
    for frame, view in sorted(masks):
        write_pgm(directory / mask_filename(frame, view), masks[(frame, view)])
    return directory


def read_masks(directory: Union[str, Path]) -> Dict[Tuple[int, int], SilhouetteMask]:
    """Every f<frame>_v<view>.pgm in a directory, keyed by (frame, view)"""
    masks: Dict[Tuple[int, int], SilhouetteMask] = {}
    for path in sorted(Path(directory).glob("*.pgm")):
        match = _MASK_NAME.match(path.name)
        if match is None:
            continue
        frame, view = int(match.group(1)), int(match.group(2))
        masks[(frame, view)] = read_pgm(path, view, frame)
    return masks
