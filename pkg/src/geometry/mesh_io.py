"""
Mesh and point-cloud file formats: Wavefront OBJ subset and ASCII PLY
"""

from pathlib import Path
from typing import List, Union

import numpy as np

from src.geometry.mesh import Mesh, OrientedPointCloud
from src.utils.error_handling import FileOperationError, MeshError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def _fmt(value: float) -> str:
    return repr(float(value))


def write_obj(mesh: Mesh, path: PathLike, include_normals: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: List[str] = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    if include_normals:
        normals = mesh.normals if mesh.normals is not None else mesh.with_normals().normals
        lines += [f"vn {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.triangles]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_obj(path: PathLike) -> Mesh:
    """Read v/vn/f lines; faces must be triangles with 1-based indices"""
    path = Path(path)
    if not path.exists():
        raise FileOperationError(message=f"OBJ file not found: {path}", error_code="FILE_NOT_FOUND")

    vertices, normals, triangles = [], [], []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            vertices.append([float(p) for p in parts[1:4]])
        elif tag == "vn":
            normals.append([float(p) for p in parts[1:4]])
        elif tag == "f":
            if len(parts) != 4:
                raise MeshError(
                    message=f"{path}:{line_no}: only triangular faces are supported",
                    error_code="NON_TRIANGLE_FACE",
                    details={"line": line_no},
                )
            triangles.append([int(token.split("/")[0]) - 1 for token in parts[1:]])

    mesh_normals = np.asarray(normals) if normals and len(normals) == len(vertices) else None
    logger.debug(f"Read {len(vertices)} vertices and {len(triangles)} triangles from {path}")
    return Mesh(np.asarray(vertices, dtype=float).reshape(-1, 3), np.asarray(triangles).reshape(-1, 3), mesh_normals)


def write_ply(cloud: OrientedPointCloud, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "end_header",
    ]
    body = [" ".join(_fmt(v) for v in (*p, *n)) for p, n in zip(cloud.points, cloud.normals)]
    path.write_text("\n".join(header + body) + "\n")
    return path


def read_ply(path: PathLike) -> OrientedPointCloud:
    """Read an ASCII PLY with x y z nx ny nz vertex properties"""
    path = Path(path)
    if not path.exists():
        raise FileOperationError(message=f"PLY file not found: {path}", error_code="FILE_NOT_FOUND")

    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FileOperationError(message=f"{path} is not a PLY file", error_code="INVALID_FORMAT")

    count = 0
    properties: List[str] = []
    in_vertex = False
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FileOperationError(message=f"{path}: only ASCII PLY is supported", error_code="INVALID_FORMAT")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            properties.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break

    required = ["x", "y", "z", "nx", "ny", "nz"]
    missing = [name for name in required if name not in properties]
    if body_start is None or missing:
        raise FileOperationError(
            message=f"{path}: malformed header", error_code="INVALID_FORMAT", details={"missing_properties": missing}
        )

    columns = [properties.index(name) for name in required]
    rows = np.array([[float(v) for v in line.split()] for line in lines[body_start : body_start + count]]).reshape(
        count, len(properties)
    )
    data = rows[:, columns]
    normals = data[:, 3:]
    lengths = np.linalg.norm(normals, axis=1)
    keep = lengths > 0
    if (~keep).any():
        logger.warning(f"Dropping {int((~keep).sum())} points with zero normals from {path}")
    normals = normals[keep] / lengths[keep, None]
    return OrientedPointCloud(data[keep, :3], normals)
