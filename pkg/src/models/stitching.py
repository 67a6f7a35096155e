"""
Stitching of part meshes into one seamless mesh through a sparse blend matrix

Stacked vertex order is body, face, left hand, right hand. Output rows list the
kept body vertices first, then each part's vertices in part order. Part vertices
on the boundary loop (ring 0) and the next ring (ring 1) blend linearly toward
the body surface: 0.5/0.5 on ring 0, 0.75/0.25 on ring 1.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from src.geometry.mesh import Mesh, barycentric_project
from src.kinematics.skeleton import transform_points
from src.utils.error_handling import MeshError, StitchingError
from src.utils.logging_config import get_logger
from src.utils.serialization import sparse_from_dict, sparse_to_dict

logger = get_logger(__name__)

PARTS = ("body", "face", "left_hand", "right_hand")
RING_BLEND = {0: 0.5, 1: 0.75}


@dataclass(frozen=True)
class PartAnnotation:
    """Body triangles a part replaces and the part's ordered boundary loop"""

    part: str
    body_region_triangles: np.ndarray
    boundary_loop: np.ndarray

    def __post_init__(self):
        if self.part not in PARTS[1:]:
            raise StitchingError(message=f"Unknown part '{self.part}'", error_code="UNKNOWN_PART")
        object.__setattr__(self, "body_region_triangles", np.asarray(self.body_region_triangles, dtype=np.int64))
        object.__setattr__(self, "boundary_loop", np.asarray(self.boundary_loop, dtype=np.int64))

    def to_dict(self) -> Dict:
        return {
            "part": self.part,
            "body_region_triangles": self.body_region_triangles.tolist(),
            "boundary_loop": self.boundary_loop.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PartAnnotation":
        return cls(data["part"], np.asarray(data["body_region_triangles"]), np.asarray(data["boundary_loop"]))


@dataclass(frozen=True)
class SeamConstraintSet:
    """Ring vertices (stacked indices) paired with barycentric anchors on the body mesh"""

    stacked_vertex: np.ndarray
    ring: np.ndarray
    anchor_triangle: np.ndarray
    anchor_barycentric: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stacked_vertex", np.asarray(self.stacked_vertex, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "ring", np.asarray(self.ring, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "anchor_triangle", np.asarray(self.anchor_triangle, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "anchor_barycentric", np.asarray(self.anchor_barycentric, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=float).reshape(-1))

    def __len__(self) -> int:
        return len(self.stacked_vertex)

    def anchor_vertices(self, body_triangles: np.ndarray) -> np.ndarray:
        """Stacked body vertex indices (S, 3) of each anchor triangle"""
        return np.asarray(body_triangles)[self.anchor_triangle]

    def gaps(self, stacked_vertices: np.ndarray, body_triangles: np.ndarray) -> np.ndarray:
        """Ring vertex minus anchor position, (S, 3)"""
        corners = stacked_vertices[self.anchor_vertices(body_triangles)]
        anchors = np.einsum("sk,ska->sa", self.anchor_barycentric, corners)
        return stacked_vertices[self.stacked_vertex] - anchors

    def to_dict(self) -> Dict:
        return {
            "stacked_vertex": self.stacked_vertex.tolist(),
            "ring": self.ring.tolist(),
            "anchor_triangle": self.anchor_triangle.tolist(),
            "anchor_barycentric": self.anchor_barycentric.tolist(),
            "weight": self.weight.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SeamConstraintSet":
        return cls(**{key: np.asarray(data[key]) for key in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Stitching:
    blend: sp.csr_matrix
    seams: SeamConstraintSet
    redundant: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    part_offsets: Dict[str, Tuple[int, int]]

    @property
    def n_output(self) -> int:
        return self.blend.shape[0]

    @property
    def n_stacked(self) -> int:
        return self.blend.shape[1]

    def copy_rows(self) -> np.ndarray:
        """Output rows that copy exactly one stacked vertex"""
        counts = np.diff(self.blend.indptr)
        single = counts == 1
        values = np.zeros(self.n_output)
        values[single] = self.blend.data[self.blend.indptr[:-1][single]]
        return single & (values == 1.0)

    def output_rows(self, part: str, local: np.ndarray) -> np.ndarray:
        """Output row of each vertex of a part (local indices); body rows must not be redundant"""
        local = np.asarray(local, dtype=np.int64)
        if part == "body":
            if self.redundant[local].any():
                raise StitchingError(message="Redundant body vertices have no output row", error_code="REDUNDANT_VERTEX")
            return np.cumsum(~self.redundant)[local] - 1
        n_kept = int((~self.redundant).sum())
        n_body = self.part_offsets["body"][1]
        return n_kept + self.part_offsets[part][0] - n_body + local

    def to_dict(self) -> Dict:
        return {
            "blend": sparse_to_dict(self.blend),
            "seams": self.seams.to_dict(),
            "redundant": self.redundant.astype(int).tolist(),
            "triangles": self.triangles.tolist(),
            "labels": self.labels.tolist(),
            "part_offsets": {k: list(v) for k, v in self.part_offsets.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Stitching":
        return cls(
            blend=sparse_from_dict(data["blend"]),
            seams=SeamConstraintSet.from_dict(data["seams"]),
            redundant=np.asarray(data["redundant"], dtype=bool),
            triangles=np.asarray(data["triangles"], dtype=np.int64).reshape(-1, 3),
            labels=np.asarray(data["labels"], dtype=np.int64),
            part_offsets={k: (int(v[0]), int(v[1])) for k, v in data["part_offsets"].items()},
        )


def _check_loop(part: str, part_mesh: Mesh, loop: np.ndarray) -> None:
    try:
        loops = part_mesh.boundary_loops()
    except MeshError as e:
        raise StitchingError(message=f"{part}: {e.message}", error_code=e.error_code, details=e.details)
    target = set(loop.tolist())
    matches = [candidate for candidate in loops if set(candidate.tolist()) == target]
    if len(loop) < 3 or len(matches) != 1:
        raise StitchingError(
            message=f"{part}: annotated boundary loop is not a boundary of the part mesh",
            error_code="OPEN_BOUNDARY_LOOP",
            details={"loop_length": len(loop), "boundary_loops": [len(c) for c in loops]},
        )
    edges = {frozenset((int(a), int(b))) for a, b in zip(matches[0], np.roll(matches[0], -1))}
    for a, b in zip(loop, np.roll(loop, -1)):
        if frozenset((int(a), int(b))) not in edges:
            raise StitchingError(
                message=f"{part}: boundary loop is not ordered along the boundary",
                error_code="AMBIGUOUS_BOUNDARY_LOOP",
                details={"edge": [int(a), int(b)]},
            )


def build_stitching(
    body_rest: Mesh,
    parts: Mapping[str, Mesh],
    annotations: Mapping[str, PartAnnotation],
    merge_tolerance: float = 1e-6,
    seam_search_radius: float = 0.02,
) -> Stitching:
    """
    Blend matrix, seam constraints and redundant-body-vertex mask

    `parts` maps face/left_hand/right_hand to their rest meshes already placed in
    body rest coordinates by the calibrated alignment transforms.
    """
    n_body = body_rest.n_vertices
    offsets: Dict[str, Tuple[int, int]] = {"body": (0, n_body)}
    start = n_body
    for name in PARTS[1:]:
        offsets[name] = (start, start + parts[name].n_vertices)
        start += parts[name].n_vertices
    n_stacked = start

    region_owner = np.full(body_rest.n_triangles, -1)
    for k, name in enumerate(PARTS[1:]):
        tris = annotations[name].body_region_triangles
        if (region_owner[tris] >= 0).any():
            raise StitchingError(message=f"{name} region overlaps another part", error_code="OVERLAPPING_REGIONS")
        region_owner[tris] = k
    outside = body_rest.triangles[region_owner < 0]
    outside_vertices = np.zeros(n_body, dtype=bool)
    outside_vertices[outside.ravel()] = True

    body_map_kind = np.zeros(n_body, dtype=np.int64)  # 0 kept, 1 merged, 2 interior
    partner_of_part: Dict[str, Dict[int, int]] = {}
    rings: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    for name in PARTS[1:]:
        mesh = parts[name]
        annotation = annotations[name]
        _check_loop(name, mesh, annotation.boundary_loop)
        ring0 = annotation.boundary_loop
        ring1 = np.setdiff1d(mesh.neighbors(ring0), ring0)
        rings[name] = (ring0, ring1)

        region_vertices = np.unique(body_rest.triangles[annotation.body_region_triangles].ravel())
        boundary = region_vertices[outside_vertices[region_vertices]]
        interior = region_vertices[~outside_vertices[region_vertices]]
        body_map_kind[interior] = 2

        tree = cKDTree(mesh.vertices[ring0])
        partners: Dict[int, int] = {}
        for b in boundary:
            hits = tree.query_ball_point(body_rest.vertices[b], r=merge_tolerance)
            if len(hits) != 1:
                raise StitchingError(
                    message=f"{name}: body boundary vertex {int(b)} has {len(hits)} coincident ring vertices",
                    error_code="BOUNDARY_MISMATCH",
                    details={"body_vertex": int(b), "matches": len(hits)},
                )
            part_vertex = int(ring0[hits[0]])
            if part_vertex in partners:
                raise StitchingError(
                    message=f"{name}: ring vertex {part_vertex} matches two body vertices",
                    error_code="BOUNDARY_MISMATCH",
                )
            partners[part_vertex] = int(b)
            body_map_kind[b] = 1
        partner_of_part[name] = partners

    kept = np.flatnonzero(body_map_kind == 0)
    out_index = np.full(n_stacked, -1, dtype=np.int64)
    out_index[kept] = np.arange(len(kept))
    n_out = len(kept)
    for name in PARTS[1:]:
        lo, hi = offsets[name]
        out_index[lo:hi] = n_out + np.arange(hi - lo)
        n_out += hi - lo
        for part_vertex, b in partner_of_part[name].items():
            out_index[b] = out_index[lo + part_vertex]
    body_map = out_index[:n_body]

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for k, b in enumerate(kept):
        rows.append(k)
        cols.append(int(b))
        vals.append(1.0)

    seam_vertex, seam_ring, seam_tri, seam_bary = [], [], [], []
    worst = 0.0
    for name in PARTS[1:]:
        lo, _ = offsets[name]
        mesh = parts[name]
        ring0, ring1 = rings[name]
        ring_of = np.full(mesh.n_vertices, -1)
        ring_of[ring1] = 1
        ring_of[ring0] = 0
        anchors: Dict[int, Tuple[int, np.ndarray]] = {}
        for v in np.concatenate([ring0, ring1]):
            surface, distance = barycentric_project(mesh.vertices[v], body_rest)
            if distance > seam_search_radius:
                raise StitchingError(
                    message=f"{name}: ring vertex {int(v)} is {distance:.4f} m from the body surface",
                    error_code="SEAM_TOO_FAR",
                    details={"vertex": int(v), "distance": distance, "radius": seam_search_radius},
                )
            worst = max(worst, distance)
            anchors[int(v)] = (surface.triangle, surface.barycentric)
            seam_vertex.append(lo + int(v))
            seam_ring.append(int(ring_of[v]))
            seam_tri.append(surface.triangle)
            seam_bary.append(surface.barycentric)

        for v in range(mesh.n_vertices):
            row = int(out_index[lo + v])
            entries: Dict[int, float] = {}
            ring = int(ring_of[v])
            if ring < 0:
                entries[lo + v] = 1.0
            elif ring == 0 and v in partner_of_part[name]:
                entries[lo + v] = 0.5
                entries[partner_of_part[name][v]] = 0.5
            else:
                own = RING_BLEND[ring]
                entries[lo + v] = own
                tri, bary = anchors[v]
                for corner, weight in zip(body_rest.triangles[tri], bary):
                    if weight > 0.0:
                        entries[int(corner)] = entries.get(int(corner), 0.0) + (1.0 - own) * weight
            for col in sorted(entries):
                rows.append(row)
                cols.append(col)
                vals.append(entries[col])

    blend = sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_stacked))
    blend.sum_duplicates()
    blend.sort_indices()

    triangles = [body_map[outside]]
    labels = [np.zeros(len(kept), dtype=np.int64)]
    for k, name in enumerate(PARTS[1:], start=1):
        lo, hi = offsets[name]
        triangles.append(out_index[lo + parts[name].triangles])
        labels.append(np.full(hi - lo, k, dtype=np.int64))

    seams = SeamConstraintSet(
        np.asarray(seam_vertex),
        np.asarray(seam_ring),
        np.asarray(seam_tri),
        np.asarray(seam_bary).reshape(-1, 3),
        np.ones(len(seam_vertex)),
    )
    redundant = body_map_kind > 0
    logger.info(
        f"Stitched {n_stacked} stacked vertices into {n_out} ({int(redundant.sum())} redundant body vertices, "
        f"{len(seams)} seam constraints, max rest seam distance {worst:.2e} m)"
    )
    return Stitching(blend, seams, redundant, np.concatenate(triangles), np.concatenate(labels), offsets)


def place_part(mesh_vertices: np.ndarray, triangles: np.ndarray, gamma: np.ndarray) -> Mesh:
    """Part rest mesh carried into body rest coordinates by its alignment transform"""
    return Mesh(transform_points(gamma, mesh_vertices), triangles)
