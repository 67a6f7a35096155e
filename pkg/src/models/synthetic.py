"""
Procedural body, face and hand models built from ellipsoids and tubes

The body is a union of primitives (torso ellipsoid, head sphere, neck, arm and
leg tubes). The face replaces a rectangular patch of the head sphere with a
subdivided copy; each hand replaces the arm tube beyond the wrist with a copy
of those rings plus five finger capsules. Part boundaries coincide with the
body at rest, so the stitched rest mesh has no gaps. The head sphere and the
hand regions are skinned rigidly to the head and wrist joints and follow those
joints under every shape component, which keeps the seams closed in any pose;
with `rigid_seams` off they keep blended weights and the seams open under pose.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from src.geometry.mesh import Mesh, compute_vertex_normals
from src.kinematics.skeleton import Joint, RotationType, Skeleton, normalize_weights, rigid_transform
from src.measurements.keypoints import KeypointAnchor, build_keypoint_regressor
from src.models.parameters import ParameterVector
from src.models.part_models import HAND_JOINTS, BodyModel, FaceModel, HandModel
from src.models.stitching import PartAnnotation
from src.models.unified import UnifiedModel, build_unified_model
from src.utils.error_handling import ConfigurationError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

BODY_JOINTS = (
    ("pelvis", -1, (0.0, 0.95, 0.0)),
    ("l_hip", 0, (0.09, 0.90, 0.0)),
    ("r_hip", 0, (-0.09, 0.90, 0.0)),
    ("spine1", 0, (0.0, 1.10, 0.0)),
    ("l_knee", 1, (0.09, 0.50, 0.0)),
    ("r_knee", 2, (-0.09, 0.50, 0.0)),
    ("spine2", 3, (0.0, 1.30, 0.0)),
    ("l_ankle", 4, (0.09, 0.09, 0.0)),
    ("r_ankle", 5, (-0.09, 0.09, 0.0)),
    ("l_foot", 7, (0.09, 0.03, 0.10)),
    ("r_foot", 8, (-0.09, 0.03, 0.10)),
    ("neck", 6, (0.0, 1.50, 0.0)),
    ("l_collar", 6, (0.05, 1.40, 0.0)),
    ("r_collar", 6, (-0.05, 1.40, 0.0)),
    ("head", 11, (0.0, 1.60, 0.0)),
    ("l_shoulder", 12, (0.18, 1.46, 0.0)),
    ("r_shoulder", 13, (-0.18, 1.46, 0.0)),
    ("l_elbow", 15, (0.44, 1.45, 0.0)),
    ("r_elbow", 16, (-0.44, 1.45, 0.0)),
    ("l_wrist", 17, (0.68, 1.45, 0.0)),
    ("r_wrist", 18, (-0.68, 1.45, 0.0)),
)
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
PALM_LENGTH = 0.09
TORSO = ((0.0, 1.2, 0.0), (0.15, 0.33, 0.10))
HEAD = ((0.0, 1.68, 0.0), 0.10)

# body keypoints located at joint centers
JOINT_KEYPOINTS = {
    "neck": "neck",
    "r_shoulder": "r_shoulder",
    "r_elbow": "r_elbow",
    "r_wrist": "r_wrist",
    "l_shoulder": "l_shoulder",
    "l_elbow": "l_elbow",
    "l_wrist": "l_wrist",
    "mid_hip": "pelvis",
    "r_hip": "r_hip",
    "r_knee": "r_knee",
    "r_ankle": "r_ankle",
    "l_hip": "l_hip",
    "l_knee": "l_knee",
    "l_ankle": "l_ankle",
}


@dataclass
class SyntheticModelConfig:
    """Resolution and basis sizes of the procedural model"""

    ring_size: int = 12
    samples_per_segment: int = 3
    torso_rings: int = 12
    torso_columns: int = 16
    head_rings: int = 12
    head_columns: int = 16
    finger_ring_size: int = 6
    n_body_shape: int = 10
    n_face_identity: int = 6
    n_face_expression: int = 8
    body_weight_sigma: float = 0.04
    hand_weight_sigma: float = 0.01
    max_influences: int = 4
    rigid_seams: bool = True
    seed: int = 0

    def validate(self) -> "SyntheticModelConfig":
        if self.ring_size < 3 or self.finger_ring_size < 3:
            raise ConfigurationError(message="Tube rings need at least 3 vertices", error_code="INVALID_CONFIG")
        if self.samples_per_segment < 1:
            raise ConfigurationError(message="samples_per_segment must be >= 1", error_code="INVALID_CONFIG")
        if self.head_rings % 4 or self.head_columns % 8:
            raise ConfigurationError(
                message="head_rings must be a multiple of 4 and head_columns a multiple of 8", error_code="INVALID_CONFIG"
            )
        if min(self.n_body_shape, self.n_face_identity, self.n_face_expression) < 0:
            raise ConfigurationError(message="Basis sizes must be nonnegative", error_code="INVALID_CONFIG")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SyntheticModelConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__}).validate()


class _MeshBuilder:
    """Accumulates vertices and triangles of several primitives"""

    def __init__(self):
        self.vertices: List[np.ndarray] = []
        self.triangles: List[np.ndarray] = []
        self.count = 0

    def add(self, vertices: np.ndarray, triangles: np.ndarray) -> int:
        start = self.count
        self.vertices.append(np.asarray(vertices, dtype=float).reshape(-1, 3))
        self.triangles.append(np.asarray(triangles, dtype=np.int64).reshape(-1, 3) + start)
        self.count += len(self.vertices[-1])
        return start

    @property
    def n_triangles(self) -> int:
        return sum(len(t) for t in self.triangles)

    def mesh(self) -> Mesh:
        return Mesh(np.concatenate(self.vertices), np.concatenate(self.triangles))


def _ellipsoid(center, radii, n_rings: int, n_columns: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """UV ellipsoid with poles on y; returns vertices, triangles and the (row, column) cell of each triangle"""
    center = np.asarray(center, dtype=float)
    radii = np.asarray(radii, dtype=float)
    elevations = -np.pi / 2 + np.pi * np.arange(n_rings + 1) / n_rings
    azimuths = -np.pi + 2 * np.pi * np.arange(n_columns) / n_columns

    vertices = [center + radii * np.array([0.0, -1.0, 0.0])]
    for el in elevations[1:-1]:
        ring = np.stack([np.cos(el) * np.sin(azimuths), np.full(n_columns, np.sin(el)), np.cos(el) * np.cos(azimuths)], axis=1)
        vertices.append(center + radii * ring)
    vertices.append(center + radii * np.array([0.0, 1.0, 0.0]))
    vertices = np.vstack(vertices)
    north = len(vertices) - 1

    def vid(row: int, column: int) -> int:
        if row == 0:
            return 0
        if row == n_rings:
            return north
        return 1 + (row - 1) * n_columns + column % n_columns

    triangles, cells = [], []
    for row in range(n_rings):
        for column in range(n_columns):
            p00, p01 = vid(row, column), vid(row, column + 1)
            p10, p11 = vid(row + 1, column), vid(row + 1, column + 1)
            if row > 0:
                triangles.append((p00, p01, p10))
                cells.append((row, column))
            if row < n_rings - 1:
                triangles.append((p01, p11, p10))
                cells.append((row, column))
    return vertices, np.asarray(triangles), np.asarray(cells)


def _tube_frames(nodes: np.ndarray, samples: int):
    """Ring centers, directions and the ring index of every node"""
    centers, directions, node_rings = [], [], []
    segments = np.diff(nodes, axis=0)
    unit = segments / np.linalg.norm(segments, axis=1, keepdims=True)
    for s in range(len(segments)):
        node_rings.append(len(centers))
        for k in range(samples):
            t = k / samples
            centers.append(nodes[s] + t * segments[s])
            if k == 0 and s > 0:
                d = unit[s - 1] + unit[s]
                directions.append(d / np.linalg.norm(d))
            else:
                directions.append(unit[s])
    node_rings.append(len(centers))
    centers.append(nodes[-1])
    directions.append(unit[-1])
    return np.asarray(centers), np.asarray(directions), node_rings


def _tube(
    nodes: Sequence[Sequence[float]],
    radii: Sequence[float],
    ring_size: int,
    samples: int,
    reference: Sequence[float],
    cap_start: bool = True,
    cap_end: bool = True,
) -> Dict:
    """
    Tube around a polyline with a ring at every node; radii interpolate linearly

    Returns vertices, triangles, per-ring vertex indices, the ring index of each
    node, cap center indices and the triangle ranges of every ring band.
    """
    nodes = np.asarray(nodes, dtype=float)
    radii_nodes = np.asarray(radii, dtype=float)
    reference = np.asarray(reference, dtype=float)
    centers, directions, node_rings = _tube_frames(nodes, samples)
    node_arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(nodes, axis=0), axis=1))])
    ring_arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(centers, axis=0), axis=1))])
    ring_radii = np.interp(ring_arc, node_arc, radii_nodes)

    angles = 2 * np.pi * np.arange(ring_size) / ring_size
    vertices, rings = [], []
    for center, direction, radius in zip(centers, directions, ring_radii):
        e1 = reference - (reference @ direction) * direction
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(direction, e1)
        rings.append(np.arange(len(vertices), len(vertices) + ring_size))
        vertices.extend(center + radius * (np.cos(a) * e1 + np.sin(a) * e2) for a in angles)

    triangles, bands = [], []
    for k in range(len(rings) - 1):
        a, b = rings[k], rings[k + 1]
        start = len(triangles)
        for m in range(ring_size):
            n = (m + 1) % ring_size
            triangles.append((a[m], a[n], b[m]))
            triangles.append((a[n], b[n], b[m]))
        bands.append((start, len(triangles)))

    caps = {}
    if cap_start:
        caps["start"] = len(vertices)
        vertices.append(centers[0] - 0.5 * ring_radii[0] * directions[0])
        a = rings[0]
        caps["start_triangles"] = (len(triangles), len(triangles) + ring_size)
        triangles.extend((caps["start"], a[(m + 1) % ring_size], a[m]) for m in range(ring_size))
    if cap_end:
        caps["end"] = len(vertices)
        vertices.append(centers[-1] + 0.5 * ring_radii[-1] * directions[-1])
        b = rings[-1]
        caps["end_triangles"] = (len(triangles), len(triangles) + ring_size)
        triangles.extend((caps["end"], b[m], b[(m + 1) % ring_size]) for m in range(ring_size))

    return {
        "vertices": np.asarray(vertices),
        "triangles": np.asarray(triangles, dtype=np.int64),
        "rings": rings,
        "node_rings": node_rings,
        "caps": caps,
        "bands": bands,
    }


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _bone_weights(
    vertices: np.ndarray,
    bones: Dict[int, List[Tuple[np.ndarray, np.ndarray]]],
    n_joints: int,
    sigma: float,
    max_influences: int,
):
    """Gaussian falloff of the distance to each joint's bones, relative to the nearest bone"""
    distances = np.full((len(vertices), n_joints), np.inf)
    for joint, segments in bones.items():
        for a, b in segments:
            distances[:, joint] = np.minimum(distances[:, joint], _segment_distances(vertices, a, b))
    nearest = distances.min(axis=1, keepdims=True)
    weights = np.exp(-(((distances - nearest) / sigma) ** 2))
    weights[~np.isfinite(distances)] = 0.0
    return normalize_weights(weights, max_influences=max_influences)


def _bind_rigidly(weights: sp.csr_matrix, rigid: Dict[int, np.ndarray], max_influences: int) -> sp.csr_matrix:
    """Skin every vertex of each listed set to its joint alone"""
    dense = weights.toarray()
    for joint, vertices in rigid.items():
        dense[vertices] = 0.0
        dense[vertices, joint] = 1.0
    return normalize_weights(dense, max_influences=max_influences)


def _joint_regressor(
    vertices: np.ndarray, joints: np.ndarray, excluded: Dict[int, np.ndarray], count: int = 8
) -> np.ndarray:
    """Inverse-distance rows over each joint's nearest vertices outside its excluded set"""
    tree = cKDTree(vertices)
    regressor = np.zeros((len(joints), len(vertices)))
    for j, joint in enumerate(joints):
        skip = excluded.get(j, np.zeros(0, dtype=np.int64))
        distances, nearest = tree.query(joint, k=min(len(vertices), count + len(skip)))
        keep = ~np.isin(nearest, skip)
        distances, nearest = distances[keep][:count], nearest[keep][:count]
        inverse = 1.0 / (distances + 1e-3)
        regressor[j, nearest] = inverse / inverse.sum()
    return regressor


def _follow_joints(shape_basis: np.ndarray, regressor: np.ndarray, rigid: Dict[int, np.ndarray]) -> np.ndarray:
    """Rigid vertex sets translate with their joint under every shape component"""
    joint_basis = np.einsum("jn,nak->jak", regressor, shape_basis)
    out = shape_basis.copy()
    for joint, vertices in rigid.items():
        out[vertices] = joint_basis[joint]
    return out


def _smooth_fields(
    rng: np.random.Generator, points: np.ndarray, count: int, width: float, amplitude: float, bumps: int = 6
) -> np.ndarray:
    """(N, 3, count) smooth random displacement fields made of Gaussian bumps"""
    out = np.zeros((len(points), 3, count))
    for k in range(count):
        centers = points[rng.choice(len(points), size=bumps, replace=False)]
        vectors = rng.normal(size=(bumps, 3))
        falloff = np.exp(-(np.linalg.norm(points[:, None, :] - centers[None], axis=2) / width) ** 2)
        field = falloff @ vectors
        peak = np.linalg.norm(field, axis=1).max()
        out[:, :, k] = amplitude * field / max(peak, 1e-12)
    return out


def _graph_depth(mesh: Mesh, seeds: np.ndarray, limit: int) -> np.ndarray:
    """Edge-hop distance from a vertex set, capped at `limit`"""
    depth = np.full(mesh.n_vertices, limit)
    frontier = np.asarray(seeds, dtype=np.int64)
    depth[frontier] = 0
    adjacency = mesh.vertex_adjacency()
    for level in range(1, limit):
        reached = np.unique(adjacency[frontier].indices)
        frontier = reached[depth[reached] > level]
        depth[frontier] = level
    return depth


def _body_skeleton() -> Skeleton:
    positions = np.array([p for _, _, p in BODY_JOINTS])
    joints = tuple(Joint(name, parent, np.zeros(3)) for name, parent, _ in BODY_JOINTS)
    return Skeleton(joints).with_rest_positions(positions)


def _hand_skeleton(side: str) -> Tuple[Skeleton, Dict[str, np.ndarray]]:
    """16-joint hand in hand coordinates: x toward the fingers, y palm normal, wrist at origin"""
    sign = 1.0 if side == "left" else -1.0
    starts = {
        "thumb": np.array([0.03, 0.0, -0.035 * sign]),
        "index": np.array([PALM_LENGTH, 0.0, -0.024 * sign]),
        "middle": np.array([PALM_LENGTH, 0.0, -0.008 * sign]),
        "ring": np.array([PALM_LENGTH, 0.0, 0.008 * sign]),
        "pinky": np.array([PALM_LENGTH, 0.0, 0.024 * sign]),
    }
    lengths = {
        "thumb": (0.03, 0.025, 0.02),
        "index": (0.04, 0.025, 0.02),
        "middle": (0.045, 0.028, 0.022),
        "ring": (0.04, 0.025, 0.02),
        "pinky": (0.03, 0.02, 0.018),
    }
    directions = {name: np.array([1.0, 0.0, 0.0]) for name in FINGERS}
    directions["thumb"] = np.array([0.6, 0.0, -0.8 * sign])

    joints = [Joint("root", -1, np.zeros(3), RotationType.EULER_XYZ, True)]
    positions = [np.zeros(3)]
    chains: Dict[str, np.ndarray] = {}
    for name in FINGERS:
        chain = [starts[name]]
        for length in lengths[name]:
            chain.append(chain[-1] + length * directions[name])
        chains[name] = np.asarray(chain)
        parent = 0
        for k in range(3):
            joints.append(Joint(f"{name}_{k + 1}", parent, np.zeros(3), RotationType.EULER_XYZ, True))
            positions.append(chain[k])
            parent = len(joints) - 1
    return Skeleton(tuple(joints)).with_rest_positions(np.asarray(positions)), chains


def _hand_frame(side: str) -> np.ndarray:
    """Rotation taking hand coordinates to body coordinates"""
    if side == "left":
        return np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])


def _farthest_points(points: np.ndarray, count: int) -> np.ndarray:
    chosen = [int(np.argmin(np.linalg.norm(points - points.mean(axis=0), axis=1)))]
    distances = np.linalg.norm(points - points[chosen[0]], axis=1)
    while len(chosen) < min(count, len(points)):
        nxt = int(np.argmax(distances))
        chosen.append(nxt)
        distances = np.minimum(distances, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen)


def _subdivide(vertices: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split every triangle into four through shared edge midpoints"""
    vertices = [v for v in vertices]
    midpoint: Dict[Tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in midpoint:
            midpoint[key] = len(vertices)
            vertices.append(0.5 * (vertices[a] + vertices[b]))
        return midpoint[key]

    out = []
    for a, b, c in triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.asarray(vertices), np.asarray(out, dtype=np.int64)


def _extract(mesh_vertices: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compact a triangle subset; returns vertices, reindexed triangles and the source vertex ids"""
    used = np.unique(triangles.ravel())
    remap = np.full(len(mesh_vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return mesh_vertices[used], remap[triangles], used


def generate_synthetic_model(config: Optional[SyntheticModelConfig] = None) -> UnifiedModel:
    """Procedural stitched model with keypoint anchors bound to its output mesh"""
    config = (config or SyntheticModelConfig()).validate()
    rng = np.random.default_rng(config.seed)
    skeleton = _body_skeleton()
    joints = skeleton.rest_positions()
    J = {name: joints[i] for i, name in enumerate(skeleton.names)}

    builder = _MeshBuilder()
    torso_v, torso_t, _ = _ellipsoid(TORSO[0], TORSO[1], config.torso_rings, config.torso_columns)
    builder.add(torso_v, torso_t)

    head_v, head_t, head_cells = _ellipsoid(HEAD[0], np.full(3, HEAD[1]), config.head_rings, config.head_columns)
    head_tri_start = builder.n_triangles
    head_start = builder.add(head_v, head_t)
    rows = (config.head_rings // 4, 3 * config.head_rings // 4)
    columns = (3 * config.head_columns // 8, 5 * config.head_columns // 8)
    in_rows = (head_cells[:, 0] >= rows[0]) & (head_cells[:, 0] < rows[1])
    in_face = in_rows & (head_cells[:, 1] >= columns[0]) & (head_cells[:, 1] < columns[1])
    face_region = head_tri_start + np.flatnonzero(in_face)

    neck = _tube(
        [(0.0, 1.45, 0.0), J["neck"], J["head"], (0.0, 1.64, 0.0)],
        [0.05, 0.05, 0.045, 0.045],
        config.ring_size,
        config.samples_per_segment,
        (0.0, 0.0, 1.0),
    )
    builder.add(neck["vertices"], neck["triangles"])

    toe_tips = {}
    for side in ("l", "r"):
        sign = 1.0 if side == "l" else -1.0
        toe_tips[side] = np.array([0.09 * sign, 0.02, 0.16])
        leg = _tube(
            [J[f"{side}_hip"], J[f"{side}_knee"], J[f"{side}_ankle"], J[f"{side}_foot"], toe_tips[side]],
            [0.065, 0.05, 0.04, 0.035, 0.025],
            config.ring_size,
            config.samples_per_segment,
            (1.0, 0.0, 0.0),
        )
        builder.add(leg["vertices"], leg["triangles"])

    palm_ends, arm_tubes = {}, {}
    for side in ("l", "r"):
        sign = 1.0 if side == "l" else -1.0
        palm_ends[side] = J[f"{side}_wrist"] + np.array([PALM_LENGTH * sign, 0.0, 0.0])
        arm = _tube(
            [J[f"{side}_collar"], J[f"{side}_shoulder"], J[f"{side}_elbow"], J[f"{side}_wrist"], palm_ends[side]],
            [0.045, 0.045, 0.038, 0.032, 0.03],
            config.ring_size,
            config.samples_per_segment,
            (0.0, 0.0, 1.0),
        )
        start_vertex = builder.count
        start_tri = builder.n_triangles
        builder.add(arm["vertices"], arm["triangles"])
        arm_tubes[side] = (arm, start_vertex, start_tri)

    # hand region: every band from the wrist ring outward plus the end cap
    hand_regions: Dict[str, np.ndarray] = {}
    for side, (arm, _, start_tri) in arm_tubes.items():
        region = [np.arange(lo, hi) for lo, hi in arm["bands"][arm["node_rings"][3]:]]
        region.append(np.arange(*arm["caps"]["end_triangles"]))
        hand_regions[side] = start_tri + np.concatenate(region)

    body_rest = builder.mesh()
    logger.info(f"Synthetic body mesh: {body_rest.n_vertices} vertices, {body_rest.n_triangles} triangles")

    bones: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = {j: [] for j in range(skeleton.n_joints)}
    for j, joint in enumerate(skeleton.joints):
        if joint.parent >= 0:
            bones[joint.parent].append((joints[joint.parent], joints[j]))
    bones[skeleton.index("head")].append((J["head"], np.array([0.0, 1.78, 0.0])))
    for side in ("l", "r"):
        bones[skeleton.index(f"{side}_foot")].append((J[f"{side}_foot"], toe_tips[side]))
        bones[skeleton.index(f"{side}_wrist")].append((J[f"{side}_wrist"], palm_ends[side]))
    body_weights = _bone_weights(
        body_rest.vertices, bones, skeleton.n_joints, config.body_weight_sigma, config.max_influences
    )
    # seam carriers: head sphere and both hand regions, each skinned to one joint
    rigid: Dict[int, np.ndarray] = {}
    if config.rigid_seams:
        rigid[skeleton.index("head")] = head_start + np.arange(len(head_v))
        for side, region in hand_regions.items():
            rigid[skeleton.index(f"{side}_wrist")] = np.unique(body_rest.triangles[region].ravel())
    body_weights = _bind_rigidly(body_weights, rigid, config.max_influences)
    regressor = _joint_regressor(body_rest.vertices, joints, rigid)

    shape_basis = np.zeros((body_rest.n_vertices, 3, config.n_body_shape))
    if config.n_body_shape > 0:
        shape_basis[:, 1, 0] = 0.05 * (body_rest.vertices[:, 1] - J["pelvis"][1])
    if config.n_body_shape > 1:
        shape_basis[:, :, 1] = 0.01 * compute_vertex_normals(body_rest).normals
    if config.n_body_shape > 2:
        shape_basis[:, :, 2:] = _smooth_fields(rng, body_rest.vertices, config.n_body_shape - 2, 0.12, 0.01)
    shape_basis = _follow_joints(shape_basis, regressor, rigid)

    body = BodyModel(body_rest.vertices, body_rest.triangles, shape_basis, skeleton, body_weights, regressor)

    # face: subdivided copy of the head patch, stored in face coordinates
    face_source = body_rest.triangles[face_region]
    patch_v, patch_t, _ = _extract(body_rest.vertices, face_source)
    face_v, face_t = _subdivide(patch_v, patch_t)
    face_placed = Mesh(face_v, face_t)
    face_loop = face_placed.boundary_loops()[0]
    gamma_face = rigid_transform(Rotation.from_euler("y", np.pi).as_matrix(), HEAD[0])
    face_local = (face_v - gamma_face[:3, 3]) @ gamma_face[:3, :3]
    depth = _graph_depth(face_placed, face_loop, 4)
    falloff = np.clip((depth - 1) / 2.0, 0.0, 1.0)[:, None, None]
    identity_basis = falloff * _smooth_fields(rng, face_local, config.n_face_identity, 0.05, 0.005)
    expression_basis = falloff * _smooth_fields(rng, face_local, config.n_face_expression, 0.04, 0.005)
    face = FaceModel(face_local, face_t, identity_basis, expression_basis)

    annotations = {"face": PartAnnotation("face", face_region, face_loop)}
    alignment = {"face": gamma_face}
    hands: Dict[str, HandModel] = {}
    hand_chains: Dict[str, Dict[str, np.ndarray]] = {}
    hand_tips: Dict[str, Dict[str, int]] = {}
    for side, part in (("l", "left_hand"), ("r", "right_hand")):
        arm, start_vertex, _ = arm_tubes[side]
        wrist_ring = arm["node_rings"][3]
        region = hand_regions[side]

        palm_v, palm_t, used = _extract(body_rest.vertices, body_rest.triangles[region])
        ring0 = np.searchsorted(used, start_vertex + arm["rings"][wrist_ring])

        hand_side = "left" if side == "l" else "right"
        hand_skeleton, chains = _hand_skeleton(hand_side)
        gamma = rigid_transform(_hand_frame(hand_side), J[f"{side}_wrist"])
        hand_builder = _MeshBuilder()
        hand_builder.add((palm_v - gamma[:3, 3]) @ gamma[:3, :3], palm_t)
        tips = {}
        for name in FINGERS:
            capsule = _tube(chains[name], [0.009, 0.008, 0.007, 0.006], config.finger_ring_size, 1, (0.0, 1.0, 0.0))
            offset = hand_builder.add(capsule["vertices"], capsule["triangles"])
            tips[name] = offset + capsule["caps"]["end"]
        hand_mesh_local = hand_builder.mesh()

        hand_bones: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = {0: [(np.zeros(3), np.array([PALM_LENGTH, 0.0, 0.0]))]}
        for f, name in enumerate(FINGERS):
            chain = chains[name]
            for k in range(3):
                hand_bones[1 + 3 * f + k] = [(chain[k], chain[k + 1])]
        hand_weights = _bone_weights(
            hand_mesh_local.vertices, hand_bones, HAND_JOINTS, config.hand_weight_sigma, config.max_influences
        )
        if config.rigid_seams:
            hand_weights = _bind_rigidly(hand_weights, {0: np.arange(len(palm_v))}, config.max_influences)
        hands[part] = HandModel(hand_mesh_local.vertices, hand_mesh_local.triangles, hand_skeleton, hand_weights, hand_side)
        annotations[part] = PartAnnotation(part, region, ring0)
        alignment[part] = gamma
        hand_chains[part] = chains
        hand_tips[part] = tips

    model = build_unified_model(body, face, hands["left_hand"], hands["right_hand"], alignment, annotations)
    anchors = _keypoint_anchors(model, hand_tips, toe_tips)
    regressor, _ = build_keypoint_regressor(model.rest_mesh(), anchors, model.output_weights(), model.rest_joints())
    return model.with_regressor(regressor)


def _marker_vertices(
    weights: np.ndarray, positions: np.ndarray, center: np.ndarray, candidates: np.ndarray, count: int
) -> List[int]:
    """Highest-weight candidates, each pointing away from the previous picks by more than 60 degrees"""
    order = candidates[np.lexsort((candidates, -weights[candidates]))]
    picked: List[int] = []
    for v in order:
        if weights[v] <= 0:
            break
        direction = positions[v] - center
        norm = np.linalg.norm(direction)
        if norm < 1e-9:
            continue
        cosines = [np.dot(direction, positions[p] - center) / (norm * np.linalg.norm(positions[p] - center)) for p in picked]
        if all(c < 0.5 for c in cosines):
            picked.append(int(v))
        if len(picked) == count:
            break
    return picked


def _keypoint_anchors(
    model: UnifiedModel, hand_tips: Dict[str, Dict[str, int]], toe_tips: Dict[str, np.ndarray]
) -> List[KeypointAnchor]:
    stitching = model.stitching
    skeleton = model.skeleton
    rest = model.rest_mesh()
    anchors: List[KeypointAnchor] = []

    for keypoint, joint in JOINT_KEYPOINTS.items():
        anchors.append(KeypointAnchor(keypoint, "joint", joint=skeleton.index(joint)))

    center, radius = np.asarray(HEAD[0]), HEAD[1]

    def on_head(direction) -> Tuple[float, float, float]:
        d = np.asarray(direction, dtype=float)
        return tuple(center + radius * d / np.linalg.norm(d))

    anchors.append(KeypointAnchor("nose", "surface", position=on_head((0.0, 0.0, 1.0))))
    for side, sign in (("l", 1.0), ("r", -1.0)):
        anchors.append(KeypointAnchor(f"{side}_eye", "surface", position=on_head((0.35 * sign, 0.3, 0.9))))
        anchors.append(KeypointAnchor(f"{side}_ear", "surface", position=on_head((sign, 0.0, 0.0))))
        tip = toe_tips[side]
        anchors.append(KeypointAnchor(f"{side}_big_toe", "surface", position=tuple(tip + np.array([-0.012 * sign, 0.0, 0.0]))))
        small_toe = tip + np.array([0.012 * sign, 0.0, -0.005])
        anchors.append(KeypointAnchor(f"{side}_small_toe", "surface", position=tuple(small_toe)))
        anchors.append(KeypointAnchor(f"{side}_foot_ball", "surface", position=(0.09 * sign, 0.0, 0.10)))

    body = model.body
    kept = np.flatnonzero(~stitching.redundant)
    dense = body.weights.toarray()
    marker = 0
    for j, name in enumerate(skeleton.names[: model.n_body_joints]):
        if name.endswith("_wrist"):
            continue
        for v in _marker_vertices(dense[:, j], body.mean, body.skeleton.rest_positions()[j], kept, 2):
            row = int(stitching.output_rows("body", [v])[0])
            anchors.append(KeypointAnchor(f"body_marker_{marker:02d}", "surface", vertex=row))
            marker += 1

    for side, part in (("l", "left_hand"), ("r", "right_hand")):
        first = model.hand_offset(part)
        anchors.append(KeypointAnchor(f"{side}_hand_00", "joint", joint=first))
        for f, name in enumerate(FINGERS):
            for k in range(3):
                anchors.append(KeypointAnchor(f"{side}_hand_{4 * f + k + 1:02d}", "joint", joint=first + 1 + 3 * f + k))
            tip_row = int(stitching.output_rows(part, [hand_tips[part][name]])[0])
            anchors.append(KeypointAnchor(f"{side}_hand_{4 * f + 4:02d}", "surface", vertex=tip_row))

        hand = model.hands[part]
        hand_weights = hand.weights.toarray()
        hand_rest = hand.skeleton.rest_positions()
        candidates = np.arange(hand.n_vertices)
        picks: List[int] = []
        for j in range(1, HAND_JOINTS):
            picks += _marker_vertices(hand_weights[:, j], hand.mean, hand_rest[j], candidates, 1)
        palm = hand_rest[0] + np.array([PALM_LENGTH / 2, 0.0, 0.0])
        picks += _marker_vertices(hand_weights[:, 0], hand.mean, palm, candidates, 2)
        for m, v in enumerate(picks):
            row = int(stitching.output_rows(part, [v])[0])
            anchors.append(KeypointAnchor(f"{side}_hand_marker_{m:02d}", "surface", vertex=row))

    lo, hi = stitching.part_offsets["face"]
    face_rows = stitching.output_rows("face", np.arange(hi - lo))
    interior = np.setdiff1d(np.arange(hi - lo), np.unique(stitching.seams.stacked_vertex - lo))
    picks = interior[_farthest_points(rest.vertices[face_rows[interior]], 12)]
    for m, v in enumerate(sorted(picks.tolist())):
        anchors.append(KeypointAnchor(f"face_{m:02d}", "surface", vertex=int(face_rows[v])))
    return anchors


def sample_subject(
    model, rng: np.random.Generator, shape_std: float = 1.0, scale_std: float = 0.03
) -> ParameterVector:
    """Identity parameters: shape and identity coefficients, hand bone scales"""
    layout = model.layout
    params = model.zeros()
    values = params.values
    free = ~layout.frozen_mask()
    for block in layout.blocks:
        idx = layout.indices(block.name)
        idx = idx[free[idx]]
        if block.kind == "shape":
            values[idx] = rng.normal(0.0, shape_std, size=len(idx))
        elif block.kind == "scale":
            values[idx] = 1.0 + rng.normal(0.0, scale_std, size=len(idx))
    return params


def sample_pose(
    model,
    rng: np.random.Generator,
    subject: Optional[ParameterVector] = None,
    pose_std: float = 0.15,
    hand_pose_std: float = 0.1,
    root_std: float = 0.3,
    translation_std: float = 0.1,
    expression_std: float = 0.5,
) -> ParameterVector:
    """Per-frame parameters on top of a subject: pose, expression and translation"""
    layout = model.layout
    params = subject.copy() if subject is not None else model.zeros()
    values = params.values
    free = ~layout.frozen_mask()
    for block in layout.blocks:
        idx = layout.indices(block.name)
        if block.kind == "translation":
            values[idx] = rng.normal(0.0, translation_std, size=len(idx))
        elif block.kind == "expression":
            values[idx] = rng.normal(0.0, expression_std, size=len(idx))
        elif block.kind == "pose":
            joint = np.arange(len(idx)) // 3
            std = np.full(len(idx), pose_std)
            if block.name.endswith("hand_pose"):
                std[:] = hand_pose_std
            elif block.name == "pose":
                std[joint >= len(BODY_JOINTS)] = hand_pose_std
            if block.name in ("body_pose", "pose"):
                std[:3] = root_std
            sample = rng.normal(0.0, std)
            values[idx] = np.where(free[idx], sample, 0.0)
    return params
