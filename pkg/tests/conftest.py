import numpy as np
import pytest

from src.geometry.mesh import Mesh
from src.measurements.cameras import make_camera_rig
from src.models.synthetic import SyntheticModelConfig, generate_synthetic_model, sample_pose, sample_subject

SMALL_MODEL = SyntheticModelConfig(n_body_shape=4, n_face_identity=3, n_face_expression=3)


def cube_mesh() -> Mesh:
    """Outward-oriented unit cube centered at the origin, diagonals through even-parity corners"""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    index = {tuple(c.astype(int)): i for i, c in enumerate(corners)}
    quads = [
        [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
        [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
        [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
        [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
        [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
        [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
    ]
    triangles = []
    for quad in quads:
        q = [index[c] for c in quad]
        if sum(quad[0]) % 2:
            q = q[1:] + q[:1]
        triangles += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    return Mesh(corners - 0.5, np.array(triangles))


def grid_mesh(n: int = 6, size: float = 1.0) -> Mesh:
    """Planar n x n vertex grid in z=0 with +z facing triangles"""
    xs = np.linspace(0.0, size, n)
    vertices = np.array([[x, y, 0.0] for y in xs for x in xs])
    triangles = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, d = r * n + c, r * n + c + 1, (r + 1) * n + c
            triangles += [[a, b, d + 1], [a, d + 1, d]]
    return Mesh(vertices, np.array(triangles))


@pytest.fixture
def cube():
    return cube_mesh()


@pytest.fixture
def grid():
    return grid_mesh()


@pytest.fixture(scope="session")
def model():
    return generate_synthetic_model(SMALL_MODEL)


@pytest.fixture(scope="session")
def cameras():
    return make_camera_rig(n_views=6, focal=500.0, width=640, image_height=480)


@pytest.fixture(scope="session")
def subject_params(model):
    rng = np.random.default_rng(7)
    subject = sample_subject(model, rng, shape_std=0.5, scale_std=0.02)
    return sample_pose(model, rng, subject, pose_std=0.1, hand_pose_std=0.05, root_std=0.1, translation_std=0.05)
