"""
Rotation parameterizations and their analytic derivatives
"""

import numpy as np
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for (..., 3) vectors"""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def angle_axis_to_matrix(rotvecs: np.ndarray) -> np.ndarray:
    """(n, 3) angle-axis vectors to (n, 3, 3) rotation matrices"""
    rotvecs = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
    if len(rotvecs) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_rotvec(rotvecs).as_matrix()


def angle_axis_jacobian(rotvecs: np.ndarray) -> np.ndarray:
    """
    Derivatives dR/dv_k as an (n, 3, 3, 3) array indexed [joint, k, row, col]

    Uses dR/dv_k = (v_k [v]x + [v x (I - R) e_k]x) R / |v|^2, and [e_k]x below SMALL_ANGLE.
    """
    v = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
    n = len(v)
    R = angle_axis_to_matrix(v)
    theta2 = np.einsum("ij,ij->i", v, v)
    small = theta2 < SMALL_ANGLE**2
    safe = np.where(small, 1.0, theta2)
    eye = np.eye(3)
    out = np.empty((n, 3, 3, 3))
    v_skew = skew(v)
    for k in range(3):
        w = np.cross(v, eye[k] - R[:, :, k])
        numerator = v[:, k, None, None] * v_skew + skew(w)
        dk = np.einsum("nij,njl->nil", numerator, R) / safe[:, None, None]
        dk[small] = skew(eye[k])
        out[:, k] = dk
    return out


def _axis_matrices(angles: np.ndarray, axis: int):
    c = np.cos(angles)
    s = np.sin(angles)
    n = len(angles)
    m = np.zeros((n, 3, 3))
    d = np.zeros((n, 3, 3))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    m[:, axis, axis] = 1.0
    m[:, i, i] = c
    m[:, j, j] = c
    m[:, i, j] = -s
    m[:, j, i] = s
    d[:, i, i] = -s
    d[:, j, j] = -s
    d[:, i, j] = -c
    d[:, j, i] = c
    return m, d


def euler_xyz_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler angles: R = Rx(a) Ry(b) Rz(c)"""
    angles = np.asarray(angles, dtype=float).reshape(-1, 3)
    rx, _ = _axis_matrices(angles[:, 0], 0)
    ry, _ = _axis_matrices(angles[:, 1], 1)
    rz, _ = _axis_matrices(angles[:, 2], 2)
    return rx @ ry @ rz


def euler_xyz_jacobian(angles: np.ndarray) -> np.ndarray:
    """(n, 3, 3, 3) derivatives of the intrinsic XYZ rotation w.r.t. each angle"""
    angles = np.asarray(angles, dtype=float).reshape(-1, 3)
    rx, drx = _axis_matrices(angles[:, 0], 0)
    ry, dry = _axis_matrices(angles[:, 1], 1)
    rz, drz = _axis_matrices(angles[:, 2], 2)
    out = np.empty((len(angles), 3, 3, 3))
    out[:, 0] = drx @ ry @ rz
    out[:, 1] = rx @ dry @ rz
    out[:, 2] = rx @ ry @ drz
    return out


def matrix_to_angle_axis(matrices: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(matrices, dtype=float).reshape(-1, 3, 3)).as_rotvec()


def is_rotation(matrix: np.ndarray, tol: float = 1e-9) -> bool:
    matrix = np.asarray(matrix, dtype=float)
    return bool(np.abs(matrix.T @ matrix - np.eye(3)).max() <= tol and abs(np.linalg.det(matrix) - 1.0) <= tol)
