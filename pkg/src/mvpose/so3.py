"""Rotation helpers: geodesic metric, uniform sampling, chordal averaging."""

from __future__ import annotations

import numpy as np


def is_rotation(matrix: np.ndarray, tol: float = 1e-6) -> bool:
    """True if ``matrix`` is orthonormal with determinant +1 within ``tol``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        return False
    err = np.abs(matrix.T @ matrix - np.eye(3)).max()
    return bool(err < tol and np.linalg.det(matrix) > 0.0)


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angular distance between two rotations, in radians, clamped to [0, pi]."""
    trace = float(np.einsum("ij,ij->", np.asarray(r1, float), np.asarray(r2, float)))
    cos_angle = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))


def geodesic_distances(rotations: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise geodesic distances, (n, 3, 3) x (m, 3, 3) -> (n, m) radians."""
    traces = np.einsum("nij,mij->nm", rotations, centers)
    return np.arccos(np.clip((traces - 1.0) / 2.0, -1.0, 1.0))


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix, batched on axis 0."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n rotations uniformly over SO(3) via normalized 4-D Gaussians."""
    q = rng.standard_normal((n, 4))
    return quaternion_to_matrix(q)


def axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rotation about ``axis`` by ``angle_rad`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def project_to_so3(matrix: np.ndarray) -> np.ndarray:
    """Nearest rotation to an arbitrary 3x3 matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def chordal_mean(rotations: np.ndarray) -> np.ndarray:
    """Chordal-L2 mean: projection of the summed matrices back onto SO(3)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.ndim == 2:
        rotations = rotations[None]
    return project_to_so3(rotations.sum(axis=0))
