"""Direction grids on the unit sphere."""
from __future__ import annotations

import numpy as np


def fibonacci_sphere(count: int) -> np.ndarray:
    """Quasi-uniform unit vectors (count, 3)."""
    if count <= 0:
        return np.zeros((0, 3))
    idx = np.arange(count) + 0.5
    z = 1.0 - 2.0 * idx / count
    phi = np.pi * (1.0 + 5 ** 0.5) * idx
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def fibonacci_cap(center, half_angle: float, count: int) -> np.ndarray:
    """Quasi-uniform unit vectors within ``half_angle`` of ``center``."""
    if count <= 0:
        return np.zeros((0, 3))
    idx = np.arange(count) + 0.5
    cos_min = np.cos(half_angle)
    z = 1.0 - (1.0 - cos_min) * idx / count
    phi = np.pi * (1.0 + 5 ** 0.5) * idx
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    local = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return local @ rotation_to(center).T


def rotation_to(axis) -> np.ndarray:
    """Rotation matrix whose third column is the unit ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    e1, e2 = orthonormal_complement(axis)
    return np.column_stack([e1, e2, axis])


def orthonormal_complement(axis):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.eye(3)[np.argmin(np.abs(axis))]
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def spacing(count: int) -> float:
    """Typical angular spacing of a Fibonacci grid of ``count`` points on S^2."""
    return float(np.sqrt(4 * np.pi / max(count, 1)))


def cap_spacing(half_angle: float, count: int) -> float:
    area = 2 * np.pi * (1 - np.cos(half_angle))
    return float(np.sqrt(area / max(count, 1)))


def angle_between(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = a / np.linalg.norm(a, axis=-1, keepdims=True)
    nb = b / np.linalg.norm(b, axis=-1, keepdims=True)
    # atan2 form stays accurate for tiny angles
    cross = np.linalg.norm(np.cross(na, nb), axis=-1)
    dot = np.sum(na * nb, axis=-1)
    return np.arctan2(cross, dot)
