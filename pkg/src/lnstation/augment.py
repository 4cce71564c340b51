"""Random affine patch augmentation shared by both training branches."""

from __future__ import annotations

import numpy as np

from .voxgrid import affine_resample

MAX_ROTATION_DEG = 10.0
SCALE_RANGE = (0.9, 1.1)
MAX_SHIFT_VOX = 4.0


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_affine(patch: np.ndarray, rng: np.random.Generator, pad_value: float) -> np.ndarray:
    """Rotate (<=10 deg per axis), scale (0.9-1.1) and shift (<=4 voxels)
    a cubic patch, resampling trilinearly; OOB voxels take pad_value."""
    angles = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG, size=3))
    s = rng.uniform(*SCALE_RANGE)
    shift = rng.uniform(-MAX_SHIFT_VOX, MAX_SHIFT_VOX, size=3)
    matrix = _rotation_matrix(angles) / s
    return affine_resample(patch, matrix, patch.shape, pad_value, shift=shift)
