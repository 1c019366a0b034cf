"""Input validation helpers shared across the package.

All helpers raise :class:`csr3d.exceptions.ValidationError` with a message
naming the offending argument, and return canonicalized numpy arrays
(float64 / int64 / bool, C-contiguous) so downstream code never revalidates.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def check_finite_array(a, name, dtype=np.float64, ndim=None, shape=None):
    """Coerce to a C-contiguous array of `dtype`, checking finiteness and shape."""
    arr = np.ascontiguousarray(a, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    if shape is not None:
        for axis, expected in enumerate(shape):
            if expected is not None and arr.shape[axis] != expected:
                raise ValidationError(
                    f"{name}: expected shape {shape}, got {arr.shape}"
                )
    if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_shape3d(vertices, name="shape"):
    """An (n, 3) float64 array of finite vertex coordinates, n >= 1."""
    arr = check_finite_array(vertices, name, ndim=2)
    if arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ValidationError(f"{name}: expected (n, 3) with n >= 1, got {arr.shape}")
    return arr


def check_topology(triangles, n_vertices, name="triangles"):
    """An (m, 3) int64 array of vertex index triples, indices < n, no repeats."""
    arr = np.ascontiguousarray(triangles, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name}: expected (m, 3) index triples, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_vertices):
        raise ValidationError(
            f"{name}: vertex index out of range for n={n_vertices}"
        )
    degenerate = (
        (arr[:, 0] == arr[:, 1]) | (arr[:, 1] == arr[:, 2]) | (arr[:, 0] == arr[:, 2])
    )
    if np.any(degenerate):
        bad = int(np.flatnonzero(degenerate)[0])
        raise ValidationError(f"{name}: triangle {bad} repeats a vertex index")
    return arr


def check_landmark_indices(indices, n_vertices, name="landmark indices"):
    """Distinct vertex indices, each < n, at least 4 of them."""
    arr = np.ascontiguousarray(indices, dtype=np.int64)
    if arr.ndim != 1:
        raise ValidationError(f"{name}: expected a flat index sequence")
    if arr.size < 4:
        raise ValidationError(f"{name}: need at least 4 landmarks, got {arr.size}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_vertices):
        raise ValidationError(f"{name}: vertex index out of range for n={n_vertices}")
    if np.unique(arr).size != arr.size:
        raise ValidationError(f"{name}: indices must be distinct")
    return arr


def check_camera_scale(scale, name="camera scale"):
    f = float(scale)
    if not np.isfinite(f) or f <= 0.0:
        raise ValidationError(f"{name}: must be finite and > 0, got {scale!r}")
    return f


def check_visibility_mask(mask, n_landmarks, name="visibility"):
    arr = np.ascontiguousarray(mask, dtype=bool)
    if arr.shape != (n_landmarks,):
        raise ValidationError(
            f"{name}: expected shape ({n_landmarks},), got {arr.shape}"
        )
    return arr


def check_zero_fill(points, visibility, name="landmarks"):
    """Enforce the masking invariant: invisible entries are exactly (0, 0)."""
    invisible = ~visibility
    if np.any(points[invisible] != 0.0):
        bad = int(np.flatnonzero(invisible & np.any(points != 0.0, axis=-1))[0])
        raise ValidationError(
            f"{name}: landmark {bad} is invisible but has nonzero coordinates"
        )


def check_unit_vectors(vectors, name="normals", tol=1e-6):
    arr = check_finite_array(vectors, name, ndim=2, shape=(None, 3))
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        bad = int(np.flatnonzero(np.abs(norms - 1.0) > tol)[0])
        raise ValidationError(
            f"{name}: row {bad} is not unit length (|v| = {norms[bad]:.9f})"
        )
    return arr
