"""Core 3D/2D geometry.

Conventions used throughout the package:

* 3D shapes are (n, 3) float64 arrays in mm, row ``j`` = vertex ``j``.
  All shapes in a dataset share ``n`` and vertex-index semantics
  (dense point-to-point registration), and are centered at the world origin.
* The camera is scaled-orthographic with a single parameter ``scale`` (f > 0):
  a 3D point (x, y, z) projects to the image point (f*x, f*y).
* Image coordinates are y-up, same handedness as the world frame; detector
  files using y-down are converted at import time.
* Invisible landmarks are stored as exact (0, 0) so they contribute zero
  deviation to downstream regression.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGeometryError, ValidationError
from .validation import (
    check_camera_scale,
    check_finite_array,
    check_landmark_indices,
    check_shape3d,
    check_topology,
    check_unit_vectors,
    check_visibility_mask,
    check_zero_fill,
)

REGION_NAMES = ("nose", "eyes", "mouth", "other")
REGION_NOSE, REGION_EYES, REGION_MOUTH, REGION_OTHER = range(4)


@dataclass(frozen=True)
class LandmarkSpec:
    """Which shape vertices are landmarks, and which facial region each belongs to.

    ``indices`` are distinct vertex indices (length l >= 4); ``regions`` are
    uint8 codes into :data:`REGION_NAMES`, one per landmark.
    """

    indices: np.ndarray
    regions: np.ndarray

    def __post_init__(self):
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if indices.ndim != 1 or indices.size < 4:
            raise ValidationError("LandmarkSpec: need at least 4 landmark indices")
        if np.unique(indices).size != indices.size:
            raise ValidationError("LandmarkSpec: indices must be distinct")
        regions = np.ascontiguousarray(self.regions, dtype=np.uint8)
        if regions.shape != indices.shape:
            raise ValidationError("LandmarkSpec: one region label per landmark")
        if regions.size and regions.max() >= len(REGION_NAMES):
            raise ValidationError("LandmarkSpec: unknown region code")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "regions", regions)

    def __len__(self):
        return self.indices.size

    def subset(self, positions) -> "LandmarkSpec":
        """Spec restricted to the given positions (into the landmark list)."""
        positions = np.ascontiguousarray(positions, dtype=np.int64)
        return LandmarkSpec(self.indices[positions], self.regions[positions])


@dataclass(frozen=True)
class LandmarkSet2D:
    """l image points with a visibility mask; invisible entries are exact zeros."""

    points: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        points = check_finite_array(self.points, "landmark points", ndim=2, shape=(None, 2))
        visibility = check_visibility_mask(self.visibility, points.shape[0])
        check_zero_fill(points, visibility)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "visibility", visibility)

    def __len__(self):
        return self.points.shape[0]

    def flat(self) -> np.ndarray:
        """Points flattened to (u1, v1, u2, v2, ...)."""
        return self.points.reshape(-1)


def zero_filled(points, visibility) -> LandmarkSet2D:
    """Build a LandmarkSet2D, zeroing whatever sits at invisible slots."""
    points = check_finite_array(points, "landmark points", ndim=2, shape=(None, 2)).copy()
    visibility = check_visibility_mask(visibility, points.shape[0])
    points[~visibility] = 0.0
    return LandmarkSet2D(points, visibility)


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * rotation @ p + translation, rotation proper (det +1)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        rot = check_finite_array(self.rotation, "rotation", ndim=2, shape=(3, 3))
        trans = check_finite_array(self.translation, "translation", ndim=1, shape=(3,))
        scale = check_camera_scale(self.scale, "transform scale")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-10:
            raise ValidationError("rotation is not orthonormal within 1e-10")
        if abs(np.linalg.det(rot) - 1.0) > 1e-10:
            raise ValidationError("rotation determinant is not +1 within 1e-10")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "scale", scale)

    def apply(self, points) -> np.ndarray:
        points = check_shape3d(points, "points")
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        inv_rot = self.rotation.T
        return SimilarityTransform(
            inv_rot, -inv_scale * inv_rot @ self.translation, inv_scale
        )

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(np.eye(3), np.zeros(3), 1.0)


def rotation_yaw_pitch(yaw_deg, pitch_deg) -> np.ndarray:
    """Right-handed rotation: yaw about +y applied first, then pitch about +x.

    Yaw +90 deg maps (1, 0, 0) to (0, 0, -1).
    """
    yaw = np.deg2rad(yaw_deg)
    pitch = np.deg2rad(pitch_deg)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return rx @ ry


def apply_pose(shape, transform: SimilarityTransform) -> np.ndarray:
    """Map every vertex through a similarity transform."""
    return transform.apply(shape)


def project(shape, spec: LandmarkSpec, scale, mask=None) -> LandmarkSet2D:
    """Scaled-orthographic projection of the landmark vertices.

    Visible landmark i maps to scale * (x_i, y_i); masked-out entries are
    exact (0, 0) with visibility False.
    """
    shape = check_shape3d(shape)
    scale = check_camera_scale(scale)
    indices = check_landmark_indices(spec.indices, shape.shape[0])
    if mask is None:
        mask = np.ones(indices.size, dtype=bool)
    mask = check_visibility_mask(mask, indices.size)
    pts = scale * shape[indices, :2]
    pts[~mask] = 0.0
    return LandmarkSet2D(pts, mask)


def estimate_camera(landmarks2d: LandmarkSet2D, points3d) -> float:
    """Least-squares scaled-orthographic scale from 2D/3D landmark pairs.

    Minimizes sum over visible i of |(u_i, v_i) - f*(x_i, y_i)|^2, which has
    the closed form f = sum(u*x + v*y) / sum(x^2 + y^2). Only visible
    landmarks enter the fit.
    """
    points3d = check_finite_array(points3d, "landmark vertices", ndim=2, shape=(None, 3))
    if points3d.shape[0] != len(landmarks2d):
        raise ValidationError("estimate_camera: 2D/3D landmark counts differ")
    vis = landmarks2d.visibility
    if not np.any(vis):
        raise DegenerateGeometryError("estimate_camera: no visible landmarks")
    uv = landmarks2d.points[vis]
    xy = points3d[vis, :2]
    denom = float(np.sum(xy * xy))
    if denom <= 0.0:
        raise DegenerateGeometryError(
            "estimate_camera: all visible landmarks project to the origin"
        )
    f = float(np.sum(uv * xy)) / denom
    if f <= 0.0 or not np.isfinite(f):
        raise DegenerateGeometryError(
            f"estimate_camera: degenerate configuration yields scale {f}"
        )
    return f


def vertex_normals(shape, triangles) -> np.ndarray:
    """Per-vertex unit normals: area-weighted mean of incident triangle normals.

    Counter-clockwise winding is outward. A vertex with no non-degenerate
    incident triangle has no defined normal and raises.
    """
    shape = check_shape3d(shape)
    tri = check_topology(triangles, shape.shape[0])
    a = shape[tri[:, 0]]
    b = shape[tri[:, 1]]
    c = shape[tri[:, 2]]
    # cross product length = 2 * area, so summing raw cross products is
    # exactly area weighting
    face = np.cross(b - a, c - a)
    acc = np.zeros_like(shape)
    for k in range(3):
        np.add.at(acc, tri[:, k], face)
    norms = np.linalg.norm(acc, axis=1)
    dead = norms <= 0.0
    if np.any(dead):
        bad = int(np.flatnonzero(dead)[0])
        raise DegenerateGeometryError(
            f"vertex_normals: vertex {bad} has no defined normal"
        )
    return acc / norms[:, None]


def view_direction(scale) -> np.ndarray:
    """Viewing direction d = (M1/|M1|) x (M2/|M2|) of the scaled-orthographic camera.

    With projection rows M1 = (f, 0, 0) and M2 = (0, f, 0) this is always
    (0, 0, 1); it is computed from the rows rather than hardcoded so the
    classification formula stays visibly tied to the camera model.
    """
    f = check_camera_scale(scale)
    m1 = np.array([f, 0.0, 0.0])
    m2 = np.array([0.0, f, 0.0])
    return np.cross(m1 / np.linalg.norm(m1), m2 / np.linalg.norm(m2))


def landmark_visibility(normals, scale) -> np.ndarray:
    """Self-occlusion mask from surface normals: visible iff n . d > 0 strictly.

    Grazing normals (n . d == 0) score 1/2 under the sign-function rule and
    are classified invisible: a grazing landmark carries no reliable image
    position.
    """
    normals = check_unit_vectors(normals, "normals")
    d = view_direction(scale)
    score = 0.5 * (1.0 + np.sign(normals @ d))
    return score > 0.5


def procrustes(source, target, with_scale=True):
    """Optimal similarity alignment of `source` onto `target`.

    Returns ``(transform, aligned)`` where `transform` minimizes
    sum_j |s * R @ p_j + t - q_j|^2 over proper rotations (det(R) = +1,
    reflections excluded), translations, and, when `with_scale`, uniform
    positive scale.
    """
    src = check_shape3d(source, "source")
    tgt = check_shape3d(target, "target")
    if src.shape != tgt.shape:
        raise ValidationError(
            f"procrustes: vertex counts differ ({src.shape[0]} vs {tgt.shape[0]})"
        )
    if src.shape[0] < 3:
        raise ValidationError("procrustes: need at least 3 points")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    ds = src - mu_s
    dt = tgt - mu_t
    var_s = float(np.sum(ds * ds))
    if var_s <= 0.0:
        raise DegenerateGeometryError("procrustes: source points are all coincident")
    if np.linalg.matrix_rank(ds, tol=1e-9 * float(np.abs(ds).max())) < 2:
        raise DegenerateGeometryError("procrustes: source geometry has rank < 2")
    cov = dt.T @ ds
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag(d) @ vt
    if with_scale:
        scale = float(np.sum(sv * d)) / var_s
        if scale <= 0.0:
            raise DegenerateGeometryError("procrustes: non-positive optimal scale")
    else:
        scale = 1.0
    trans = mu_t - scale * rot @ mu_s
    xf = SimilarityTransform(rot, trans, scale)
    return xf, xf.apply(src)


def mask_to_reference(landmarks: LandmarkSet2D, reference_mask) -> LandmarkSet2D:
    """Intersect a landmark set's visibility with a reference mask, re-zeroing.

    Used to zero the rendered landmarks at the same slots as the input so
    invisible landmarks contribute exactly zero deviation.
    """
    reference_mask = check_visibility_mask(reference_mask, len(landmarks))
    vis = landmarks.visibility & reference_mask
    pts = landmarks.points.copy()
    pts[~vis] = 0.0
    return LandmarkSet2D(pts, vis)
