"""Reconstruction error metrics and per-region analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGeometryError, ValidationError
from .geometry import REGION_NAMES, LandmarkSpec, procrustes
from .validation import check_shape3d


@dataclass(frozen=True)
class ErrorMap:
    """Per-vertex error field with its summary statistics."""

    per_vertex: np.ndarray
    mean: float
    std: float

    @staticmethod
    def from_values(values) -> "ErrorMap":
        values = np.ascontiguousarray(values, dtype=np.float64)
        return ErrorMap(values, float(values.mean()), float(values.std()))


def mae(ground_truth, reconstructed, align=True, norm="pervertex"):
    """Mean absolute error between two registered shapes, in mm.

    With ``align`` the reconstruction is Procrustes-aligned (similarity) to
    the ground truth first. ``norm`` selects the per-vertex reading (mean of
    per-vertex Euclidean distances, the standard choice) or ``"frobenius"``
    (Frobenius norm of the difference divided by n).

    Returns ``(value, ErrorMap)``; the error map always holds per-vertex
    distances.
    """
    gt = check_shape3d(ground_truth, "ground_truth")
    rec = check_shape3d(reconstructed, "reconstructed")
    if gt.shape != rec.shape:
        raise ValidationError("mae: vertex counts differ")
    if align:
        _, rec = procrustes(rec, gt)
    dist = np.linalg.norm(gt - rec, axis=1)
    emap = ErrorMap.from_values(dist)
    if norm == "pervertex":
        value = emap.mean
    elif norm == "frobenius":
        value = float(np.linalg.norm(gt - rec)) / gt.shape[0]
    else:
        raise ValidationError(f"mae: unknown norm {norm!r}")
    return value, emap


def mae_batch(ground_truth, reconstructed, align=True, norm="pervertex"):
    """Mean over samples of per-sample MAE; shapes are (N, n, 3)."""
    gt = np.asarray(ground_truth)
    rec = np.asarray(reconstructed)
    if gt.shape != rec.shape:
        raise ValidationError("mae_batch: shape stacks differ")
    values = [mae(g, r, align=align, norm=norm)[0] for g, r in zip(gt, rec)]
    return float(np.mean(values)), np.asarray(values)


def npde(ground_truth, reconstructed):
    """Normalized per-vertex depth error.

    Per vertex j: |z*_j - zhat_j| / (z*_max - z*_min); returns the mean and
    the per-vertex map. A flat ground-truth depth range is degenerate.
    """
    gt = check_shape3d(ground_truth, "ground_truth")
    rec = check_shape3d(reconstructed, "reconstructed")
    if gt.shape != rec.shape:
        raise ValidationError("npde: vertex counts differ")
    z = gt[:, 2]
    depth_range = float(z.max() - z.min())
    if depth_range <= 0.0:
        raise DegenerateGeometryError("npde: ground-truth depth range is zero")
    per_vertex = np.abs(z - rec[:, 2]) / depth_range
    emap = ErrorMap.from_values(per_vertex)
    return emap.mean, emap


def vertex_regions(shape, spec: LandmarkSpec) -> np.ndarray:
    """Assign every vertex the region of its nearest landmark vertex.

    Ties resolve to the lowest landmark position, making the partition
    deterministic. Covers all n vertices disjointly by construction.
    """
    shape = check_shape3d(shape)
    lm = shape[spec.indices]
    # (n, l) distance matrix; fine at desk scale
    d2 = np.sum((shape[:, None, :] - lm[None, :, :]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    return spec.regions[nearest]


def region_mae(ground_truth, reconstructed, regions, align=True):
    """MAE restricted to each region's vertex subset.

    ``regions`` is an (n,) array of codes into REGION_NAMES covering every
    vertex. Returns {region name: mae or nan for empty regions}. Alignment,
    when requested, uses all vertices once, then errors are split by region.
    """
    gt = check_shape3d(ground_truth, "ground_truth")
    rec = check_shape3d(reconstructed, "reconstructed")
    if gt.shape != rec.shape:
        raise ValidationError("region_mae: vertex counts differ")
    regions = np.ascontiguousarray(regions, dtype=np.uint8)
    if regions.shape != (gt.shape[0],):
        raise ValidationError(
            f"region_mae: partition must label all {gt.shape[0]} vertices"
        )
    if regions.size and regions.max() >= len(REGION_NAMES):
        raise ValidationError("region_mae: unknown region code")
    if align:
        _, rec = procrustes(rec, gt)
    dist = np.linalg.norm(gt - rec, axis=1)
    out = {}
    for code, name in enumerate(REGION_NAMES):
        mask = regions == code
        out[name] = float(dist[mask].mean()) if np.any(mask) else float("nan")
    return out
