"""Bit-exact persistence: model files, dataset directories, OBJ, CSV.

Model file (magic ``CSR3D01``), all multi-byte values little-endian::

    header   magic 7s | version u16 | n u32 | l u32 | K u16 | flags u16
    payload  camera scale f64
             landmark indices l x u32
             region labels    l x u8
             mean shape       3n x f64          (x1, y1, z1, ...)
             stage matrices   K x (3n x (2l+1)) x f64, row-major
    trailer  u64 checksum = 64-bit FNV-1a over the payload bytes

Dataset directory: ``manifest.json`` (counts, units, camera scale, seed,
provenance, landmark spec) plus ``records.bin`` with one fixed-stride,
packed, little-endian record per sample::

    subject u32 | yaw f64 | pitch f64 | frontal u8 |
    shape 3n x f64 | landmarks 2l x f64 | visibility l x u8

A ``mesh.obj`` with the generator's neutral mean and triangulation rides
along when known; it is the topology source for OBJ export and visibility
estimation and is not part of the record contract.

All writers stage to a temporary file and rename, so failures never leave
partial outputs.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import warnings

import numpy as np

from .cascade import CascadedShapeRegressor
from .exceptions import (
    BadMagicError,
    ChecksumError,
    FileFormatError,
    LandmarkParseError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)
from .geometry import LandmarkSet2D, LandmarkSpec
from .synthdata import Dataset

MODEL_MAGIC = b"CSR3D01"
MODEL_VERSION = 1
_HEADER = struct.Struct("<7sHIIHH")

DATASET_MANIFEST = "manifest.json"
DATASET_RECORDS = "records.bin"
DATASET_MESH = "mesh.obj"
DATASET_FORMAT = "CSR3D-DS01"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64_python(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


try:  # optional acceleration; results are identical either way
    import numba

    @numba.njit(cache=True)
    def _fnv1a64_numba(arr):  # pragma: no cover - thin jit wrapper
        h = np.uint64(_FNV_OFFSET)
        p = np.uint64(_FNV_PRIME)
        for i in range(arr.size):
            h = (h ^ np.uint64(arr[i])) * p
        return h

    def fnv1a64(data: bytes) -> int:
        return int(_fnv1a64_numba(np.frombuffer(data, dtype=np.uint8)))

except ImportError:  # pragma: no cover - exercised only without numba
    def fnv1a64(data: bytes) -> int:
        return _fnv1a64_python(data)


def _atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; restore ordinary umask-derived permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- model ------------------------------------------------------------------

def save_model(model: CascadedShapeRegressor, path):
    """Write a fitted cascade to the versioned binary format."""
    if not hasattr(model, "stages_"):
        raise ValidationError("save_model: model is not fitted")
    n = int(model.n_vertices_)
    l = int(model.n_landmarks_)
    k = len(model.stages_)
    parts = [
        struct.pack("<d", float(model.camera_scale_)),
        model.landmark_indices_.astype("<u4").tobytes(),
        model.landmark_regions_.astype("u1").tobytes(),
        model.mean_shape_.reshape(-1).astype("<f8").tobytes(),
    ]
    for w in model.stages_:
        if w.shape != (3 * n, 2 * l + 1):
            raise ValidationError("save_model: stage matrix has inconsistent shape")
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    payload = b"".join(parts)
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, n, l, k, 0)
    checksum = struct.pack("<Q", fnv1a64(payload))
    _atomic_write(path, header + payload + checksum)


def _payload_size(n, l, k):
    return 8 + 4 * l + l + 24 * n + k * (3 * n) * (2 * l + 1) * 8


def load_model(path) -> CascadedShapeRegressor:
    """Read a model file back into a fitted estimator.

    The mean 2D landmarks are not persisted (prediction never reads them);
    after loading they are reconstituted as the mean shape's projection.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    magic, version, n, l, k, _flags = _HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + _payload_size(n, l, k) + 8
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: need {expected} bytes for n={n} l={l} K={k}, got {len(blob)}"
        )
    if len(blob) > expected:
        raise FileFormatError(f"{path}: {len(blob) - expected} trailing bytes")
    payload = blob[_HEADER.size:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if fnv1a64(payload) != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    offset = 0
    (scale,) = struct.unpack_from("<d", payload, offset)
    offset += 8
    indices = np.frombuffer(payload, dtype="<u4", count=l, offset=offset).astype(np.int64)
    offset += 4 * l
    regions = np.frombuffer(payload, dtype="u1", count=l, offset=offset).copy()
    offset += l
    mean = np.frombuffer(payload, dtype="<f8", count=3 * n, offset=offset).reshape(n, 3).copy()
    offset += 24 * n
    stages = []
    stage_len = (3 * n) * (2 * l + 1)
    for _ in range(k):
        w = np.frombuffer(payload, dtype="<f8", count=stage_len, offset=offset)
        stages.append(w.reshape(3 * n, 2 * l + 1).copy())
        offset += 8 * stage_len

    model = CascadedShapeRegressor(
        landmark_indices=indices, n_stages=k, landmark_regions=regions
    )
    model.n_vertices_ = n
    model.n_landmarks_ = l
    model.landmark_indices_ = indices
    model.landmark_regions_ = regions
    model.camera_scale_ = float(scale)
    model.mean_shape_ = mean
    model.stages_ = stages
    model.mean_landmarks_ = LandmarkSet2D(
        float(scale) * mean[indices, :2], np.ones(l, dtype=bool)
    )
    return model


# -- dataset ----------------------------------------------------------------

def _record_dtype(n, l):
    return np.dtype([
        ("subject", "<u4"),
        ("yaw", "<f8"),
        ("pitch", "<f8"),
        ("frontal", "u1"),
        ("shape", "<f8", (3 * n,)),
        ("landmarks", "<f8", (2 * l,)),
        ("visibility", "u1", (l,)),
    ])


def save_dataset(dataset: Dataset, directory):
    """Write manifest + packed records (+ mesh.obj when topology is known)."""
    os.makedirs(directory, exist_ok=True)
    n, l = dataset.n_vertices, dataset.n_landmarks
    records = np.empty(dataset.n_samples, dtype=_record_dtype(n, l))
    records["subject"] = dataset.subject_ids
    records["yaw"] = dataset.yaws
    records["pitch"] = dataset.pitches
    records["frontal"] = dataset.frontal_neutral
    records["shape"] = dataset.shapes.reshape(dataset.n_samples, -1)
    records["landmarks"] = dataset.landmarks.reshape(dataset.n_samples, -1)
    records["visibility"] = dataset.visibility
    has_mesh = dataset.topology is not None and dataset.neutral_shape is not None
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "samples": int(dataset.n_samples),
        "vertices": int(n),
        "landmarks": int(l),
        "subjects": int(np.unique(dataset.subject_ids).size),
        "units": "mm",
        "camera_scale": float(dataset.camera_scale),
        "seed": int(dataset.seed),
        "provenance": dataset.provenance,
        "landmark_indices": dataset.landmark_spec.indices.tolist(),
        "landmark_regions": dataset.landmark_spec.regions.tolist(),
        "records_file": DATASET_RECORDS,
        "mesh_file": DATASET_MESH if has_mesh else None,
    }
    _atomic_write(os.path.join(directory, DATASET_RECORDS), records.tobytes())
    if has_mesh:
        export_obj(dataset.neutral_shape, dataset.topology,
                   os.path.join(directory, DATASET_MESH))
    # manifest last: a directory without it never loads as a partial dataset
    _atomic_write(
        os.path.join(directory, DATASET_MANIFEST),
        json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n",
    )


def load_dataset(directory) -> Dataset:
    """Read a dataset directory, re-validating the masking invariant."""
    manifest_path = os.path.join(directory, DATASET_MANIFEST)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise BadMagicError(f"{manifest_path}: unknown dataset format")
    if manifest.get("version") != 1:
        raise VersionError(f"{manifest_path}: unsupported dataset version")
    n = int(manifest["vertices"])
    l = int(manifest["landmarks"])
    count = int(manifest["samples"])
    dtype = _record_dtype(n, l)
    records_path = os.path.join(directory, manifest.get("records_file", DATASET_RECORDS))
    size = os.path.getsize(records_path)
    if size % dtype.itemsize:
        raise TruncatedFileError(
            f"{records_path}: size {size} is not a multiple of the record stride"
        )
    records = np.fromfile(records_path, dtype=dtype)
    if records.size != count:
        raise FileFormatError(
            f"{records_path}: manifest declares {count} records, file holds {records.size}"
        )

    shapes = records["shape"].reshape(count, n, 3).astype(np.float64)
    landmarks = records["landmarks"].reshape(count, l, 2).astype(np.float64)
    visibility = records["visibility"].astype(bool)
    if not np.all(np.isfinite(shapes)) or not np.all(np.isfinite(landmarks)):
        raise FileFormatError(f"{records_path}: non-finite sample data")
    nonzero = np.any(landmarks != 0.0, axis=2)
    if np.any(nonzero & ~visibility):
        bad = int(np.flatnonzero(np.any(nonzero & ~visibility, axis=1))[0])
        raise FileFormatError(
            f"{records_path}: record {bad} has nonzero coordinates at an "
            "invisible landmark"
        )
    if np.any(~nonzero & visibility):
        warnings.warn(
            "dataset contains visible landmarks at exactly (0, 0); "
            "legitimate but worth checking",
            stacklevel=2,
        )

    neutral = topo = None
    mesh_file = manifest.get("mesh_file")
    if mesh_file:
        mesh_path = os.path.join(directory, mesh_file)
        if os.path.exists(mesh_path):
            neutral, topo = load_obj(mesh_path)
    return Dataset(
        shapes=shapes,
        landmarks=landmarks,
        visibility=visibility,
        subject_ids=records["subject"].astype(np.int64),
        yaws=records["yaw"].astype(np.float64),
        pitches=records["pitch"].astype(np.float64),
        frontal_neutral=records["frontal"].astype(bool),
        landmark_spec=LandmarkSpec(
            np.asarray(manifest["landmark_indices"], dtype=np.int64),
            np.asarray(manifest["landmark_regions"], dtype=np.uint8),
        ),
        camera_scale=float(manifest["camera_scale"]),
        seed=int(manifest["seed"]),
        provenance=manifest.get("provenance", ""),
        neutral_shape=neutral,
        topology=topo,
    )


# -- meshes -----------------------------------------------------------------

def export_obj(vertices, triangles, path):
    """Plain-text OBJ: one "v x y z" line per vertex (9 significant digits),
    then 1-based "f i j k" lines in triangle order."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    buf = io.StringIO()
    for x, y, z in vertices:
        buf.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
    for i, j, k in triangles + 1:
        buf.write(f"f {i} {j} {k}\n")
    try:
        _atomic_write(path, buf.getvalue().encode())
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc


def load_obj(path):
    """Parse v/f lines of a triangle OBJ back into arrays."""
    verts, tris = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields or fields[0] in ("#", "vn", "vt", "s", "o", "g", "usemtl", "mtllib"):
                continue
            if fields[0] == "v":
                if len(fields) < 4:
                    raise FileFormatError(f"{path}:{lineno}: malformed vertex line")
                verts.append([float(v) for v in fields[1:4]])
            elif fields[0] == "f":
                if len(fields) != 4:
                    raise FileFormatError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                tris.append([int(f.split("/")[0]) - 1 for f in fields[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64)


# -- landmark CSV -------------------------------------------------------------

def import_landmarks(path, expected_count, y_down=False) -> LandmarkSet2D:
    """Read detector output: CSV rows ``index,u,v,visible`` covering 0..l-1.

    Rows marked invisible have their coordinates zeroed on load, whatever
    the file says. With ``y_down`` the v axis is negated to match the
    package's y-up image convention.
    """
    points = np.zeros((expected_count, 2))
    visibility = np.zeros(expected_count, dtype=bool)
    seen = np.zeros(expected_count, dtype=bool)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            first = row[0].strip()
            if lineno == 1 and not first.lstrip("-").isdigit():
                continue  # header line
            if len(row) != 4:
                raise LandmarkParseError(
                    f"{path}:{lineno}: expected 4 fields index,u,v,visible"
                )
            try:
                idx = int(first)
                u = float(row[1])
                v = float(row[2])
                vis_field = int(row[3])
            except ValueError as exc:
                raise LandmarkParseError(f"{path}:{lineno}: {exc}") from exc
            if vis_field not in (0, 1):
                raise LandmarkParseError(
                    f"{path}:{lineno}: visible flag must be 0 or 1"
                )
            if not (np.isfinite(u) and np.isfinite(v)):
                raise LandmarkParseError(f"{path}:{lineno}: non-finite coordinates")
            if not 0 <= idx < expected_count:
                raise LandmarkParseError(
                    f"{path}:{lineno}: index {idx} outside 0..{expected_count - 1}"
                )
            if seen[idx]:
                raise LandmarkParseError(f"{path}:{lineno}: duplicate index {idx}")
            seen[idx] = True
            if vis_field:
                points[idx] = (u, -v if y_down else v)
                visibility[idx] = True
    if not np.all(seen):
        missing = int(np.flatnonzero(~seen)[0])
        raise LandmarkParseError(f"{path}: missing landmark index {missing}")
    return LandmarkSet2D(points, visibility)


def save_landmarks(landmarks: LandmarkSet2D, path, y_down=False):
    """Write the landmark CSV consumed by :func:`import_landmarks`."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "u", "v", "visible"])
    for i, ((u, v), vis) in enumerate(zip(landmarks.points, landmarks.visibility)):
        writer.writerow([i, repr(float(u)), repr(float(-v if y_down else v)), int(vis)])
    _atomic_write(path, buf.getvalue().encode())


# -- reports ------------------------------------------------------------------

def write_report_csv(rows, path):
    """Emit metric rows as the standard report CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["axis_value", "region", "metric", "value", "std"])
    for row in rows:
        writer.writerow([
            repr(float(row.axis_value)), row.region, row.metric,
            repr(float(row.value)), repr(float(row.std)),
        ])
    _atomic_write(path, buf.getvalue().encode())
