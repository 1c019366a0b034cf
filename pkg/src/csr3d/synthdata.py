"""Self-contained statistical shape generator for training and experiments.

The generator produces a desk-scale stand-in for scanned-head datasets: a
tessellated half-ellipsoid "head" (convex, camera-facing at frontal pose)
carrying 68 landmark vertices near canonical facial positions, plus smooth
random orthonormal identity and expression deformation bases. Samples are
posed on a yaw/pitch grid and projected through a scaled-orthographic camera
with per-landmark self-occlusion ground truth.

Units are mm; the canonical inter-eye distance is about 63 mm, and the
default camera scale maps it to about 220 image units.

Reproducibility: every random draw derives from a per-purpose
`numpy.random.SeedSequence` spawn key, so regenerating any sample is
independent of iteration order and safe to parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import GenerationError, ValidationError
from .geometry import (
    REGION_EYES,
    REGION_MOUTH,
    REGION_NOSE,
    REGION_OTHER,
    LandmarkSet2D,
    LandmarkSpec,
    landmark_visibility,
    rotation_yaw_pitch,
)
from .validation import check_camera_scale

# spawn-key tags for the independent random streams
_BASIS_STREAM = 1
_IDENTITY_STREAM = 2
_EXPRESSION_STREAM = 3
_SPLIT_STREAM = 4

# desk-scale defaults (mm): ellipsoid semi-axes and cap half-angle
_SEMI_AXES = (85.0, 105.0, 75.0)
_CAP_ANGLE_DEG = 72.0

# canonical 68-landmark index groups (iBUG-like ordering)
JAW = np.arange(0, 17)
RIGHT_BROW = np.arange(17, 22)
LEFT_BROW = np.arange(22, 27)
NOSE = np.arange(27, 36)
RIGHT_EYE = np.arange(36, 42)
LEFT_EYE = np.arange(42, 48)
MOUTH = np.arange(48, 68)
INNER_LANDMARKS = np.arange(17, 68)  # the 51 non-contour landmarks

# per-direction deformation scale: RMS vertex displacement in mm for a unit
# (orthonormal) basis column is coeff / sqrt(n), so scales carry a sqrt(n)
_IDENTITY_RMS_MM = 3.0
_EXPRESSION_RMS_MM = 2.0


def canonical_landmarks():
    """The 68 canonical landmark positions (mm, frontal plane) and regions.

    Layout follows the common 68-point convention: 17 jaw-contour points,
    2 x 5 brows, 9 nose, 2 x 6 eyes, 20 mouth. Eye centers sit at
    (+-31.5, 20), giving the 63 mm canonical inter-eye distance.
    """
    pts = np.zeros((68, 2))
    theta = np.pi * np.arange(17) / 16.0
    pts[JAW, 0] = -72.0 * np.cos(theta)
    pts[JAW, 1] = 35.0 - 110.0 * np.sin(theta)
    brow = np.array([[10.0, 40.0], [20.0, 43.0], [31.0, 45.0], [42.0, 43.0], [52.0, 38.0]])
    pts[RIGHT_BROW] = brow[::-1] * np.array([-1.0, 1.0])
    pts[LEFT_BROW] = brow
    pts[NOSE] = [
        [0.0, 30.0], [0.0, 20.0], [0.0, 10.0], [0.0, 2.0],
        [-12.0, -8.0], [-6.0, -10.0], [0.0, -12.0], [6.0, -10.0], [12.0, -8.0],
    ]
    eye = np.array([
        [-11.5, 0.0], [-4.5, 4.0], [4.5, 4.0], [11.5, 0.0], [4.5, -4.0], [-4.5, -4.0]
    ])
    pts[RIGHT_EYE] = eye + np.array([-31.5, 20.0])
    pts[LEFT_EYE] = eye + np.array([31.5, 20.0])
    pts[MOUTH] = np.array([
        [-25.0, 0.0], [-17.0, 7.0], [-8.0, 10.0], [0.0, 11.0], [8.0, 10.0],
        [17.0, 7.0], [25.0, 0.0], [17.0, -7.0], [8.0, -10.0], [0.0, -11.0],
        [-8.0, -10.0], [-17.0, -7.0],
        [-15.0, 0.0], [-7.0, 4.0], [0.0, 4.5], [7.0, 4.0], [15.0, 0.0],
        [7.0, -4.0], [0.0, -4.5], [-7.0, -4.0],
    ]) + np.array([0.0, -38.0])
    regions = np.full(68, REGION_OTHER, dtype=np.uint8)
    regions[RIGHT_BROW] = REGION_EYES
    regions[LEFT_BROW] = REGION_EYES
    regions[NOSE] = REGION_NOSE
    regions[RIGHT_EYE] = REGION_EYES
    regions[LEFT_EYE] = REGION_EYES
    regions[MOUTH] = REGION_MOUTH
    return pts, regions


def _cap_grid(n_vertices):
    """Ring/azimuth counts for the dome tessellation, azimuths divisible by 4."""
    if n_vertices < 50:
        raise ValidationError("build_shape_model: need at least 50 vertices")
    best = None
    for az in range(4, n_vertices + 1, 4):
        rings = n_vertices // az
        if rings < 3:
            break
        # favor square-ish cells: azimuthal spacing ~ twice the ring count
        score = abs(az - 2 * rings) + (n_vertices - rings * az) * 1000
        if best is None or score < best[0]:
            best = (score, rings, az)
    if best is None:
        raise ValidationError("build_shape_model: vertex count too small to tessellate")
    return best[1], best[2]


def _mirrored_circle(az):
    """Unit-circle samples with exact x- and y-mirror float symmetry."""
    quarter = az // 4
    ang = 2.0 * np.pi * np.arange(quarter + 1) / az
    c, s = np.cos(ang), np.sin(ang)
    cos_t = np.empty(az)
    sin_t = np.empty(az)
    cos_t[: quarter + 1] = c
    sin_t[: quarter + 1] = s
    cos_t[quarter : 2 * quarter + 1] = -c[::-1]
    sin_t[quarter : 2 * quarter + 1] = s[::-1]
    cos_t[2 * quarter : 3 * quarter + 1] = -c
    sin_t[2 * quarter : 3 * quarter + 1] = -s
    cos_t[3 * quarter :] = c[::-1][:-1]
    sin_t[3 * quarter :] = -s[::-1][:-1]
    return cos_t, sin_t


def _tessellate_cap(n_vertices, semi_axes=_SEMI_AXES, cap_deg=_CAP_ANGLE_DEG):
    """Half-ellipsoid dome: vertices (rings x azimuths, 3) and CCW-outward triangles.

    The triangulation diagonals are chosen per azimuthal column so the mesh
    is mirror-symmetric about the x = 0 plane, which keeps midline vertex
    normals numerically free of spurious x components.
    """
    rings, az = _cap_grid(n_vertices)
    a, b, c = semi_axes
    phi = np.deg2rad(cap_deg) * (np.arange(1, rings + 1)) / rings
    cos_t, sin_t = _mirrored_circle(az)
    sin_phi, cos_phi = np.sin(phi), np.cos(phi)
    verts = np.empty((rings, az, 3))
    verts[:, :, 0] = a * np.outer(sin_phi, cos_t)
    verts[:, :, 1] = b * np.outer(sin_phi, sin_t)
    verts[:, :, 2] = c * cos_phi[:, None]
    verts = verts.reshape(-1, 3)

    tris = []
    centers = 2.0 * np.pi * (np.arange(az) + 0.5) / az
    left_half = np.cos(centers) < 0.0
    for i in range(rings - 1):
        for j in range(az):
            jn = (j + 1) % az
            p00 = i * az + j
            p01 = i * az + jn
            p10 = (i + 1) * az + j
            p11 = (i + 1) * az + jn
            if left_half[j]:
                tris.append((p01, p00, p10))
                tris.append((p01, p10, p11))
            else:
                tris.append((p00, p10, p11))
                tris.append((p00, p11, p01))
    return verts, np.asarray(tris, dtype=np.int64)


def _pick_landmark_vertices(verts, semi_axes=_SEMI_AXES):
    """Snap the canonical landmark positions to distinct mesh vertices."""
    targets2d, regions = canonical_landmarks()
    a, b, c = semi_axes
    inside = 1.0 - (targets2d[:, 0] / a) ** 2 - (targets2d[:, 1] / b) ** 2
    if np.any(inside <= 0.0):
        raise GenerationError("canonical landmarks fall outside the dome footprint")
    targets = np.column_stack([targets2d, c * np.sqrt(inside)])
    taken = set()
    indices = np.empty(68, dtype=np.int64)
    for k, t in enumerate(targets):
        order = np.argsort(np.sum((verts - t) ** 2, axis=1))
        for cand in order:
            if int(cand) not in taken:
                taken.add(int(cand))
                indices[k] = cand
                break
    return LandmarkSpec(indices, regions)


@dataclass(frozen=True)
class ShapeModel:
    """Generative shape model: neutral mean plus orthonormal linear bases."""

    neutral_mean: np.ndarray          # (n, 3), centered at the origin
    identity_basis: np.ndarray        # (3n, r_id), orthonormal columns
    expression_basis: np.ndarray      # (3n, r_ex), orthonormal columns
    topology: np.ndarray              # (m, 3) triangles, CCW outward
    landmark_spec: LandmarkSpec
    identity_scales: np.ndarray       # (r_id,) per-direction coefficient std
    expression_scales: np.ndarray     # (r_ex,)
    seed: int

    @property
    def n_vertices(self):
        return self.neutral_mean.shape[0]

    @property
    def n_landmarks(self):
        return len(self.landmark_spec)

    @property
    def rank(self):
        return self.identity_basis.shape[1] + self.expression_basis.shape[1]


@dataclass(frozen=True)
class SampleSpec:
    """One sample's generative parameters."""

    identity_coeffs: np.ndarray
    expression_coeffs: np.ndarray
    yaw: float
    pitch: float
    is_frontal_neutral: bool

    def __post_init__(self):
        ident = np.ascontiguousarray(self.identity_coeffs, dtype=np.float64)
        expr = np.ascontiguousarray(self.expression_coeffs, dtype=np.float64)
        object.__setattr__(self, "identity_coeffs", ident)
        object.__setattr__(self, "expression_coeffs", expr)
        neutral = self.yaw == 0.0 and self.pitch == 0.0 and not np.any(expr)
        if bool(self.is_frontal_neutral) != neutral:
            raise ValidationError(
                "SampleSpec: is_frontal_neutral must match zero pose and expression"
            )


def _smooth_random_fields(verts, count, rng):
    """Random low-frequency displacement fields: sums of directed Gaussian bumps."""
    n = verts.shape[0]
    radius = float(np.mean(_SEMI_AXES))
    fields = np.empty((3 * n, count))
    for k in range(count):
        centers = verts[rng.integers(0, n, size=6)]
        widths = rng.uniform(0.25, 0.6, size=6) * radius
        amps = rng.normal(0.0, 1.0, size=(6, 3))
        disp = np.zeros((n, 3))
        for cpt, w, amp in zip(centers, widths, amps):
            d2 = np.sum((verts - cpt) ** 2, axis=1)
            disp += np.exp(-d2 / (2.0 * w * w))[:, None] * amp
        fields[:, k] = disp.reshape(-1)
    return fields


def build_shape_model(n_vertices=1500, rank_identity=8, rank_expression=6, seed=0):
    """Construct the synthetic generator.

    The neutral mean is a centered half-ellipsoid dome whose 68 landmark
    vertices all face the camera at frontal pose; deformation bases are
    jointly orthonormalized smooth random fields, identity directions first.
    """
    if rank_identity < 0 or rank_expression < 0:
        raise ValidationError("basis ranks must be >= 0")
    verts, tris = _tessellate_cap(n_vertices)
    if rank_identity + rank_expression > 3 * verts.shape[0]:
        raise ValidationError("basis rank exceeds shape dimensionality")
    spec = _pick_landmark_vertices(verts)
    centered = verts - verts.mean(axis=0)

    rank = rank_identity + rank_expression
    if rank:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_BASIS_STREAM,)))
        fields = _smooth_random_fields(verts, rank, rng)
        q, r = np.linalg.qr(fields)
        diag = np.abs(np.diag(r))
        if diag.min() < 1e-10 * max(diag.max(), 1.0):
            raise GenerationError("random displacement fields are rank deficient")
        basis = q
    else:
        basis = np.empty((3 * verts.shape[0], 0))

    sqrt_n = np.sqrt(verts.shape[0])
    model = ShapeModel(
        neutral_mean=centered,
        identity_basis=basis[:, :rank_identity].copy(),
        expression_basis=basis[:, rank_identity:].copy(),
        topology=tris,
        landmark_spec=spec,
        identity_scales=np.full(rank_identity, _IDENTITY_RMS_MM * sqrt_n),
        expression_scales=np.full(rank_expression, _EXPRESSION_RMS_MM * sqrt_n),
        seed=int(seed),
    )
    # contract: every landmark faces the camera at frontal pose
    normals = _normals_at(centered, tris, spec.indices)
    if np.any(normals[:, 2] <= 0.0):
        raise GenerationError("a landmark vertex faces away at frontal pose")
    return model


def _normals_at(shape, triangles, vertex_ids):
    """Unit normals at selected vertices, from their incident triangles only.

    Restricting the accumulation to incident triangles preserves the exact
    float result of whole-mesh accumulation for the selected rows.
    """
    touch = np.isin(triangles, vertex_ids).any(axis=1)
    tri = triangles[touch]
    a, b, c = shape[tri[:, 0]], shape[tri[:, 1]], shape[tri[:, 2]]
    face = np.cross(b - a, c - a)
    acc = np.zeros_like(shape)
    for k in range(3):
        np.add.at(acc, tri[:, k], face)
    sel = acc[vertex_ids]
    norms = np.linalg.norm(sel, axis=1)
    if np.any(norms <= 0.0):
        raise GenerationError("landmark vertex has no defined normal")
    return sel / norms[:, None]


def sample_shape(model: ShapeModel, spec: SampleSpec) -> np.ndarray:
    """Instantiate one posed, expressive shape: deform, re-center, rotate."""
    if spec.identity_coeffs.shape != (model.identity_basis.shape[1],):
        raise ValidationError("identity coefficient length mismatch")
    if spec.expression_coeffs.shape != (model.expression_basis.shape[1],):
        raise ValidationError("expression coefficient length mismatch")
    flat = model.neutral_mean.reshape(-1).copy()
    if spec.identity_coeffs.size:
        flat = flat + model.identity_basis @ spec.identity_coeffs
    if spec.expression_coeffs.size:
        flat = flat + model.expression_basis @ spec.expression_coeffs
    shape = flat.reshape(-1, 3)
    shape = shape - shape.mean(axis=0)
    rot = rotation_yaw_pitch(spec.yaw, spec.pitch)
    return shape @ rot.T


@dataclass
class Dataset:
    """Struct-of-arrays sample container shared by training and experiments."""

    shapes: np.ndarray            # (N, n, 3) posed ground-truth shapes, mm
    landmarks: np.ndarray         # (N, l, 2) zero-filled projected landmarks
    visibility: np.ndarray        # (N, l) bool ground-truth masks
    subject_ids: np.ndarray       # (N,)
    yaws: np.ndarray              # (N,) degrees
    pitches: np.ndarray           # (N,)
    frontal_neutral: np.ndarray   # (N,) bool
    landmark_spec: LandmarkSpec
    camera_scale: float
    seed: int
    provenance: str = ""
    neutral_shape: np.ndarray | None = None   # (n, 3) generator mean, if known
    topology: np.ndarray | None = None        # (m, 3), if known

    @property
    def n_samples(self):
        return self.shapes.shape[0]

    @property
    def n_vertices(self):
        return self.shapes.shape[1]

    @property
    def n_landmarks(self):
        return self.landmarks.shape[1]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return replace(
            self,
            shapes=self.shapes[mask],
            landmarks=self.landmarks[mask],
            visibility=self.visibility[mask],
            subject_ids=self.subject_ids[mask],
            yaws=self.yaws[mask],
            pitches=self.pitches[mask],
            frontal_neutral=self.frontal_neutral[mask],
        )

    def landmark_set(self, i) -> LandmarkSet2D:
        return LandmarkSet2D(self.landmarks[i].copy(), self.visibility[i].copy())


# desk-scale default poses: wide enough that profile-side landmarks go
# invisible (so the masking path is exercised), narrow enough that the
# cascade's landmark-feedback loop reaches its fixpoint within ~7 stages
DESK_YAW_GRID = (-35.0, -17.5, 0.0, 17.5, 35.0)
DESK_PITCH_GRID = (-17.5, 0.0, 17.5)
PAPER_YAW_GRID = (0.0, -15.0, 15.0, -30.0, 30.0, -50.0, 50.0, -70.0, 70.0, -90.0, 90.0)
PAPER_PITCH_GRID = (0.0, -15.0, 15.0, -30.0, 30.0)


def generate_dataset(model: ShapeModel, subjects=40, expressions_per_subject=5,
                     yaw_grid=DESK_YAW_GRID, pitch_grid=DESK_PITCH_GRID,
                     camera_scale=None, seed=0) -> Dataset:
    """Sample subjects x expressions x poses into a Dataset.

    Expression slot 0 of each subject is neutral, so every subject owns
    frontal-neutral samples whenever the grids include (0, 0). Ground-truth
    visibility comes from the posed mesh's landmark normals; invisible
    landmarks are projected as exact zeros.
    """
    if subjects < 1 or expressions_per_subject < 1:
        raise ValidationError("need at least one subject and one expression")
    if len(yaw_grid) == 0 or len(pitch_grid) == 0:
        raise ValidationError("pose grids must be nonempty")
    if camera_scale is None:
        camera_scale = default_camera_scale(model)
    f0 = check_camera_scale(camera_scale)

    n, l = model.n_vertices, model.n_landmarks
    poses = [(float(y), float(p)) for y in yaw_grid for p in pitch_grid]
    total = subjects * expressions_per_subject * len(poses)
    shapes = np.empty((total, n, 3))
    landmarks = np.zeros((total, l, 2))
    vis = np.empty((total, l), dtype=bool)
    subject_ids = np.empty(total, dtype=np.int64)
    yaws = np.empty(total)
    pitches = np.empty(total)
    frontal = np.zeros(total, dtype=bool)

    lm_idx = model.landmark_spec.indices
    touch = np.isin(model.topology, lm_idx).any(axis=1)
    tri_lm = model.topology[touch]

    row = 0
    for subj in range(subjects):
        rng_id = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(_IDENTITY_STREAM, subj))
        )
        c_id = rng_id.normal(0.0, 1.0, size=model.identity_scales.size) * model.identity_scales
        for expr in range(expressions_per_subject):
            if expr == 0:
                c_ex = np.zeros(model.expression_scales.size)
            else:
                rng_ex = np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(_EXPRESSION_STREAM, subj, expr))
                )
                c_ex = rng_ex.normal(0.0, 1.0, size=model.expression_scales.size)
                c_ex = c_ex * model.expression_scales
            flat = model.neutral_mean.reshape(-1).copy()
            if c_id.size:
                flat = flat + model.identity_basis @ c_id
            if c_ex.size:
                flat = flat + model.expression_basis @ c_ex
            base = flat.reshape(-1, 3)
            base = base - base.mean(axis=0)
            neutral_expr = expr == 0
            for yaw, pitch in poses:
                shape = base @ rotation_yaw_pitch(yaw, pitch).T
                normals = _normals_at(shape, tri_lm, lm_idx)
                mask = landmark_visibility(normals, f0)
                pts = f0 * shape[lm_idx, :2]
                pts[~mask] = 0.0
                shapes[row] = shape
                landmarks[row] = pts
                vis[row] = mask
                subject_ids[row] = subj
                yaws[row] = yaw
                pitches[row] = pitch
                frontal[row] = neutral_expr and yaw == 0.0 and pitch == 0.0
                row += 1

    return Dataset(
        shapes=shapes,
        landmarks=landmarks,
        visibility=vis,
        subject_ids=subject_ids,
        yaws=yaws,
        pitches=pitches,
        frontal_neutral=frontal,
        landmark_spec=model.landmark_spec,
        camera_scale=f0,
        seed=int(seed),
        provenance=(
            f"synthetic dome n={n} rank_id={model.identity_basis.shape[1]} "
            f"rank_ex={model.expression_basis.shape[1]} model_seed={model.seed}"
        ),
        neutral_shape=model.neutral_mean.copy(),
        topology=model.topology.copy(),
    )


def split_dataset(dataset: Dataset, train_fraction=0.5, seed=0):
    """Split by subject id: no subject appears on both sides."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must be in (0, 1)")
    subjects = np.unique(dataset.subject_ids)
    if subjects.size < 2:
        raise ValidationError("need at least 2 subjects to split")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_STREAM,)))
    perm = rng.permutation(subjects)
    n_train = int(round(train_fraction * subjects.size))
    n_train = min(max(n_train, 1), subjects.size - 1)
    train_subjects = set(perm[:n_train].tolist())
    mask = np.array([s in train_subjects for s in dataset.subject_ids])
    return dataset.subset(mask), dataset.subset(~mask)


def inter_eye_distance_mm(model: ShapeModel) -> float:
    """Distance between the two eye-center landmark groups on the neutral mean."""
    lm = model.neutral_mean[model.landmark_spec.indices]
    right = lm[RIGHT_EYE].mean(axis=0)
    left = lm[LEFT_EYE].mean(axis=0)
    return float(np.linalg.norm(left[:2] - right[:2]))


def default_camera_scale(model: ShapeModel, target_image_units=220.0) -> float:
    """Camera scale mapping the inter-eye distance to ~220 image units."""
    return target_image_units / inter_eye_distance_mm(model)


def inter_eye_image_units(dataset: Dataset) -> float:
    """Projected inter-eye distance of a dataset, in its image units."""
    if dataset.neutral_shape is None:
        raise ValidationError("dataset carries no generator mean shape")
    lm = dataset.neutral_shape[dataset.landmark_spec.indices]
    right = lm[RIGHT_EYE].mean(axis=0)
    left = lm[LEFT_EYE].mean(axis=0)
    return dataset.camera_scale * float(np.linalg.norm(left[:2] - right[:2]))
