"""Cascaded linear regression from sparse 2D landmarks to dense 3D shape.

Training alternates, for each stage k: render the landmarks of every current
shape estimate through the fixed global camera (masked to each sample's
visibility, invisible slots zeroed), form the landmark deviation and shape
adjustment, solve one regularized least-squares regressor, and advance every
estimate. Inference replays the learned stages from the mean shape.

Flattened layouts: a shape is the 3n-vector (x1, y1, z1, ..., xn, yn, zn),
a landmark set the 2l-vector (u1, v1, ..., ul, vl). Regressor stages are
(3n, 2l + 1) matrices whose last column is the absorbed bias term.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import (
    InitializationError,
    RankDeficiencyError,
    ValidationError,
)
from .geometry import (
    LandmarkSet2D,
    estimate_camera,
    landmark_visibility,
    vertex_normals,
)
from .validation import check_finite_array, check_landmark_indices

# beyond this condition estimate the normal equations are abandoned for an
# SVD pseudo-inverse solve of the primal problem
CONDITION_FALLBACK = 1e12

# "auto" ridge: lambda = RIDGE_AUTO_FACTOR * trace(Gram) / n_features
RIDGE_AUTO_FACTOR = 1e-8

_DISTURB_STREAM = 101  # spawn key tag for the landmark-disturbance stream


@dataclass
class TrainReport:
    """Per-stage training diagnostics.

    ``objective_per_stage`` holds K+1 values of sum_i |S*_i - S^k_i|^2
    (index 0 = before any stage); ``residual_per_stage`` the attained
    stage least-squares residuals; ``wall_time_per_stage`` seconds.
    """

    objective_per_stage: np.ndarray
    residual_per_stage: np.ndarray
    sample_count: int
    wall_time_per_stage: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _dim_name(j, n_landmarks):
    if j >= 2 * n_landmarks:
        return "bias"
    return f"landmark {j // 2} {'u' if j % 2 == 0 else 'v'}"


def solve_stage(delta_shapes, delta_landmarks, ridge=0.0):
    """Solve one cascade stage: W minimizing sum_i |dS_i - W dU_i|^2 + ridge*|W|_F^2.

    `delta_shapes` is (N, 3n), `delta_landmarks` (N, 2l+1) with an all-ones
    last column (bias). Returns W of shape (3n, 2l+1). With ridge = 0 this is
    the plain normal-equations solution W = dS dU^T (dU dU^T)^-1 in the
    samples-as-columns convention.

    Raises RankDeficiencyError when ridge = 0 and some landmark dimension
    never deviates (an all-zero column), which makes the Gram matrix
    structurally singular; otherwise an ill-conditioned Gram matrix falls
    back to a pseudo-inverse solve of the primal problem, so consistent
    rank-deficient systems (e.g. exactly low-rank training data) still
    yield a least-squares solution.
    """
    ds = check_finite_array(delta_shapes, "delta_shapes", ndim=2)
    du = check_finite_array(delta_landmarks, "delta_landmarks", ndim=2)
    if ds.shape[0] != du.shape[0]:
        raise ValidationError("solve_stage: sample counts differ")
    n_samples, n_feat = du.shape
    n_landmark_dims = n_feat - 1
    ridge = float(ridge)
    if ridge < 0.0:
        raise ValidationError("solve_stage: ridge must be >= 0")
    if not np.all(du[:, -1] == 1.0):
        raise ValidationError("solve_stage: last delta_landmarks column must be ones")
    if ridge == 0.0 and n_samples <= n_landmark_dims:
        raise ValidationError(
            f"solve_stage: need more than {n_landmark_dims} samples for an "
            f"unregularized solve, got {n_samples}"
        )
    op = stage_solve_operator(du, ridge)
    return np.ascontiguousarray((op @ ds).T)


def stage_ridge(delta_landmarks, ridge="auto"):
    """Resolve the ridge parameter for one stage's Gram matrix."""
    if ridge == "auto":
        du = np.asarray(delta_landmarks)
        return RIDGE_AUTO_FACTOR * float(np.sum(du * du)) / du.shape[1]
    value = float(ridge)
    if value < 0.0:
        raise ValidationError("ridge must be >= 0 or 'auto'")
    return value


def stage_solve_operator(delta_landmarks, ridge):
    """The (2l+1, N) operator T with W = (T @ delta_shapes)^T for one stage.

    Materializing T makes the stage solution exactly row-separable: row j of
    W comes out of a fixed-shape product T @ delta_shapes[:, j], so training
    on any vertex subset reproduces the shared rows bit-for-bit. Solver
    policy matches :func:`solve_stage`: Cholesky-backed normal equations
    with a pseudo-inverse fallback above the condition threshold.
    """
    du = delta_landmarks
    n_feat = du.shape[1]
    if ridge == 0.0:
        dead = ~np.any(du != 0.0, axis=0)
        if np.any(dead):
            names = ", ".join(
                _dim_name(j, (n_feat - 1) // 2) for j in np.flatnonzero(dead)
            )
            raise RankDeficiencyError(
                f"stage solve: zero-deviation dimensions with ridge = 0: {names}"
            )
    gram = du.T @ du
    if ridge > 0.0:
        gram = gram + ridge * np.eye(n_feat)
    if np.linalg.cond(gram) <= CONDITION_FALLBACK:
        cho = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(cho, du.T, check_finite=False)
    # pseudo-inverse fallback (SVD); with ridge, on the augmented system
    if ridge > 0.0:
        aug = np.vstack([du, np.sqrt(ridge) * np.eye(n_feat)])
        return np.linalg.pinv(aug)[:, : du.shape[0]]
    return np.linalg.pinv(du)


def init_state(shapes, landmarks, visibility, frontal_neutral, landmark_indices):
    """Initial cascade state from the frontal-neutral slice of a training set.

    Returns (mean_shape (n, 3), mean 2D landmarks, camera scale). The mean
    2D landmark is averaged over the frontal-neutral samples where that
    landmark is visible; a landmark visible in none of them stays (0, 0)
    invisible and does not enter the camera fit.
    """
    shapes = check_finite_array(shapes, "shapes", ndim=3, shape=(None, None, 3))
    landmarks = check_finite_array(landmarks, "landmarks", ndim=3, shape=(None, None, 2))
    visibility = np.ascontiguousarray(visibility, dtype=bool)
    if shapes.shape[0] != landmarks.shape[0] or visibility.shape != landmarks.shape[:2]:
        raise ValidationError("init_state: sample counts or landmark counts differ")
    frontal = np.ascontiguousarray(frontal_neutral, dtype=bool)
    if not np.any(frontal):
        raise InitializationError("training set has no frontal-neutral samples")
    mean_shape = shapes[frontal].mean(axis=0)
    vis_f = visibility[frontal]
    pts_f = landmarks[frontal]
    counts = vis_f.sum(axis=0)
    seen = counts > 0
    mean_pts = np.zeros((landmarks.shape[1], 2))
    sums = np.where(vis_f[:, :, None], pts_f, 0.0).sum(axis=0)
    mean_pts[seen] = sums[seen] / counts[seen, None]
    mean_landmarks = LandmarkSet2D(mean_pts, seen)
    indices = check_landmark_indices(landmark_indices, mean_shape.shape[0])
    scale = estimate_camera(mean_landmarks, mean_shape[indices])
    return mean_shape, mean_landmarks, scale


def disturb_landmarks(landmarks: LandmarkSet2D, sigma, rng) -> LandmarkSet2D:
    """Add independent N(0, sigma^2) noise to every visible coordinate.

    Invisible entries stay exactly (0, 0). The full noise block is drawn
    before masking, so the stream consumed is independent of the mask.
    """
    sigma = float(sigma)
    if sigma < 0.0:
        raise ValidationError("disturb_landmarks: sigma must be >= 0")
    noise = rng.normal(0.0, sigma, size=landmarks.points.shape)
    pts = landmarks.points + noise
    pts[~landmarks.visibility] = 0.0
    return LandmarkSet2D(pts, landmarks.visibility.copy())


def estimate_input_visibility(detected: LandmarkSet2D, mean_shape, landmark_indices,
                              topology) -> np.ndarray:
    """Visibility mask for externally detected landmarks.

    Fits a coarse camera to the detected landmarks against the model's mean
    landmark vertices, then classifies each mean-shape landmark normal
    against the viewing direction. Apply the result with
    :func:`csr3d.geometry.mask_to_reference` before prediction.
    """
    indices = check_landmark_indices(landmark_indices, np.asarray(mean_shape).shape[0])
    scale = estimate_camera(detected, np.asarray(mean_shape)[indices])
    normals = vertex_normals(mean_shape, topology)[indices]
    return landmark_visibility(normals, scale)


def _flat_projection(current, indices, scale, visibility):
    """Project flattened shape estimates (N, 3n) to masked (N, 2l) landmarks."""
    n_samples = current.shape[0]
    pts = current.reshape(n_samples, -1, 3)[:, indices, :2] * scale
    pts[~visibility] = 0.0
    return pts.reshape(n_samples, -1)


class CascadedShapeRegressor(RegressorMixin, BaseEstimator):
    """Learns a cascade of linear regressors mapping 2D landmarks to 3D shapes.

    Parameters
    ----------
    landmark_indices : array-like of int
        Vertex indices of the l landmarks within each 3D shape.
    n_stages : int, default=5
        Number of cascade stages K.
    ridge : float or "auto", default="auto"
        Per-stage Tikhonov term. "auto" scales 1e-8 by trace(Gram)/(2l+1),
        which keeps the normal equations well posed when zero-filled
        (invisible) landmark dimensions would otherwise make them singular;
        0 reproduces the plain least-squares stage solution exactly.
    noise_std : float, default=0.0
        Landmark-disturbance standard deviation in image units. When > 0,
        every sample's visible landmarks are replaced by disturbed copies
        before stage 1 (robust-training mode).
    noise_replicas : int, default=1
        Disturbed copies generated per training sample when noise_std > 0.
    landmark_regions : array-like of uint8 or None, default=None
        Optional facial-region code per landmark, retained for reporting
        and serialization; None stores the "other" code everywhere.
    random_state : int, default=0
        Seed for the disturbance stream.

    Attributes
    ----------
    stages_ : list of (3n, 2l+1) ndarray
        Learned stage regressors, bias absorbed in the last column.
    mean_shape_ : (n, 3) ndarray
        Initial shape estimate (frontal-neutral mean of the training set).
    mean_landmarks_ : LandmarkSet2D
        Mean 2D landmarks of the frontal-neutral training slice.
    camera_scale_ : float
        Global scaled-orthographic camera used at every stage.
    report_ : TrainReport
        Objective trajectory and timing of the fit.
    train_fingerprint_ : str
        Hash of the seed and configuration, for reproducibility audits.
    """

    def __init__(self, landmark_indices=None, n_stages=5, ridge="auto",
                 noise_std=0.0, noise_replicas=1, landmark_regions=None,
                 random_state=0):
        self.landmark_indices = landmark_indices
        self.n_stages = n_stages
        self.ridge = ridge
        self.noise_std = noise_std
        self.noise_replicas = noise_replicas
        self.landmark_regions = landmark_regions
        self.random_state = random_state

    # -- validation helpers -------------------------------------------------

    def _check_config(self):
        if self.landmark_indices is None:
            raise ValidationError("landmark_indices must be provided")
        if int(self.n_stages) < 1:
            raise ValidationError("n_stages must be >= 1")
        if self.ridge != "auto":
            try:
                ridge = float(self.ridge)
            except (TypeError, ValueError):
                raise ValidationError("ridge must be a number or 'auto'") from None
            if ridge < 0.0:
                raise ValidationError("ridge must be >= 0 or 'auto'")
        if float(self.noise_std) < 0.0:
            raise ValidationError("noise_std must be >= 0")
        if int(self.noise_replicas) < 1:
            raise ValidationError("noise_replicas must be >= 1")

    def _check_landmark_input(self, X, visibility):
        X = check_finite_array(X, "X", ndim=2)
        l = self.n_landmarks_
        if X.shape[1] != 2 * l:
            raise ValidationError(
                f"X: expected {2 * l} landmark coordinates, got {X.shape[1]}"
            )
        if visibility is None:
            visibility = np.ones((X.shape[0], l), dtype=bool)
        else:
            visibility = np.ascontiguousarray(visibility, dtype=bool)
            if visibility.shape != (X.shape[0], l):
                raise ValidationError(
                    f"visibility: expected shape {(X.shape[0], l)}, got {visibility.shape}"
                )
        # re-zero invisible slots so stale values there cannot leak through
        X = X.copy()
        X.reshape(X.shape[0], l, 2)[~visibility] = 0.0
        return X, visibility

    def _fingerprint(self):
        payload = {k: repr(v) for k, v in sorted(self.get_params().items())}
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode())
        return digest.hexdigest()[:16]

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y, visibility=None, frontal_neutral=None):
        """Learn the cascade.

        Parameters
        ----------
        X : (N, 2l) array
            Ground-truth 2D landmarks, flattened (u1, v1, ...), invisible
            entries zero-filled.
        y : (N, 3n) array
            Ground-truth 3D shapes, flattened (x1, y1, z1, ...), posed and
            expressive (not normalized).
        visibility : (N, l) bool array, optional
            Ground-truth per-sample landmark visibility; all-visible when
            omitted. Fixed across all stages.
        frontal_neutral : (N,) bool array, optional
            Which samples initialize the mean shape and camera. When omitted
            every sample is used.
        """
        self._check_config()
        y = check_finite_array(y, "y", ndim=2)
        if y.shape[1] % 3:
            raise ValidationError("y: column count must be a multiple of 3")
        n_vertices = y.shape[1] // 3
        indices = check_landmark_indices(self.landmark_indices, n_vertices)
        self.n_vertices_ = n_vertices
        self.n_landmarks_ = indices.size
        self.landmark_indices_ = indices
        if self.landmark_regions is None:
            regions = np.full(indices.size, 3, dtype=np.uint8)
        else:
            regions = np.ascontiguousarray(self.landmark_regions, dtype=np.uint8)
            if regions.shape != indices.shape:
                raise ValidationError("landmark_regions: one code per landmark")
        self.landmark_regions_ = regions

        X, visibility = self._check_landmark_input(X, visibility)
        if X.shape[0] != y.shape[0]:
            raise ValidationError("X and y disagree on sample count")
        if frontal_neutral is None:
            frontal_neutral = np.ones(X.shape[0], dtype=bool)

        mean_shape, mean_landmarks, scale = init_state(
            y.reshape(-1, n_vertices, 3),
            X.reshape(-1, indices.size, 2),
            visibility,
            frontal_neutral,
            indices,
        )
        self.mean_shape_ = mean_shape
        self.mean_landmarks_ = mean_landmarks
        self.camera_scale_ = scale

        # robust-training mode: replace targets with disturbed replicas
        sigma = float(self.noise_std)
        replicas = int(self.noise_replicas)
        if sigma > 0.0:
            X = np.repeat(X, replicas, axis=0)
            y = np.repeat(y, replicas, axis=0)
            visibility = np.repeat(visibility, replicas, axis=0)
            rng = np.random.default_rng(
                np.random.SeedSequence(int(self.random_state), spawn_key=(_DISTURB_STREAM,))
            )
            noise = rng.normal(0.0, sigma, size=X.shape)
            X = X + noise
            X.reshape(X.shape[0], indices.size, 2)[~visibility] = 0.0

        n_samples = X.shape[0]
        if self.ridge != "auto" and float(self.ridge) == 0.0 and n_samples <= 2 * indices.size:
            raise ValidationError(
                f"need more than {2 * indices.size} samples to train without ridge, "
                f"got {n_samples}"
            )

        n_stages = int(self.n_stages)
        current = np.tile(mean_shape.reshape(-1), (n_samples, 1))
        ones = np.ones((n_samples, 1))
        objective = np.empty(n_stages + 1)
        residual = np.empty(n_stages)
        wall = np.empty(n_stages)
        diff = y - current
        objective[0] = float(np.sum(diff * diff))
        stages = []
        n_feat = 2 * indices.size + 1
        for k in range(n_stages):
            t0 = time.perf_counter()
            rendered = _flat_projection(current, indices, scale, visibility)
            delta_u = np.hstack([X - rendered, ones])
            lam = stage_ridge(delta_u, self.ridge)
            op = stage_solve_operator(delta_u, lam)
            # per-vertex application keeps every regressor row a fixed-shape
            # product of that vertex's own adjustments, so training on any
            # vertex subset reproduces shared rows bit-for-bit
            w = np.empty((3 * n_vertices, n_feat))
            for v in range(n_vertices):
                cols = slice(3 * v, 3 * v + 3)
                x_v = op @ (y[:, cols] - current[:, cols])
                w[cols] = x_v.T
                current[:, cols] += delta_u @ x_v
            stages.append(w)
            diff = y - current
            objective[k + 1] = float(np.sum(diff * diff))
            residual[k] = objective[k + 1]
            wall[k] = time.perf_counter() - t0
        self.stages_ = stages
        self.report_ = TrainReport(objective, residual, n_samples, wall)
        self.train_fingerprint_ = self._fingerprint()
        return self

    def predict(self, X, visibility=None):
        """Reconstruct flattened 3D shapes, (N, 3n), from landmark rows (N, 2l).

        At every stage the current estimate's rendered landmarks are masked
        to the input's visibility, so invisible input slots are inert.
        """
        if not hasattr(self, "stages_"):
            raise ValidationError("predict called before fit")
        X, visibility = self._check_landmark_input(X, visibility)
        current = np.tile(self.mean_shape_.reshape(-1), (X.shape[0], 1))
        ones = np.ones((X.shape[0], 1))
        for w in self.stages_:
            rendered = _flat_projection(
                current, self.landmark_indices_, self.camera_scale_, visibility
            )
            delta_u = np.hstack([X - rendered, ones])
            current = current + delta_u @ w.T
        return current

    def predict_shape(self, landmarks: LandmarkSet2D) -> np.ndarray:
        """Reconstruct a single (n, 3) shape from one landmark set."""
        flat = self.predict(
            landmarks.flat()[None, :], landmarks.visibility[None, :]
        )
        return flat.reshape(self.n_vertices_, 3)

    def estimate_visibility(self, detected: LandmarkSet2D, topology) -> np.ndarray:
        """Visibility mask for detected landmarks, from mean-shape normals."""
        return estimate_input_visibility(
            detected, self.mean_shape_, self.landmark_indices_, topology
        )


def train_cascade(dataset, n_stages=5, ridge="auto", noise_std=0.0,
                  noise_replicas=1, random_state=0):
    """Fit a CascadedShapeRegressor on a synthetic dataset container."""
    model = CascadedShapeRegressor(
        landmark_indices=dataset.landmark_spec.indices,
        n_stages=n_stages,
        ridge=ridge,
        noise_std=noise_std,
        noise_replicas=noise_replicas,
        landmark_regions=dataset.landmark_spec.regions,
        random_state=random_state,
    )
    n = dataset.shapes.shape[0]
    model.fit(
        dataset.landmarks.reshape(n, -1),
        dataset.shapes.reshape(n, -1),
        visibility=dataset.visibility,
        frontal_neutral=dataset.frontal_neutral,
    )
    return model
