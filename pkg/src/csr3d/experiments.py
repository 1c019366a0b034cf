"""Experiment harnesses: ablations, convergence, noise-mode comparison, bench.

Every harness trains one cascade per grid point and reports metric rows
(axis value, region, metric, value, std) that serialize directly to the CSV
report format. Grid-point trainings are independent; with ``n_jobs > 1``
they run on a thread pool (the heavy lifting is BLAS, which releases the
GIL) and results are assembled by grid index, so parallel and serial runs
produce identical reports.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import CascadedShapeRegressor, train_cascade
from .exceptions import ValidationError
from .geometry import REGION_MOUTH, REGION_NAMES, LandmarkSpec
from .metrics import mae, region_mae, vertex_regions
from .synthdata import INNER_LANDMARKS, Dataset


@dataclass(frozen=True)
class MetricRow:
    axis_value: float
    region: str
    metric: str
    value: float
    std: float = 0.0


@dataclass
class AblationResult:
    """One experiment's output: a grid along one axis plus metric rows."""

    axis: str
    grid: np.ndarray
    rows: list[MetricRow] = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.size and np.any(np.diff(self.grid) <= 0):
            raise ValidationError("AblationResult: grid must be strictly increasing")

    def add(self, axis_value, region, metric, value, std=0.0):
        self.rows.append(MetricRow(float(axis_value), region, metric, float(value), float(std)))

    def curve(self, metric, region="all") -> np.ndarray:
        """Values of one metric along the grid; raises if any point is missing."""
        out = np.full(self.grid.size, np.nan)
        for row in self.rows:
            if row.metric == metric and row.region == region:
                where = np.flatnonzero(self.grid == row.axis_value)
                if where.size != 1:
                    raise ValidationError(
                        f"AblationResult: axis value {row.axis_value} not unique on grid"
                    )
                if not np.isnan(out[where[0]]):
                    raise ValidationError(
                        f"AblationResult: duplicate value for {metric}/{region}"
                    )
                out[where[0]] = row.value
        if np.any(np.isnan(out)):
            raise ValidationError(f"AblationResult: missing values for {metric}/{region}")
        return out


def _run_indexed(fn, count, n_jobs):
    if n_jobs <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, range(count)))


def _check_nested(subsets, minimum, what):
    prev = None
    for s in subsets:
        s = np.asarray(s)
        if s.size < minimum:
            raise ValidationError(f"{what}: every subset needs >= {minimum} entries")
        if np.unique(s).size != s.size:
            raise ValidationError(f"{what}: subset entries must be distinct")
        if prev is not None and not np.isin(prev, s).all():
            raise ValidationError(f"{what}: subsets must be nested")
        prev = s


def predict_dataset(model: CascadedShapeRegressor, dataset: Dataset) -> np.ndarray:
    """Reconstruct every sample of a dataset; returns (N, n, 3)."""
    flat = model.predict(
        dataset.landmarks.reshape(dataset.n_samples, -1), dataset.visibility
    )
    return flat.reshape(dataset.n_samples, -1, 3)


def evaluate_model(model, dataset, align=True, regions=None):
    """Per-sample MAE summary, optionally split by vertex region.

    Returns a dict: "all" -> (mean, std over samples), plus one entry per
    region name when a region partition is given.
    """
    recon = predict_dataset(model, dataset)
    overall = np.empty(dataset.n_samples)
    by_region = {name: np.empty(dataset.n_samples) for name in REGION_NAMES} if regions is not None else {}
    for i in range(dataset.n_samples):
        overall[i] = mae(dataset.shapes[i], recon[i], align=align)[0]
        if regions is not None:
            per = region_mae(dataset.shapes[i], recon[i], regions, align=align)
            for name in REGION_NAMES:
                by_region[name][i] = per[name]
    out = {"all": (float(overall.mean()), float(overall.std()))}
    for name, vals in by_region.items():
        out[name] = (float(np.nanmean(vals)), float(np.nanstd(vals)))
    return out


def default_landmark_subsets():
    """The documented nested default: 17 in 34 in 51 in 68 landmark positions.

    51 drops the jaw contour; 34 and 17 stride the remaining landmarks
    uniformly (every position not congruent 2 mod 3, then every third).
    """
    inner = INNER_LANDMARKS
    s17 = inner[::3]
    s34 = inner[np.arange(inner.size) % 3 != 2]
    s68 = np.arange(68)
    return [s17, s34, inner, s68]


def landmark_ablation(train, test, subsets=None, n_stages=5, ridge="auto",
                      random_state=0, align=True, n_jobs=1) -> AblationResult:
    """Reconstruction accuracy as fewer landmarks drive the cascade.

    Subsets are nested position lists into the landmark set; the output
    vertex set is unchanged, and the per-region partition of vertices comes
    from the full landmark specification, so curves are comparable.
    """
    if subsets is None:
        subsets = default_landmark_subsets()
    subsets = [np.sort(np.asarray(s, dtype=np.int64)) for s in subsets]
    _check_nested(subsets, 4, "landmark_ablation")
    sizes = [s.size for s in subsets]
    if sorted(set(sizes)) != sizes:
        raise ValidationError("landmark_ablation: subset sizes must strictly increase")
    if train.neutral_shape is None:
        raise ValidationError("landmark_ablation: dataset lacks a generator mean shape")
    regions = vertex_regions(train.neutral_shape, train.landmark_spec)

    def run(i):
        pos = subsets[i]
        sub_train = _restrict_landmarks(train, pos)
        sub_test = _restrict_landmarks(test, pos)
        model = train_cascade(sub_train, n_stages=n_stages, ridge=ridge,
                              random_state=random_state)
        scores = evaluate_model(model, sub_test, align=align, regions=regions)
        return model, scores

    results = _run_indexed(run, len(subsets), n_jobs)
    out = AblationResult("landmark-count", sizes)
    for size, (model, scores) in zip(sizes, results):
        out.add(size, "all", "mae", *scores["all"])
        for name in REGION_NAMES:
            out.add(size, name, "mae", *scores[name])
        for k, obj in enumerate(model.report_.objective_per_stage):
            out.add(size, "all", f"train_objective_stage_{k}", obj)
    return out


def _restrict_landmarks(dataset: Dataset, positions) -> Dataset:
    return replace(
        dataset,
        landmarks=np.ascontiguousarray(dataset.landmarks[:, positions]),
        visibility=np.ascontiguousarray(dataset.visibility[:, positions]),
        landmark_spec=dataset.landmark_spec.subset(positions),
    )


def _restrict_vertices(dataset: Dataset, vertex_ids, landmark_positions) -> Dataset:
    """Keep only `vertex_ids` rows of every shape; landmarks must survive."""
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    spec = dataset.landmark_spec.subset(landmark_positions)
    missing = ~np.isin(spec.indices, vertex_ids)
    if np.any(missing):
        raise ValidationError(
            "vertex subset must contain every retained landmark vertex"
        )
    remapped = np.searchsorted(vertex_ids, spec.indices)
    return replace(
        dataset,
        shapes=np.ascontiguousarray(dataset.shapes[:, vertex_ids]),
        landmarks=np.ascontiguousarray(dataset.landmarks[:, landmark_positions]),
        visibility=np.ascontiguousarray(dataset.visibility[:, landmark_positions]),
        landmark_spec=LandmarkSpec(remapped, spec.regions),
        neutral_shape=(
            None if dataset.neutral_shape is None
            else np.ascontiguousarray(dataset.neutral_shape[vertex_ids])
        ),
        topology=None,
    )


def facial_component_vertices(dataset: Dataset, landmark_positions=None) -> np.ndarray:
    """Vertices whose nearest landmark is a nose/eyes/mouth landmark."""
    if dataset.neutral_shape is None:
        raise ValidationError("dataset lacks a generator mean shape")
    regions = vertex_regions(dataset.neutral_shape, dataset.landmark_spec)
    component = np.flatnonzero(regions <= REGION_MOUTH)  # nose, eyes, mouth codes
    if landmark_positions is not None:
        component = np.union1d(
            component, dataset.landmark_spec.indices[landmark_positions]
        )
    return component


def default_coverage_subsets(dataset: Dataset, landmark_positions, n_grid=4):
    """Nested vertex subsets growing from the facial components to the full mesh."""
    inner = facial_component_vertices(dataset, landmark_positions)
    n = dataset.n_vertices
    rest = np.setdiff1d(np.arange(n), inner)
    center = dataset.neutral_shape[inner].mean(axis=0)
    order = rest[np.argsort(np.sum((dataset.neutral_shape[rest] - center) ** 2, axis=1))]
    subsets = [inner]
    for k in range(1, n_grid):
        take = int(round(order.size * k / (n_grid - 1)))
        subsets.append(np.sort(np.concatenate([inner, order[:take]])))
    return subsets


def vertex_coverage_ablation(train, test, vertex_subsets=None,
                             landmark_positions=None, n_stages=5, ridge="auto",
                             random_state=0, align=True, n_jobs=1) -> AblationResult:
    """Accuracy as the reconstructed mesh covers more area, landmarks fixed.

    Two curves per grid point: MAE over the subset's own vertices, and MAE
    over the innermost (facial-component) vertex set. Both are aligned
    within the evaluated vertex set, so the innermost curve isolates exactly
    the vertices shared by all grid points.
    """
    if landmark_positions is None:
        landmark_positions = INNER_LANDMARKS
    landmark_positions = np.asarray(landmark_positions, dtype=np.int64)
    if vertex_subsets is None:
        vertex_subsets = default_coverage_subsets(train, landmark_positions)
    vertex_subsets = [np.sort(np.asarray(s, dtype=np.int64)) for s in vertex_subsets]
    _check_nested(vertex_subsets, 4, "vertex_coverage_ablation")
    innermost = vertex_subsets[0]

    def run(i):
        ids = vertex_subsets[i]
        sub_train = _restrict_vertices(train, ids, landmark_positions)
        sub_test = _restrict_vertices(test, ids, landmark_positions)
        model = train_cascade(sub_train, n_stages=n_stages, ridge=ridge,
                              random_state=random_state)
        recon = predict_dataset(model, sub_test)
        inner_pos = np.searchsorted(ids, innermost)
        mae_sub = np.empty(sub_test.n_samples)
        mae_inner = np.empty(sub_test.n_samples)
        for s in range(sub_test.n_samples):
            mae_sub[s] = mae(sub_test.shapes[s], recon[s], align=align)[0]
            mae_inner[s] = mae(
                sub_test.shapes[s][inner_pos], recon[s][inner_pos], align=align
            )[0]
        return mae_sub, mae_inner

    results = _run_indexed(run, len(vertex_subsets), n_jobs)
    out = AblationResult("vertex-coverage", [s.size for s in vertex_subsets])
    for ids, (mae_sub, mae_inner) in zip(vertex_subsets, results):
        out.add(ids.size, "all", "mae_subset", float(mae_sub.mean()), float(mae_sub.std()))
        out.add(ids.size, "all", "mae_innermost", float(mae_inner.mean()), float(mae_inner.std()))
    return out


def vertex_density_ablation(train, test, factors=(8, 4, 2, 1),
                            landmark_positions=None, n_stages=5, ridge="auto",
                            random_state=0, align=True, n_jobs=1) -> AblationResult:
    """Accuracy as a fixed facial region is reconstructed at decreasing density.

    `factors` are uniform downsampling strides over the region's vertex list
    (landmark vertices are always retained). The common-vertex MAE is
    computed over the sparsest subset, which all denser grids contain.
    """
    if landmark_positions is None:
        landmark_positions = INNER_LANDMARKS
    landmark_positions = np.asarray(landmark_positions, dtype=np.int64)
    factors = sorted(set(int(f) for f in factors), reverse=True)
    if any(f < 1 for f in factors):
        raise ValidationError("vertex_density_ablation: factors must be >= 1")
    for coarse, fine in zip(factors, factors[1:]):
        if coarse % fine:
            raise ValidationError(
                "vertex_density_ablation: factors must divide each other for nesting"
            )
    region = facial_component_vertices(train, landmark_positions)
    lm_vertices = train.landmark_spec.indices[landmark_positions]
    subsets = [
        np.union1d(region[::f], lm_vertices) for f in factors
    ]
    _check_nested(subsets, 4, "vertex_density_ablation")
    common = subsets[0]

    def run(i):
        ids = subsets[i]
        sub_train = _restrict_vertices(train, ids, landmark_positions)
        sub_test = _restrict_vertices(test, ids, landmark_positions)
        model = train_cascade(sub_train, n_stages=n_stages, ridge=ridge,
                              random_state=random_state)
        recon = predict_dataset(model, sub_test)
        pos = np.searchsorted(ids, common)
        mae_sub = np.empty(sub_test.n_samples)
        mae_common = np.empty(sub_test.n_samples)
        for s in range(sub_test.n_samples):
            mae_sub[s] = mae(sub_test.shapes[s], recon[s], align=align)[0]
            mae_common[s] = mae(
                sub_test.shapes[s][pos], recon[s][pos], align=align
            )[0]
        return mae_sub, mae_common

    results = _run_indexed(run, len(subsets), n_jobs)
    out = AblationResult("vertex-density", [s.size for s in subsets])
    for factor, ids, (mae_sub, mae_common) in zip(factors, subsets, results):
        out.add(ids.size, "all", "mae_subset", float(mae_sub.mean()), float(mae_sub.std()))
        out.add(ids.size, "all", "mae_common", float(mae_common.mean()), float(mae_common.std()))
        out.add(ids.size, "all", "downsample_factor", float(factor))
    return out


def convergence_curve(train, n_stages=10, ridge="auto", random_state=0) -> AblationResult:
    """Training objective per stage, normalized by the stage-0 value."""
    model = train_cascade(train, n_stages=n_stages, ridge=ridge,
                          random_state=random_state)
    obj = model.report_.objective_per_stage
    out = AblationResult("stage-index", np.arange(obj.size))
    for k, value in enumerate(obj):
        out.add(k, "all", "objective_normalized", value / obj[0])
        out.add(k, "all", "objective", value)
    return out


_EVAL_NOISE_STREAM = 202


def disturb_dataset(dataset: Dataset, sigma, seed=0) -> Dataset:
    """Gaussian-perturb every visible landmark coordinate; masks unchanged."""
    sigma = float(sigma)
    if sigma < 0.0:
        raise ValidationError("disturb_dataset: sigma must be >= 0")
    rng = np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=(_EVAL_NOISE_STREAM,))
    )
    noise = rng.normal(0.0, sigma, size=dataset.landmarks.shape)
    pts = dataset.landmarks + noise
    pts[~dataset.visibility] = 0.0
    return replace(dataset, landmarks=pts)


def noise_mode_comparison(train, test, sigma_test, sigma_train,
                          noise_replicas=1, n_stages=5, ridge="auto",
                          random_state=0, eval_seed=0, align=True) -> AblationResult:
    """Clean-trained vs disturbance-trained cascade on noisy test landmarks.

    Grid point 0 is the clean-trained model, 1 the disturbance-trained one;
    both are scored on the same disturbed copy of the test landmarks.
    """
    if float(sigma_train) <= 0.0:
        raise ValidationError("noise_mode_comparison: sigma_train must be > 0")
    clean = train_cascade(train, n_stages=n_stages, ridge=ridge,
                          random_state=random_state)
    disturbed = train_cascade(train, n_stages=n_stages, ridge=ridge,
                              noise_std=sigma_train, noise_replicas=noise_replicas,
                              random_state=random_state)
    noisy_test = disturb_dataset(test, sigma_test, seed=eval_seed)
    out = AblationResult("noise-mode", [0.0, 1.0])
    for point, model in ((0.0, clean), (1.0, disturbed)):
        scores = evaluate_model(model, noisy_test, align=align)
        out.add(point, "all", "mae", *scores["all"])
        out.add(point, "all", "train_sigma", model.noise_std)
    return out


def benchmark_predict(n_vertices=53215, n_landmarks=68, n_stages=5, batch=16,
                      repeats=5, seed=0, single_thread=True):
    """Inference timing for a stated problem size, with random stage weights.

    Returns a dict with per-image milliseconds for batched prediction (the
    throughput figure: the weight matrices stream once per batch) and for a
    single-image call (the latency figure).
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    model = CascadedShapeRegressor(
        landmark_indices=np.arange(n_landmarks), n_stages=n_stages
    )
    model.n_vertices_ = n_vertices
    model.n_landmarks_ = n_landmarks
    model.landmark_indices_ = np.arange(n_landmarks)
    model.landmark_regions_ = np.full(n_landmarks, 3, dtype=np.uint8)
    model.mean_shape_ = rng.standard_normal((n_vertices, 3))
    model.camera_scale_ = 3.5
    model.stages_ = [
        rng.standard_normal((3 * n_vertices, 2 * n_landmarks + 1)) * 0.01
        for _ in range(n_stages)
    ]
    X1 = rng.standard_normal((1, 2 * n_landmarks))
    XB = rng.standard_normal((batch, 2 * n_landmarks))

    def time_call(x):
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.predict(x)
            best = min(best, time.perf_counter() - t0)
        return best

    if single_thread:
        with threadpool_limits(limits=1):
            model.predict(X1)  # warm up
            t_single = time_call(X1)
            t_batch = time_call(XB)
    else:
        model.predict(X1)
        t_single = time_call(X1)
        t_batch = time_call(XB)
    return {
        "n_vertices": n_vertices,
        "n_landmarks": n_landmarks,
        "n_stages": n_stages,
        "batch": batch,
        "ms_per_image_batched": 1e3 * t_batch / batch,
        "ms_single_image": 1e3 * t_single,
        "fps_batched": batch / t_batch,
    }
