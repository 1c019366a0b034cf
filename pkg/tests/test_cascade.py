import numpy as np
import pytest
from sklearn.base import clone

from csr3d import (
    CascadedShapeRegressor,
    InitializationError,
    LandmarkSet2D,
    RankDeficiencyError,
    ValidationError,
    build_shape_model,
    disturb_landmarks,
    estimate_input_visibility,
    generate_dataset,
    init_state,
    solve_stage,
    split_dataset,
    train_cascade,
)
from csr3d.metrics import mae


class TestSolveStage:
    def test_square_full_rank_gives_identity(self):
        rng = np.random.default_rng(0)
        du = np.hstack([rng.normal(size=(5, 4)), np.ones((5, 1))])
        w = solve_stage(du.copy(), du, ridge=0.0)
        np.testing.assert_allclose(w, np.eye(5), atol=1e-10)

    def test_toy_system_matches_pseudo_inverse_oracle(self):
        # n=1, l=1, N=3: features (2l+1)=3, shape dims 3n=3
        rng = np.random.default_rng(1)
        du = np.hstack([rng.normal(size=(3, 2)), np.ones((3, 1))])
        ds = rng.normal(size=(3, 3))
        w = solve_stage(ds, du, ridge=0.0)
        # independent oracle in the samples-as-columns convention
        oracle = ds.T @ du @ np.linalg.inv(du.T @ du)
        np.testing.assert_allclose(w, oracle, atol=1e-10)

    def test_huge_ridge_shrinks_to_zero(self):
        rng = np.random.default_rng(2)
        du = np.hstack([rng.normal(size=(10, 4)), np.ones((10, 1))])
        ds = rng.normal(size=(10, 6))
        w = solve_stage(ds, du, ridge=1e18)
        assert np.abs(w).max() < 1e-12

    def test_ridge_solution_matches_augmented_oracle(self):
        rng = np.random.default_rng(3)
        du = np.hstack([rng.normal(size=(12, 4)), np.ones((12, 1))])
        ds = rng.normal(size=(12, 7))
        lam = 0.37
        w = solve_stage(ds, du, ridge=lam)
        oracle = np.linalg.solve(du.T @ du + lam * np.eye(5), du.T @ ds).T
        np.testing.assert_allclose(w, oracle, atol=1e-10)

    def test_dead_dimension_named_in_error(self):
        rng = np.random.default_rng(4)
        du = np.hstack([rng.normal(size=(8, 4)), np.ones((8, 1))])
        du[:, 2] = 0.0  # landmark 1, u coordinate
        with pytest.raises(RankDeficiencyError, match="landmark 1 u"):
            solve_stage(rng.normal(size=(8, 3)), du, ridge=0.0)

    def test_dead_dimension_tolerated_with_ridge(self):
        rng = np.random.default_rng(4)
        du = np.hstack([rng.normal(size=(8, 4)), np.ones((8, 1))])
        du[:, 2] = 0.0
        w = solve_stage(rng.normal(size=(8, 3)), du, ridge=1e-6)
        assert np.all(np.isfinite(w))

    def test_too_few_samples_without_ridge(self):
        rng = np.random.default_rng(5)
        du = np.hstack([rng.normal(size=(4, 4)), np.ones((4, 1))])
        with pytest.raises(ValidationError):
            solve_stage(rng.normal(size=(4, 3)), du, ridge=0.0)

    def test_missing_bias_column_rejected(self):
        rng = np.random.default_rng(6)
        du = rng.normal(size=(8, 5))
        with pytest.raises(ValidationError):
            solve_stage(rng.normal(size=(8, 3)), du, ridge=0.0)

    def test_rank_deficient_data_falls_back_to_least_squares(self):
        # consistent low-rank system: the Gram matrix is singular but the
        # primal problem has an exact solution the fallback must find
        rng = np.random.default_rng(7)
        latent = rng.normal(size=(40, 2))
        du = np.hstack([latent @ rng.normal(size=(2, 6)), np.ones((40, 1))])
        true_w = rng.normal(size=(5, 7))
        ds = du @ true_w.T
        w = solve_stage(ds, du, ridge=0.0)
        np.testing.assert_allclose(du @ w.T, ds, atol=1e-8)


class TestInitState:
    def test_single_frontal_sample_is_the_mean(self):
        rng = np.random.default_rng(0)
        shapes = rng.normal(size=(3, 10, 3)) + np.array([0.0, 0.0, 5.0])
        pts = 2.0 * shapes[:, :4, :2]
        vis = np.ones((3, 4), dtype=bool)
        frontal = np.array([False, True, False])
        mean_shape, mean_lm, scale = init_state(shapes, pts, vis, frontal, np.arange(4))
        np.testing.assert_array_equal(mean_shape, shapes[1])
        np.testing.assert_array_equal(mean_lm.points, pts[1])

    def test_mirrored_pair_averages_to_midline(self):
        base = np.random.default_rng(1).normal(size=(6, 3)) + np.array([0, 0, 9.0])
        mirrored = base * np.array([-1.0, 1.0, 1.0])
        shapes = np.stack([base, mirrored])
        pts = shapes[:, :4, :2]
        vis = np.ones((2, 4), dtype=bool)
        mean_shape, _, _ = init_state(shapes, pts, vis, np.array([True, True]), np.arange(4))
        np.testing.assert_allclose(mean_shape[:, 0], 0.0, atol=1e-12)

    def test_no_frontal_samples_raises(self):
        shapes = np.zeros((2, 5, 3))
        with pytest.raises(InitializationError):
            init_state(shapes, np.zeros((2, 4, 2)), np.ones((2, 4), dtype=bool),
                       np.array([False, False]), np.arange(4))

    def test_known_camera_scale_recovered(self, small_model, small_dataset):
        ds = small_dataset
        _, _, scale = init_state(
            ds.shapes, ds.landmarks, ds.visibility, ds.frontal_neutral,
            ds.landmark_spec.indices,
        )
        assert scale == pytest.approx(ds.camera_scale, rel=1e-10)


def exact_linear_dataset(seed=0):
    """Single-pose dataset from an exact low-rank linear model."""
    model = build_shape_model(n_vertices=400, rank_identity=8, rank_expression=4, seed=seed)
    return generate_dataset(
        model, subjects=150, expressions_per_subject=2,
        yaw_grid=(0.0,), pitch_grid=(0.0,), seed=seed,
    )


class TestTrainCascade:
    def test_exact_recovery_single_stage(self):
        ds = exact_linear_dataset()
        train, test = split_dataset(ds, 0.5, seed=1)
        model = train_cascade(train, n_stages=1, ridge=0.0)
        # training residual is numerically zero
        assert model.report_.objective_per_stage[-1] < 1e-12

        recon = model.predict(
            test.landmarks.reshape(test.n_samples, -1), test.visibility
        ).reshape(test.n_samples, -1, 3)
        errs = [mae(test.shapes[i], recon[i], align=False)[0] for i in range(test.n_samples)]
        assert max(errs) < 1e-6

        # independent full-dataset least-squares oracle (SVD-based lstsq)
        n_tr = train.n_samples
        x = train.landmarks.reshape(n_tr, -1)
        y = train.shapes.reshape(n_tr, -1)
        mean_shape = model.mean_shape_.reshape(-1)
        proj0 = model.camera_scale_ * np.tile(model.mean_shape_[train.landmark_spec.indices, :2], (n_tr, 1, 1))
        proj0[~train.visibility] = 0.0
        du = np.hstack([x - proj0.reshape(n_tr, -1), np.ones((n_tr, 1))])
        dy = y - mean_shape
        w_oracle = np.linalg.lstsq(du, dy, rcond=None)[0].T
        x_te = test.landmarks.reshape(test.n_samples, -1)
        proj0_te = model.camera_scale_ * np.tile(model.mean_shape_[test.landmark_spec.indices, :2], (test.n_samples, 1, 1))
        proj0_te[~test.visibility] = 0.0
        du_te = np.hstack([x_te - proj0_te.reshape(test.n_samples, -1), np.ones((test.n_samples, 1))])
        oracle_pred = mean_shape + du_te @ w_oracle.T
        ours = recon.reshape(test.n_samples, -1)
        denom = np.linalg.norm(oracle_pred)
        assert np.linalg.norm(ours - oracle_pred) / denom < 1e-8

    def test_objective_monotone(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=6)
        obj = model.report_.objective_per_stage
        assert np.all(np.diff(obj) <= 1e-9 * obj[:-1])

    def test_determinism(self, small_dataset):
        a = train_cascade(small_dataset, n_stages=3, noise_std=1.0, random_state=42)
        b = train_cascade(small_dataset, n_stages=3, noise_std=1.0, random_state=42)
        assert a.train_fingerprint_ == b.train_fingerprint_
        for wa, wb in zip(a.stages_, b.stages_):
            np.testing.assert_array_equal(wa, wb)

    def test_different_seed_differs_under_noise(self, small_dataset):
        a = train_cascade(small_dataset, n_stages=2, noise_std=1.0, random_state=0)
        b = train_cascade(small_dataset, n_stages=2, noise_std=1.0, random_state=1)
        assert any(not np.array_equal(wa, wb) for wa, wb in zip(a.stages_, b.stages_))

    def test_report_counts_replicas(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=1, noise_std=0.5, noise_replicas=3)
        assert model.report_.sample_count == 3 * small_dataset.n_samples

    def test_needs_enough_samples_without_ridge(self, small_dataset):
        tiny = small_dataset.subset(np.arange(10))
        with pytest.raises(ValidationError):
            train_cascade(tiny, n_stages=1, ridge=0.0)


class TestPredict:
    def test_zero_stages_return_mean_shape(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=2)
        model.stages_ = [np.zeros_like(w) for w in model.stages_]
        lm = small_dataset.landmark_set(0)
        np.testing.assert_array_equal(model.predict_shape(lm), model.mean_shape_)

    def test_projection_of_mean_is_fixpoint_with_zero_bias(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=3)
        for w in model.stages_:
            w[:, -1] = 0.0  # remove biases
        pts = model.camera_scale_ * model.mean_shape_[model.landmark_indices_, :2]
        lm = LandmarkSet2D(pts, np.ones(model.n_landmarks_, dtype=bool))
        np.testing.assert_allclose(model.predict_shape(lm), model.mean_shape_, atol=1e-9)

    def test_invisible_slots_are_inert(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=2)
        i = int(np.flatnonzero(~small_dataset.visibility.all(axis=1))[0]) \
            if not small_dataset.visibility.all() else 0
        vis = small_dataset.visibility[i].copy()
        if vis.all():
            vis[::3] = False
        x = small_dataset.landmarks[i].copy()
        x[~vis] = 0.0
        base = model.predict(x.reshape(1, -1), vis.reshape(1, -1))
        tampered = x.copy()
        tampered[~vis] = 123.456
        out = model.predict(tampered.reshape(1, -1), vis.reshape(1, -1))
        np.testing.assert_array_equal(base, out)

    def test_length_mismatch(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=1)
        with pytest.raises(ValidationError):
            model.predict(np.zeros((1, 10)))

    def test_nonfinite_rejected(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=1)
        bad = np.full((1, 2 * model.n_landmarks_), np.nan)
        with pytest.raises(ValidationError):
            model.predict(bad)

    def test_unfitted_predict_raises(self):
        with pytest.raises(ValidationError):
            CascadedShapeRegressor(landmark_indices=[0, 1, 2, 3]).predict(np.zeros((1, 8)))


class TestDisturbLandmarks:
    def test_sigma_zero_is_identity(self):
        lm = LandmarkSet2D(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([True, False]))
        rng = np.random.default_rng(0)
        out = disturb_landmarks(lm, 0.0, rng)
        np.testing.assert_array_equal(out.points, lm.points)

    def test_invisible_entries_stay_zero(self):
        lm = LandmarkSet2D(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([True, False]))
        out = disturb_landmarks(lm, 5.0, np.random.default_rng(1))
        assert np.array_equal(out.points[1], [0.0, 0.0])
        assert not out.visibility[1]

    def test_sample_std_matches_sigma(self):
        lm = LandmarkSet2D(np.array([[10.0, 20.0]]), np.array([True]))
        rng = np.random.default_rng(2)
        draws = np.array([
            disturb_landmarks(lm, 3.0, rng).points[0, 0] for _ in range(100_000)
        ])
        assert np.std(draws) == pytest.approx(3.0, rel=0.02)

    def test_negative_sigma_rejected(self):
        lm = LandmarkSet2D(np.array([[1.0, 1.0]]), np.array([True]))
        with pytest.raises(ValidationError):
            disturb_landmarks(lm, -1.0, np.random.default_rng(0))


class TestEstimateVisibility:
    def test_frontal_detection_sees_everything(self, small_model, small_dataset):
        model = train_cascade(small_dataset, n_stages=1)
        pts = model.camera_scale_ * model.mean_shape_[model.landmark_indices_, :2]
        detected = LandmarkSet2D(pts, np.ones(model.n_landmarks_, dtype=bool))
        mask = model.estimate_visibility(detected, small_model.topology)
        assert mask.all()

    def test_mask_is_positive_normal_halfspace(self, small_model, small_dataset):
        from csr3d import vertex_normals

        model = train_cascade(small_dataset, n_stages=1)
        pts = model.camera_scale_ * model.mean_shape_[model.landmark_indices_, :2]
        detected = LandmarkSet2D(pts, np.ones(model.n_landmarks_, dtype=bool))
        mask = estimate_input_visibility(
            detected, model.mean_shape_, model.landmark_indices_, small_model.topology
        )
        normals = vertex_normals(model.mean_shape_, small_model.topology)
        expected = normals[model.landmark_indices_][:, 2] > 0
        np.testing.assert_array_equal(mask, expected)

    def test_intersection_bound_with_detector_mask(self, small_model, small_dataset):
        from csr3d import mask_to_reference

        model = train_cascade(small_dataset, n_stages=1)
        pts = model.camera_scale_ * model.mean_shape_[model.landmark_indices_, :2]
        vis = np.ones(model.n_landmarks_, dtype=bool)
        vis[:10] = False
        pts = pts.copy()
        pts[:10] = 0.0
        detected = LandmarkSet2D(pts, vis)
        mask = model.estimate_visibility(detected, small_model.topology)
        merged = mask_to_reference(detected, mask)
        assert merged.visibility.sum() <= vis.sum()


class TestSklearnInterface:
    def test_get_set_params_roundtrip(self):
        est = CascadedShapeRegressor(landmark_indices=[0, 1, 2, 3], n_stages=7, ridge=0.5)
        params = est.get_params()
        assert params["n_stages"] == 7 and params["ridge"] == 0.5
        est.set_params(n_stages=2)
        assert est.n_stages == 2

    def test_clone_preserves_config(self, small_dataset):
        model = train_cascade(small_dataset, n_stages=2, noise_std=0.25)
        cloned = clone(model)
        a, b = cloned.get_params(), model.get_params()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not hasattr(cloned, "stages_")

    def test_invalid_config_rejected_at_fit(self, small_dataset):
        n = small_dataset.n_samples
        x = small_dataset.landmarks.reshape(n, -1)
        y = small_dataset.shapes.reshape(n, -1)
        with pytest.raises(ValidationError):
            CascadedShapeRegressor(landmark_indices=None).fit(x, y)
        bad = CascadedShapeRegressor(
            landmark_indices=small_dataset.landmark_spec.indices, n_stages=0
        )
        with pytest.raises(ValidationError):
            bad.fit(x, y)
