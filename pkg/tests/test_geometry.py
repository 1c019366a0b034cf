import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csr3d import (
    DegenerateGeometryError,
    LandmarkSet2D,
    LandmarkSpec,
    SimilarityTransform,
    ValidationError,
    apply_pose,
    estimate_camera,
    landmark_visibility,
    mask_to_reference,
    procrustes,
    project,
    rotation_yaw_pitch,
    vertex_normals,
)
from csr3d.geometry import view_direction, zero_filled

from conftest import make_sphere


def spec_of(indices, n=None):
    return LandmarkSpec(np.asarray(indices), np.zeros(len(indices), dtype=np.uint8))


class TestProject:
    shape = np.array([[3.0, 4.0, 5.0], [1.0, -2.0, 0.5], [0.0, 0.0, 1.0], [2.0, 2.0, 2.0]])
    spec = spec_of([0, 1, 2, 3])

    def test_identity_scale_drops_z(self):
        lm = project(self.shape, self.spec, 1.0)
        assert np.array_equal(lm.points[0], [3.0, 4.0])

    def test_linear_scaling(self):
        lm = project(self.shape, self.spec, 2.0)
        assert np.array_equal(lm.points[0], [6.0, 8.0])

    def test_invisible_is_zero_filled(self):
        mask = np.array([False, True, True, True])
        lm = project(self.shape, self.spec, 2.0, mask)
        assert np.array_equal(lm.points[0], [0.0, 0.0])
        assert not lm.visibility[0]

    def test_bad_index_is_structural_error(self):
        with pytest.raises(ValidationError):
            project(self.shape, spec_of([0, 1, 2, 99]), 1.0)

    @given(st.floats(0.1, 50.0))
    @settings(max_examples=30, deadline=None)
    def test_projection_linearity_in_shape_scale(self, a):
        base = project(self.shape, self.spec, 1.5)
        scaled = project(a * self.shape, self.spec, 1.5)
        np.testing.assert_allclose(scaled.points, a * base.points, rtol=1e-12)


class TestEstimateCamera:
    def test_exact_double_scaling(self):
        pts3 = np.array([[1.0, 2.0, 9.0], [3.0, -1.0, 4.0], [0.5, 0.5, 0.0], [2.0, 0.0, 1.0]])
        lm = LandmarkSet2D(2.0 * pts3[:, :2], np.ones(4, dtype=bool))
        assert estimate_camera(lm, pts3) == pytest.approx(2.0, rel=1e-14)

    def test_least_squares_compromise(self):
        # minimize (2-f)^2 + (4-f)^2 -> f = 3 by the closed form
        pts3 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
        lm = LandmarkSet2D(
            np.array([[2.0, 0.0], [0.0, 4.0], [0.0, 0.0], [0.0, 0.0]]),
            np.array([True, True, False, False]),
        )
        assert estimate_camera(lm, pts3) == pytest.approx(3.0, rel=1e-14)

    def test_zero_geometry_is_degenerate(self):
        pts3 = np.zeros((4, 3))
        pts3[:, 2] = [1.0, 2.0, 3.0, 4.0]
        lm = LandmarkSet2D(np.ones((4, 2)), np.ones(4, dtype=bool))
        with pytest.raises(DegenerateGeometryError):
            estimate_camera(lm, pts3)

    def test_no_visible_landmarks(self):
        lm = LandmarkSet2D(np.zeros((4, 2)), np.zeros(4, dtype=bool))
        with pytest.raises(DegenerateGeometryError):
            estimate_camera(lm, np.random.default_rng(0).normal(size=(4, 3)))

    @given(st.floats(0.05, 40.0))
    @settings(max_examples=30, deadline=None)
    def test_exact_recovery_of_projection_scale(self, f0):
        rng = np.random.default_rng(17)
        shape = rng.normal(size=(10, 3))
        spec = spec_of(range(10))
        lm = project(shape, spec, f0)
        assert estimate_camera(lm, shape) == pytest.approx(f0, rel=1e-12)


class TestVertexNormals:
    tri_ccw = np.array([[0, 1, 2]])
    flat = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def test_planar_face_points_up(self):
        normals = vertex_normals(self.flat, self.tri_ccw)
        np.testing.assert_allclose(normals, [[0, 0, 1]] * 3, atol=1e-15)

    def test_reversed_winding_flips(self):
        normals = vertex_normals(self.flat, np.array([[0, 2, 1]]))
        np.testing.assert_allclose(normals, [[0, 0, -1]] * 3, atol=1e-15)

    def test_sphere_normals_near_radial(self):
        verts, tris = make_sphere()
        normals = vertex_normals(verts, tris)
        radial = verts / np.linalg.norm(verts, axis=1, keepdims=True)
        cos = np.sum(normals * radial, axis=1)
        worst_deg = np.degrees(np.arccos(np.clip(cos.min(), -1, 1)))
        assert worst_deg < 2.0

    def test_isolated_vertex_has_no_normal(self):
        verts = np.vstack([self.flat, [5.0, 5.0, 5.0]])
        with pytest.raises(DegenerateGeometryError):
            vertex_normals(verts, self.tri_ccw)

    def test_degenerate_triangle_rejected(self):
        with pytest.raises(ValidationError):
            vertex_normals(self.flat, np.array([[0, 0, 1]]))


class TestLandmarkVisibility:
    def test_faces_camera(self):
        assert landmark_visibility(np.array([[0.0, 0.0, 1.0]]), 2.0)[0]

    def test_faces_away(self):
        assert not landmark_visibility(np.array([[0.0, 0.0, -1.0]]), 2.0)[0]

    def test_grazing_counts_invisible(self):
        # sign(0) = 0 scores exactly 1/2, classified invisible
        assert not landmark_visibility(np.array([[1.0, 0.0, 0.0]]), 2.0)[0]

    def test_view_direction_is_camera_axis(self):
        np.testing.assert_allclose(view_direction(7.3), [0.0, 0.0, 1.0], atol=0)

    def test_non_unit_normal_rejected(self):
        with pytest.raises(ValidationError):
            landmark_visibility(np.array([[0.0, 0.0, 2.0]]), 1.0)


def random_similarity(rng):
    q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return SimilarityTransform(q, rng.normal(scale=20.0, size=3), rng.uniform(0.3, 3.0))


class TestProcrustes:
    def test_self_alignment_is_identity(self):
        rng = np.random.default_rng(5)
        shape = rng.normal(size=(30, 3))
        xf, aligned = procrustes(shape, shape)
        np.testing.assert_allclose(aligned, shape, atol=1e-12)
        np.testing.assert_allclose(xf.rotation, np.eye(3), atol=1e-10)
        assert xf.scale == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_recovers_random_similarity(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(scale=10.0, size=(40, 3))
        xf_true = random_similarity(rng)
        target = xf_true.apply(src)
        xf, aligned = procrustes(src, target)
        rmsd = np.sqrt(np.mean(np.sum((aligned - target) ** 2, axis=1)))
        assert rmsd < 1e-9
        np.testing.assert_allclose(xf.rotation, xf_true.rotation, atol=1e-9)
        assert xf.scale == pytest.approx(xf_true.scale, rel=1e-9)

    def test_mirror_never_returns_reflection(self):
        rng = np.random.default_rng(9)
        src = rng.normal(size=(25, 3))
        mirrored = src * np.array([-1.0, 1.0, 1.0])
        xf, _ = procrustes(src, mirrored)
        assert np.linalg.det(xf.rotation) == pytest.approx(1.0, abs=1e-10)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(20, 3))
        target = random_similarity(rng).apply(src)
        _, aligned = procrustes(src, target)
        xf2, _ = procrustes(aligned, target)
        np.testing.assert_allclose(xf2.rotation, np.eye(3), atol=1e-10)
        assert xf2.scale == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(xf2.translation, 0.0, atol=1e-8)

    def test_rigid_only_switch(self):
        rng = np.random.default_rng(4)
        src = rng.normal(size=(15, 3))
        target = 2.5 * src
        xf, _ = procrustes(src, target, with_scale=False)
        assert xf.scale == 1.0

    def test_count_mismatch(self):
        with pytest.raises(ValidationError):
            procrustes(np.zeros((4, 3)), np.zeros((5, 3)))

    def test_collinear_source_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
        with pytest.raises(DegenerateGeometryError):
            procrustes(line, line + 1.0)


class TestApplyPose:
    def test_identity(self):
        shape = np.random.default_rng(0).normal(size=(7, 3))
        np.testing.assert_array_equal(apply_pose(shape, SimilarityTransform.identity()), shape)

    def test_yaw_quarter_turn(self):
        rot = rotation_yaw_pitch(90.0, 0.0)
        xf = SimilarityTransform(rot, np.zeros(3), 1.0)
        out = apply_pose(np.array([[1.0, 0.0, 0.0]]), xf)
        np.testing.assert_allclose(out, [[0.0, 0.0, -1.0]], atol=1e-15)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(2)
        shape = rng.normal(scale=5.0, size=(12, 3))
        xf = random_similarity(rng)
        back = apply_pose(apply_pose(shape, xf), xf.inverse())
        np.testing.assert_allclose(back, shape, atol=1e-12)


class TestMaskToReference:
    def make(self):
        pts = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0], [5.0, 6.0]])
        return LandmarkSet2D(pts, np.array([True, True, False, True]))

    def test_all_true_reference_unchanged(self):
        lm = self.make()
        out = mask_to_reference(lm, np.ones(4, dtype=bool))
        np.testing.assert_array_equal(out.points, lm.points)
        np.testing.assert_array_equal(out.visibility, lm.visibility)

    def test_all_false_reference_zeroes(self):
        out = mask_to_reference(self.make(), np.zeros(4, dtype=bool))
        assert np.all(out.points == 0.0)
        assert not out.visibility.any()

    def test_masked_deviation_is_exactly_zero(self):
        lm = self.make()
        ref = np.array([True, False, True, True])
        masked = mask_to_reference(lm, ref)
        target = zero_filled(np.array([[1.0, 1.0]] * 4), masked.visibility)
        deviation = target.points - masked.points
        assert np.all(deviation[~masked.visibility] == 0.0)

    def test_idempotent_and_commutes(self):
        lm = self.make()
        a = np.array([True, False, True, True])
        b = np.array([False, True, True, True])
        once = mask_to_reference(lm, a)
        twice = mask_to_reference(once, a)
        np.testing.assert_array_equal(once.points, twice.points)
        ab = mask_to_reference(mask_to_reference(lm, a), b)
        ba = mask_to_reference(mask_to_reference(lm, b), a)
        np.testing.assert_array_equal(ab.points, ba.points)
        np.testing.assert_array_equal(ab.visibility, ba.visibility)


class TestDomainTypes:
    def test_landmark_set_rejects_nonzero_invisible(self):
        with pytest.raises(ValidationError):
            LandmarkSet2D(np.array([[1.0, 1.0]]), np.array([False]))

    def test_landmark_set_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            LandmarkSet2D(np.array([[np.nan, 0.0]]), np.array([True]))

    def test_spec_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            LandmarkSpec(np.array([0, 1, 2, 2]), np.zeros(4, dtype=np.uint8))

    def test_transform_rejects_reflection(self):
        refl = np.diag([-1.0, 1.0, 1.0])
        with pytest.raises(ValidationError):
            SimilarityTransform(refl, np.zeros(3), 1.0)
