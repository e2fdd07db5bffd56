import numpy as np
import pytest

from cardioviews.volume import (
    AffineTransform,
    LandmarkId,
    LandmarkSet,
    Series4D,
    Volume3,
    resample_isotropic,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)


def rand_volume(rng, dims=(6, 5, 4)):
    return Volume3(
        dims,
        tuple(rng.uniform(0.5, 3.0, 3)),
        tuple(rng.uniform(-20, 20, 3)),
        rng.standard_normal(dims).astype(np.float32),
    )


class TestVolume3:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            Volume3((0, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros((0, 4, 4)))
        with pytest.raises(ValueError):
            Volume3((4, 4, 4), (1, 0, 1), (0, 0, 0), np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            Volume3((4, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros((4, 4, 3)))
        bad = np.zeros((4, 4, 4))
        bad[1, 2, 3] = np.nan
        with pytest.raises(ValueError):
            Volume3((4, 4, 4), (1, 1, 1), (0, 0, 0), bad)

    def test_flat_x_fastest_data_accepted(self):
        flat = np.arange(24, dtype=np.float32)
        v = Volume3((2, 3, 4), (1, 1, 1), (0, 0, 0), flat)
        # x varies fastest in the flat layout
        assert v.data[1, 0, 0] == 1
        assert v.data[0, 1, 0] == 2
        assert v.data[0, 0, 1] == 6

    def test_series_rejects_mismatched_frames(self):
        a = Volume3((4, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros((4, 4, 4)))
        b = Volume3((4, 4, 4), (1, 1, 1), (0, 0, 1), np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            Series4D([a, b])
        assert Series4D([a, a]).frame_count == 2

    def test_landmark_set(self):
        lms = LandmarkSet({"MV": [1, 2, 3], LandmarkId.LVA: [0, 0, 0]})
        assert LandmarkId.MV in lms and len(lms) == 2
        assert lms.ids() == [LandmarkId.LVA, LandmarkId.MV]
        back = LandmarkSet.from_json_points(lms.to_json_points())
        assert np.allclose(back[LandmarkId.MV], [1, 2, 3])
        with pytest.raises(ValueError):
            LandmarkSet({"AV": [np.inf, 0, 0]})


class TestVoxelWorld:
    def test_identity_spacing(self):
        v = Volume3((8, 8, 8), (1, 1, 1), (0, 0, 0), np.zeros((8, 8, 8)))
        assert np.allclose(voxel_to_world(v, (3, 4, 5)), (3, 4, 5))

    def test_affine_by_inspection(self):
        v = Volume3((8, 8, 8), (2, 1, 1), (10, 0, 0), np.zeros((8, 8, 8)))
        assert np.allclose(voxel_to_world(v, (3, 0, 0)), (16, 0, 0))

    def test_matches_componentwise_formula(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            v = rand_volume(rng)
            idx = rng.uniform(-5, 10, 3)
            expect = np.array(v.origin) + idx * np.array(v.spacing)
            assert np.allclose(voxel_to_world(v, idx), expect, atol=0, rtol=1e-15)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            v = rand_volume(rng)
            idx = rng.uniform(-5, 10, 3)
            p = voxel_to_world(v, idx)
            assert np.abs(world_to_voxel(v, p) - idx).max() < 1e-12


class TestAffineTransform:
    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            AffineTransform(np.zeros((3, 3)), np.zeros(3))

    def test_compose_and_inverse(self):
        rng = np.random.default_rng(3)
        a = AffineTransform(rng.standard_normal((3, 3)) + 3 * np.eye(3), rng.standard_normal(3))
        b = AffineTransform(rng.standard_normal((3, 3)) + 3 * np.eye(3), rng.standard_normal(3))
        p = rng.standard_normal((10, 3))
        assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
        assert np.abs(a.inverse().apply(a.apply(p)) - p).max() < 1e-9


class TestTrilinearSample:
    def test_constant_field(self):
        v = Volume3((5, 5, 5), (1, 1, 1), (0, 0, 0), np.full((5, 5, 5), 3.25))
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 4, (20, 3))
        assert np.allclose(trilinear_sample(v, pts), 3.25)

    def test_linear_field_reproduced(self):
        dims = (6, 7, 8)
        grid = np.moveaxis(np.indices(dims).astype(np.float32), 0, -1)
        v = Volume3(dims, (2, 1, 1), (5, 0, 0), grid[..., 0])
        rng = np.random.default_rng(1)
        pts_vox = rng.uniform(1, 4, (30, 3))
        pts = pts_vox * np.array([2, 1, 1]) + np.array([5, 0, 0])
        assert np.abs(trilinear_sample(v, pts) - pts_vox[:, 0]).max() < 1e-6

    def test_voxel_center_returns_stored_value(self):
        rng = np.random.default_rng(2)
        v = rand_volume(rng)
        for _ in range(20):
            idx = tuple(rng.integers(0, d) for d in v.dims)
            p = voxel_to_world(v, idx)
            assert abs(trilinear_sample(v, p) - float(v.data[idx])) < 1e-5

    def test_outside_returns_zero(self):
        v = Volume3((4, 4, 4), (1, 1, 1), (0, 0, 0), np.ones((4, 4, 4)))
        assert trilinear_sample(v, (10.0, 0.0, 0.0)) == 0.0
        assert trilinear_sample(v, (-2.0, 1.0, 1.0)) == 0.0
        # half a voxel beyond the face blends toward zero
        assert abs(trilinear_sample(v, (3.5, 1.0, 1.0)) - 0.5) < 1e-6


class TestResampleIsotropic:
    def test_identity_on_isotropic_cube(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((64, 64, 64)).astype(np.float32)
        v = Volume3((64, 64, 64), (1, 1, 1), (3, -2, 7), data)
        out, tf = resample_isotropic(v, 64)
        assert out.spacing == (1.0, 1.0, 1.0)
        assert np.abs(out.data - data).max() < 1e-5
        assert np.allclose(tf.apply(np.zeros(3)), v.origin)

    def test_hand_computed_scale_and_padding(self):
        # 32x64x64 at spacing (2,1,1): center spans (62,63,63) -> scale 63/63 = 1
        rng = np.random.default_rng(5)
        v = Volume3((32, 64, 64), (2, 1, 1), (0, 0, 0), rng.random((32, 64, 64)))
        out, tf = resample_isotropic(v, 64)
        assert np.allclose(out.spacing, (1.0, 1.0, 1.0))
        assert out.dims == (64, 64, 64)
        # physical extents preserved: x center-span stays 62 mm, centered
        lo = tf.apply((0.0, 0.0, 0.0))
        hi = tf.apply((63.0, 63.0, 63.0))
        assert np.allclose(hi - lo, 63.0)
        assert np.allclose((lo + hi) / 2, v.world_center())

    def test_probe_point_through_transform(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            v = rand_volume(rng, dims=(9, 12, 7))
            out, tf = resample_isotropic(v, 32)
            p = voxel_to_world(v, rng.uniform(0, 6, 3))
            cube = tf.inverse().apply(p)
            assert np.abs(tf.apply(cube) - p).max() < 1e-9

    def test_corners_span_cube_on_longest_axis(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            v = rand_volume(rng, dims=(10, 6, 8))
            te = 48
            out, tf = resample_isotropic(v, te)
            corners = np.array([
                voxel_to_world(v, (i * (v.dims[0] - 1), j * (v.dims[1] - 1), k * (v.dims[2] - 1)))
                for i in (0, 1) for j in (0, 1) for k in (0, 1)
            ])
            mapped = tf.inverse().apply(corners)
            assert mapped.min() >= -1e-9 and mapped.max() <= te - 1 + 1e-9
            ext = np.array(v.world_extent())
            axis = int(ext.argmax())
            assert abs(mapped[:, axis].min()) < 1e-9
            assert abs(mapped[:, axis].max() - (te - 1)) < 1e-9
