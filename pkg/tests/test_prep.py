import numpy as np
import pytest

from cardioviews.prep import (
    PrepConfig,
    center_scale,
    clahe3d,
    intensity_chain,
    minmax_normalize,
    nearest_rank_percentile,
    percentile_clip,
    preprocess,
)
from cardioviews.volume import Volume3, voxel_to_world


def vol(data, spacing=(1, 1, 1), origin=(0, 0, 0)):
    data = np.asarray(data, dtype=np.float32)
    return Volume3(data.shape, spacing, origin, data)


def sort_rank_percentile(values, q):
    # independent nearest-rank oracle on the sorted list
    flat = sorted(float(x) for x in np.ravel(values))
    rank = max(1, int(np.ceil(q / 100.0 * len(flat))))
    return flat[rank - 1]


class TestPercentileClip:
    def test_constant_unchanged(self):
        v = vol(np.full((4, 4, 4), 7.0))
        assert np.array_equal(percentile_clip(v, 1, 99).data, v.data)

    def test_values_1_to_100(self):
        rng = np.random.default_rng(0)
        data = rng.permutation(np.arange(1.0, 101.0)).reshape(5, 5, 4)
        out = percentile_clip(vol(data), 1, 99).data
        assert out.max() == 99.0  # value 100 clipped down
        assert out.min() == 1.0   # value 1 untouched
        inside = (data > 1) & (data < 99)
        assert np.array_equal(out[inside], data[inside].astype(np.float32))

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            data = rng.standard_normal((6, 5, 7)) * rng.uniform(0.1, 10)
            lo, hi = sorted(rng.uniform(0.5, 99.5, 2))
            assert nearest_rank_percentile(data, lo) == sort_rank_percentile(data, lo)
            assert nearest_rank_percentile(data, hi) == sort_rank_percentile(data, hi)
            out = percentile_clip(vol(data), lo, hi).data
            expect = np.clip(data, sort_rank_percentile(data, lo),
                             sort_rank_percentile(data, hi))
            assert np.allclose(out, expect.astype(np.float32))

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        v = vol(rng.standard_normal((8, 8, 8)))
        once = percentile_clip(v, 1, 99)
        twice = percentile_clip(once, 1, 99)
        assert np.array_equal(once.data, twice.data)


class TestMinmaxNormalize:
    def test_two_point_range(self):
        v = vol([[[2.0, 4.0]]])
        assert np.array_equal(minmax_normalize(v).data, [[[0.0, 1.0]]])

    def test_constant_maps_to_zero(self):
        assert not minmax_normalize(vol(np.full((3, 3, 3), 5.0))).data.any()

    def test_range_and_order_preserved(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((6, 6, 6))
        out = minmax_normalize(vol(data)).data
        assert out.min() == 0.0 and out.max() == 1.0
        flat_in = data.ravel()
        flat_out = out.ravel()
        order = np.argsort(flat_in, kind="stable")
        assert np.all(np.diff(flat_out[order]) >= 0)

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        v = minmax_normalize(vol(rng.standard_normal((5, 5, 5))))
        again = minmax_normalize(v)
        assert np.abs(again.data - v.data).max() < 1e-6


class TestCenterScale:
    def test_symmetric_two_point(self):
        out = center_scale(vol([[[0.0, 2.0]]])).data
        assert np.allclose(out, [[[-1.0, 1.0]]])

    def test_constant_maps_to_zero(self):
        assert not center_scale(vol(np.full((3, 3, 3), 9.0))).data.any()

    def test_moments(self):
        rng = np.random.default_rng(5)
        out = center_scale(vol(rng.uniform(0, 100, (8, 8, 8)))).data.astype(np.float64)
        assert abs(out.mean()) <= 1e-6
        assert abs(out.std() - 1.0) <= 1e-5

    def test_monotone(self):
        rng = np.random.default_rng(6)
        data = rng.standard_normal((5, 5, 5))
        out = center_scale(vol(data)).data.ravel()
        order = np.argsort(data.ravel(), kind="stable")
        assert np.all(np.diff(out[order]) >= 0)


def histeq_oracle(data, bins):
    """Plain histogram equalization: direct CDF mapping, one tile."""
    flat = data.ravel()
    b = np.minimum((flat * bins).astype(int), bins - 1)
    hist = np.bincount(b, minlength=bins)
    cdf = np.cumsum(hist) / flat.size
    return cdf[b].reshape(data.shape)


class TestClahe3d:
    def test_constant_volume_constant_output(self):
        cfg = PrepConfig(target_edge=16, clahe_tiles=2, clahe_bins=16)
        out = clahe3d(vol(np.full((16, 16, 16), 0.5)), cfg).data
        assert np.array_equal(out, np.zeros_like(out))

    def test_single_tile_unclipped_equals_histeq(self):
        rng = np.random.default_rng(7)
        data = rng.random((8, 8, 8))
        cfg = PrepConfig(target_edge=8, clahe_tiles=1, clahe_clip=1e9, clahe_bins=32)
        out = clahe3d(vol(data), cfg).data
        assert np.abs(out - histeq_oracle(data, 32)).max() < 1e-6

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(8)
        cfg = PrepConfig(target_edge=16, clahe_tiles=4, clahe_bins=64)
        out = clahe3d(vol(rng.random((16, 16, 16))), cfg).data
        assert np.isfinite(out).all()
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_indivisible_dims_rejected(self):
        cfg = PrepConfig(target_edge=16, clahe_tiles=4)
        with pytest.raises(ValueError):
            clahe3d(vol(np.zeros((15, 16, 16))), cfg)

    def test_locality(self):
        # perturbing one corner tile leaves voxels beyond its neighbors unchanged
        rng = np.random.default_rng(9)
        data = rng.random((32, 32, 32))
        cfg = PrepConfig(target_edge=32, clahe_tiles=4, clahe_bins=32)
        base = clahe3d(vol(data), cfg).data
        bumped = data.copy()
        bumped[:8, :8, :8] = rng.random((8, 8, 8))
        out = clahe3d(vol(bumped), cfg).data
        # tiles are 8 wide; influence of tile 0 ends two tiles away
        assert np.array_equal(base[20:, 20:, 20:], out[20:, 20:, 20:])


class TestPreprocess:
    def test_output_dims_and_padding_uniform(self):
        rng = np.random.default_rng(10)
        v = Volume3((8, 64, 64), (1, 1, 1), (0, 0, 0),
                    rng.uniform(10, 200, (8, 64, 64)))
        cfg = PrepConfig()
        out, tf = preprocess(v, cfg)
        assert out.dims == (64, 64, 64)
        # thin x axis is zero padded; deep padding (a full tile away from
        # any content) comes out spatially constant after steps ii-v
        pad = out.data[:16]
        assert np.abs(pad - pad.ravel()[0]).max() < 1e-6

    def test_probe_point_round_trip(self):
        rng = np.random.default_rng(11)
        v = Volume3((30, 40, 20), (1, 1, 2), (-5, 3, 9),
                    rng.uniform(0, 50, (30, 40, 20)))
        out, tf = preprocess(v, PrepConfig())
        p = voxel_to_world(v, (12.0, 20.0, 7.0))
        cube = tf.inverse().apply(p)
        assert np.abs(tf.apply(cube) - p).max() < 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        v = Volume3((32, 32, 32), (1, 1, 1), (0, 0, 0), rng.uniform(0, 1, (32, 32, 32)))
        a, _ = preprocess(v, PrepConfig())
        b, _ = preprocess(v, PrepConfig())
        assert np.array_equal(a.data, b.data)

    def test_chain_is_standardized(self):
        rng = np.random.default_rng(13)
        v = Volume3((64, 64, 64), (1, 1, 1), (0, 0, 0),
                    rng.uniform(0, 1000, (64, 64, 64)))
        out = intensity_chain(v, PrepConfig())
        d = out.data.astype(np.float64)
        assert abs(d.mean()) < 1e-6 and abs(d.std() - 1) < 1e-5

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PrepConfig(clip_lo_pct=50, clip_hi_pct=40)
        with pytest.raises(ValueError):
            PrepConfig(clahe_tiles=7)  # does not divide 64
        with pytest.raises(ValueError):
            PrepConfig(clahe_clip=0.5)
