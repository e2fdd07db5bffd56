import numpy as np
import pytest

from cardioviews.augment import (
    AugConfig,
    GeometryDraw,
    augment_sample,
    elastic_field,
    warp_sample,
)
from cardioviews.localize import encode_heatmaps
from cardioviews.volume import AffineTransform, LandmarkId, LandmarkSet, Volume3

L = LandmarkId


def make_volume(rng, dims=(24, 24, 24)):
    return Volume3(dims, (1, 1, 1), (0, 0, 0), rng.random(dims).astype(np.float32))


def make_lms(rng, lo=6, hi=18):
    return LandmarkSet({lid: rng.uniform(lo, hi, 3) for lid in LandmarkId})


class TestElasticField:
    def test_zero_alpha(self):
        f = elastic_field((8, 8, 8), 0.0, 4.0, np.random.default_rng(0))
        assert not f.any()

    def test_peak_magnitude_normalized(self):
        f = elastic_field((16, 16, 16), 2.5, 3.0, np.random.default_rng(1))
        mags = np.sqrt((f * f).sum(axis=0))
        assert abs(mags.max() - 2.5) < 1e-6

    def test_smoothness_increases_with_sigma(self):
        def roughness(sigma, seed):
            f = elastic_field((24, 24, 24), 1.0, sigma, np.random.default_rng(seed))
            g = np.diff(f, axis=1)
            return np.abs(g).mean()

        for seed in (2, 3):
            assert roughness(4.0, seed) < roughness(2.0, seed)


class TestIdentityConfig:
    def test_bit_identical(self):
        rng = np.random.default_rng(4)
        v = make_volume(rng)
        lms = make_lms(rng)
        out_v, out_l = augment_sample(v, lms, AugConfig(), np.random.default_rng(5))
        assert np.array_equal(out_v.data, v.data)
        for lid in LandmarkId:
            assert np.array_equal(out_l[lid], lms[lid])


class TestFlips:
    def test_x_flip_mirrors_volume_and_landmarks(self):
        rng = np.random.default_rng(6)
        v = make_volume(rng)
        lms = make_lms(rng)
        cfg = AugConfig(flip_enabled=(True, False, False))
        flipped = unflipped = None
        for seed in range(20):
            out_v, out_l = augment_sample(v, lms, cfg, np.random.default_rng(seed))
            if np.array_equal(out_v.data, v.data):
                unflipped = (out_v, out_l)
            else:
                flipped = (out_v, out_l)
            if flipped and unflipped:
                break
        assert flipped is not None and unflipped is not None

        out_v, out_l = flipped
        assert np.abs(out_v.data - v.data[::-1]).max() < 1e-5
        cx = v.world_center()[0]
        for lid in LandmarkId:
            expect = lms[lid].copy()
            expect[0] = 2 * cx - expect[0]
            assert np.abs(out_l[lid] - expect).max() < 1e-9
        for lid in LandmarkId:
            assert np.array_equal(unflipped[1][lid], lms[lid])


class TestExplicitRotation:
    def test_quarter_turn_about_z(self):
        rng = np.random.default_rng(7)
        v = make_volume(rng)
        lms = make_lms(rng, lo=8, hi=16)
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        draw = GeometryDraw(v, rot_m=rot)
        out_v, out_l = warp_sample(v, lms, draw)

        c = v.world_center()
        for lid in LandmarkId:
            expect = rot @ (lms[lid] - c) + c
            assert np.abs(out_l[lid] - expect).max() < 1e-9

        # volume rotated by exactly 90 degrees equals an axis permutation:
        # out[i, j, k] = in[j, n-1-i, k]
        oracle = np.transpose(v.data[:, ::-1, :], (1, 0, 2))
        assert np.abs(out_v.data - oracle).max() < 1e-5

    def test_pure_shift(self):
        rng = np.random.default_rng(8)
        v = make_volume(rng)
        lms = make_lms(rng)
        draw = GeometryDraw(v, rot_m=np.eye(3), shift_mm=(3.0, 0.0, 0.0))
        out_v, out_l = warp_sample(v, lms, draw)
        assert np.abs(out_l[L.MV] - (lms[L.MV] + (3, 0, 0))).max() < 1e-12
        # content moved +x by 3 voxels
        assert np.abs(out_v.data[5:, :, :] - v.data[2:-3, :, :]).max() < 1e-5


class TestElasticConsistency:
    def test_landmark_forward_inverts_pullback(self):
        rng = np.random.default_rng(9)
        v = make_volume(rng, dims=(32, 32, 32))
        field = elastic_field(v.dims, 2.0, 5.0, rng)
        draw = GeometryDraw(v, field=field)
        p = np.array([15.2, 14.7, 16.1])
        q = draw.elastic_fwd(p)
        back = draw.elastic_inv(q)
        assert np.abs(back - p).max() < 1e-8


class TestDeterminismAndOrder:
    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(10)
        v = make_volume(rng)
        lms = make_lms(rng)
        cfg = AugConfig(flip_enabled=(True, True, False), noise_sigma=0.05,
                        elastic_alpha=1.5, elastic_sigma=4.0, affine_max_rot=0.2,
                        affine_max_scale=0.1, affine_max_shift=2.0,
                        brightness_delta=0.1, contrast_range=0.2, blur_sigma=0.8)
        a_v, a_l = augment_sample(v, lms, cfg, np.random.default_rng(42))
        b_v, b_l = augment_sample(v, lms, cfg, np.random.default_rng(42))
        assert np.array_equal(a_v.data, b_v.data)
        for lid in LandmarkId:
            assert np.array_equal(a_l[lid], b_l[lid])

    def test_intensity_only_leaves_landmarks(self):
        rng = np.random.default_rng(11)
        v = make_volume(rng)
        lms = make_lms(rng)
        cfg = AugConfig(noise_sigma=0.1, brightness_delta=0.3, contrast_range=0.4,
                        blur_sigma=1.0)
        out_v, out_l = augment_sample(v, lms, cfg, np.random.default_rng(1))
        assert not np.array_equal(out_v.data, v.data)
        for lid in LandmarkId:
            assert np.array_equal(out_l[lid], lms[lid])

    def test_magnitudes_validated(self):
        with pytest.raises(ValueError):
            AugConfig(noise_sigma=-0.1)
        with pytest.raises(ValueError):
            AugConfig(flip_enabled=(True, False))


class TestHeatmapConsistency:
    def test_warp_commutes_with_encoding_at_argmax(self):
        # encoding heatmaps from warped landmarks should agree (at the
        # argmax level) with warping heatmaps encoded from the originals
        rng = np.random.default_rng(12)
        edge = 32
        grid = Volume3((edge,) * 3, (1, 1, 1), (0, 0, 0), np.zeros((edge,) * 3))
        tf = AffineTransform(np.eye(3), np.zeros(3))
        for seed in range(5):
            draw_rng = np.random.default_rng(100 + seed)
            lms = LandmarkSet({lid: rng.uniform(10, 22, 3) for lid in LandmarkId})
            cfg = AugConfig(affine_max_rot=0.25, affine_max_shift=2.0,
                            flip_enabled=(True, False, False))
            draw = GeometryDraw.sample(grid, cfg, draw_rng)

            h = encode_heatmaps(lms, tf, sigma_vox=2.0, edge=edge)
            for ch, lid in enumerate(lms.ids()):
                chan_vol = grid.with_data(h.data[ch])
                warped_vol, warped_lms = warp_sample(chan_vol, LandmarkSet({lid: lms[lid]}), draw)
                if ((warped_lms[lid] < 1) | (warped_lms[lid] > edge - 2)).any():
                    continue
                h2 = encode_heatmaps(warped_lms, tf, sigma_vox=2.0, edge=edge)
                a = np.unravel_index(np.argmax(warped_vol.data), warped_vol.data.shape)
                b = np.unravel_index(np.argmax(h2.data[ch]), h2.data[ch].shape)
                dist = np.linalg.norm(np.subtract(a, b))
                assert dist <= 1.0 + 1e-9
