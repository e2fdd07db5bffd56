import numpy as np
import pytest

from cardioviews.phantom import (
    PhantomParams,
    _sample_anatomy,
    generate_phantom,
    load_dataset,
    phantom_dataset,
    write_dataset,
)
from cardioviews.volume import LandmarkId, world_to_voxel

L = LandmarkId


def small_params(**kw):
    # anatomy scaled down to fit a 48-voxel grid
    base = dict(dims=(48, 48, 48), frames=2, lv_long_mm=(11.0, 14.0),
                lv_short_mm=(6.5, 8.5), wall_mm=(2.0, 3.0),
                valve_radius_mm=(3.0, 3.8), max_shift_mm=3.0, max_rot=0.25)
    base.update(kw)
    return PhantomParams(**base)


class TestGeneratePhantom:
    def test_deterministic(self):
        p = small_params()
        s1, l1, b1 = generate_phantom(p, np.random.default_rng(3))
        s2, l2, b2 = generate_phantom(p, np.random.default_rng(3))
        for a, b in zip(s1.frames, s2.frames):
            assert np.array_equal(a.data, b.data)
        for f in l1:
            for lid in LandmarkId:
                assert np.array_equal(l1[f][lid], l2[f][lid])
        assert b1.min_idx == b2.min_idx and b1.max_idx == b2.max_idx

    def test_all_landmarks_inside_bbox(self):
        p = small_params()
        for seed in range(10):
            s, per_frame, box = generate_phantom(p, np.random.default_rng(seed))
            for f, lms in per_frame.items():
                for lid, pt in lms.items():
                    vox = np.round(world_to_voxel(s.frames[0], pt))
                    assert box.contains_voxel(vox), (seed, f, lid)

    def test_mv_lva_distance_is_lv_long_axis(self):
        p = small_params()
        seed = 11
        series, per_frame, _ = generate_phantom(p, np.random.default_rng(seed))
        anatomy = _sample_anatomy(p, np.random.default_rng(seed))
        lms0 = per_frame[0]
        dist = np.linalg.norm(lms0[L.MV] - lms0[L.LVA])
        assert abs(dist - 2 * anatomy.lv_axes[2]) < 1e-6

    def test_contraction_moves_landmarks(self):
        p = small_params(frames=4, contraction=0.15)
        _, per_frame, _ = generate_phantom(p, np.random.default_rng(5))
        d0 = np.linalg.norm(per_frame[0][L.MV] - per_frame[0][L.LVA])
        d2 = np.linalg.norm(per_frame[2][L.MV] - per_frame[2][L.LVA])
        assert d2 < d0  # mid cycle is contracted

    def test_landmark_topology_preserved(self):
        # construction-time assertions: closest pair >= 4 mm at every frame
        p = small_params(frames=3)
        for seed in range(15):
            _, per_frame, _ = generate_phantom(p, np.random.default_rng(seed))
            for lms in per_frame.values():
                pts = [pt for _, pt in lms.items()]
                for i in range(len(pts)):
                    for j in range(i + 1, len(pts)):
                        assert np.linalg.norm(pts[i] - pts[j]) >= 4.0
                assert (np.linalg.norm(lms[L.MV] - lms[L.LVA])
                        > max(p.valve_radius_mm))

    def test_image_has_structure(self):
        p = small_params()
        s, _, box = generate_phantom(p, np.random.default_rng(0))
        data = s.frames[0].data
        assert data.max() > 0.6       # bright shell voxels exist
        assert data.min() >= 0.0
        assert box.voxel_count() < s.frames[0].nvox  # box is a real crop

    def test_param_validation(self):
        with pytest.raises(ValueError):
            PhantomParams(frames=0)
        with pytest.raises(ValueError):
            PhantomParams(lv_long_mm=(5.0, 4.0))
        with pytest.raises(ValueError):
            PhantomParams(contraction=1.2)


class TestPhantomDataset:
    def test_counts_without_drop(self):
        studies = phantom_dataset(10, small_params(), seed=0)
        assert len(studies) == 10
        for st in studies:
            for lms in st.annotations.values():
                assert len(lms) == 6
        total = sum(len(lms) for st in studies for lms in st.annotations.values())
        assert total == 10 * 2 * 6

    def test_drop_fraction_binomial(self):
        studies = phantom_dataset(30, small_params(frames=1), seed=1,
                                  drop_fraction=0.3)
        total = 30 * 6
        kept = sum(len(st.annotations[0]) for st in studies)
        # binomial(180, 0.7): mean 126, std ~6.1; allow 4 sigma
        assert abs(kept - total * 0.7) < 4 * np.sqrt(total * 0.3 * 0.7)

    def test_ids_unique_and_deterministic(self):
        a = phantom_dataset(5, small_params(), seed=2)
        b = phantom_dataset(5, small_params(), seed=2)
        ids = [st.patient_id for st in a]
        assert len(set(ids)) == 5
        for sa, sb in zip(a, b):
            assert sa.patient_id == sb.patient_id
            assert np.array_equal(sa.series.frames[0].data, sb.series.frames[0].data)

    def test_different_seeds_differ(self):
        a = phantom_dataset(1, small_params(), seed=3)[0]
        b = phantom_dataset(1, small_params(), seed=4)[0]
        assert not np.array_equal(a.series.frames[0].data, b.series.frames[0].data)


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        studies = phantom_dataset(3, small_params(), seed=5, drop_fraction=0.2)
        write_dataset(studies, tmp_path / "ds", extra={"seed": 5})
        back = load_dataset(tmp_path / "ds")
        assert [s.patient_id for s in back] == [s.patient_id for s in studies]
        for sa, sb in zip(studies, back):
            assert sb.series.frame_count == sa.series.frame_count
            for fa, fb in zip(sa.series.frames, sb.series.frames):
                assert np.array_equal(fa.data, fb.data)
            assert sb.bbox.min_idx == sa.bbox.min_idx
            for f, lms in sa.annotations.items():
                assert set(sb.annotations[f].ids()) == set(lms.ids())
                for lid, pt in lms.items():
                    assert np.allclose(sb.annotations[f][lid], pt)
