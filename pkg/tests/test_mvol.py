import json

import numpy as np
import pytest

from cardioviews.mvol import (
    MvolDataError,
    MvolHeaderError,
    MvolSizeError,
    read_landmarks,
    read_mvol,
    write_landmarks,
    write_mvol,
)
from cardioviews.volume import LandmarkId, LandmarkSet, Series4D, Volume3


def make_series(rng, dims=(8, 8, 8), frames=2):
    spacing = (1.5, 1.0, 2.0)
    origin = (-4.0, 2.0, 0.5)
    return Series4D([
        Volume3(dims, spacing, origin, rng.standard_normal(dims).astype(np.float32))
        for _ in range(frames)
    ])


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    s = make_series(rng)
    path = tmp_path / "study.mvol"
    write_mvol(s, path)
    back = read_mvol(path)
    assert back.dims == s.dims
    assert back.spacing == s.spacing
    assert back.origin == s.origin
    assert back.frame_count == s.frame_count
    for a, b in zip(s.frames, back.frames):
        assert np.array_equal(a.data, b.data)


def test_payload_layout_is_x_fastest(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape((2, 2, 2), order="F")
    s = Series4D([Volume3((2, 2, 2), (1, 1, 1), (0, 0, 0), data)])
    path = tmp_path / "t.mvol"
    write_mvol(s, path)
    raw = np.fromfile(tmp_path / "t.mvol.raw", dtype="<f4")
    assert np.array_equal(raw, np.arange(8))


def test_short_payload_is_size_error(tmp_path):
    rng = np.random.default_rng(1)
    s = make_series(rng)
    path = tmp_path / "study.mvol"
    write_mvol(s, path)
    raw = path.with_name("study.mvol.raw")
    blob = raw.read_bytes()
    raw.write_bytes(blob[:-4])  # one float short
    with pytest.raises(MvolSizeError):
        read_mvol(path)


def test_invalid_header_fields(tmp_path):
    rng = np.random.default_rng(2)
    s = make_series(rng)
    path = tmp_path / "study.mvol"
    write_mvol(s, path)
    header = json.loads(path.read_text())
    header["spacing_mm"] = [0.0, 1.0, 1.0]
    path.write_text(json.dumps(header))
    with pytest.raises(MvolHeaderError):
        read_mvol(path)
    header["spacing_mm"] = [1.0, 1.0, 1.0]
    del header["frames"]
    path.write_text(json.dumps(header))
    with pytest.raises(MvolHeaderError):
        read_mvol(path)


def test_non_finite_payload_rejected(tmp_path):
    rng = np.random.default_rng(3)
    s = make_series(rng, frames=1)
    path = tmp_path / "study.mvol"
    write_mvol(s, path)
    raw = path.with_name("study.mvol.raw")
    payload = np.fromfile(raw, dtype="<f4")
    payload[5] = np.nan
    raw.write_bytes(payload.tobytes())
    with pytest.raises(MvolDataError):
        read_mvol(path)


def test_landmark_round_trip(tmp_path):
    ann = {
        0: LandmarkSet({LandmarkId.MV: [1.5, -2.0, 3.0]}),
        2: LandmarkSet({LandmarkId.LVA: [0, 0, 1], LandmarkId.TV: [5, 5, 5]}),
    }
    path = tmp_path / "lm.json"
    write_landmarks(ann, path)
    back = read_landmarks(path)
    assert set(back) == {0, 2}
    assert np.allclose(back[0][LandmarkId.MV], [1.5, -2.0, 3.0])
    assert LandmarkId.AV not in back[2]


def test_single_object_landmark_file(tmp_path):
    path = tmp_path / "one.json"
    path.write_text(json.dumps({"frame": 1, "points": {"PV": [9, 8, 7]}}))
    back = read_landmarks(path)
    assert np.allclose(back[1][LandmarkId.PV], [9, 8, 7])
