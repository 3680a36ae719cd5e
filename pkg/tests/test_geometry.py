import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plmnet.geometry import (OffTrackError, TrackError, build_track, dump_track, load_track, preset,
                             wrap_angle)


@pytest.fixture(scope="module")
def tracks():
    return {name: preset(name) for name in ("test_track", "train_track")}


@pytest.mark.parametrize("name", ["test_track", "train_track"])
def test_presets_close_on_themselves(tracks, name):
    tr = tracks[name]
    assert tr.closed
    start, end = tr.segments[0], tr.segments[-1]
    x, y, h = end.end_pose()
    assert math.hypot(x - start.x0, y - start.y0) < 1e-6
    assert abs(wrap_angle(h - start.heading0)) < 1e-9


@pytest.mark.parametrize("name", ["test_track", "train_track"])
def test_presets_have_analysis_regions(tracks, name):
    tr = tracks[name]
    assert set(tr.regions) == {"straight", "left_turn", "right_turn"}
    for lo, hi in tr.regions.values():
        assert 0 <= lo < hi <= tr.total_length


def test_segments_are_continuous(tracks):
    for tr in tracks.values():
        for a, b in zip(tr.segments, tr.segments[1:]):
            x, y, h = a.end_pose()
            assert math.hypot(x - b.x0, y - b.y0) < 1e-9
            assert abs(wrap_angle(h - b.heading0)) < 1e-12
            assert abs(a.s1 - b.s0) < 1e-9


@given(st.floats(0, 1), st.floats(-3.0, 3.0))
def test_project_inverts_offset(frac, offset):
    tr = preset("test_track")
    s = frac * tr.total_length * 0.999
    p = tr.point(s)
    px = p.x - offset * math.sin(p.heading)
    py = p.y + offset * math.cos(p.heading)
    s2, off2, _, _ = tr.project(px, py)
    assert off2 == pytest.approx(offset, abs=1e-6)
    ds = abs(s2 - p.s)
    assert min(ds, tr.total_length - ds) < 1e-6


def test_project_far_point_raises(tracks):
    with pytest.raises(OffTrackError):
        tracks["test_track"].project(1e4, 1e4)


def test_sample_spacing(tracks):
    pts = tracks["test_track"].polyline(1.0)
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.all(steps <= 1.0 + 1e-9)


def test_dump_load_roundtrip(tmp_path, tracks):
    tr = tracks["train_track"]
    path = tmp_path / "t.json"
    path.write_text(json.dumps(dump_track(tr)))
    back = load_track(path)
    assert back.total_length == pytest.approx(tr.total_length)
    for s in np.linspace(0, tr.total_length, 37, endpoint=False):
        a, b = tr.point(s), back.point(s)
        assert (a.x, a.y) == pytest.approx((b.x, b.y), abs=1e-9)


def test_unknown_preset():
    with pytest.raises(TrackError):
        preset("nope")


@pytest.mark.parametrize("spec, closed", [
    ([], None),
    ([{"type": "line", "length": 10.0, "curvature": 0.1}], False),
    ([{"type": "arc", "length": 10.0, "curvature": 0.0}], False),
    ([{"type": "line", "length": -1.0}], False),
    ([{"type": "spiral", "length": 1.0}], False),
    ([{"type": "line", "length": 10.0}], True),
    ([{"type": "line", "length": 10.0}, {"type": "line", "length": 5.0, "start": [20.0, 0.0, 0.0]}], False),
])
def test_build_rejects_bad_specs(spec, closed):
    with pytest.raises(TrackError):
        build_track(spec, closed=closed)


def test_single_line():
    tr = build_track([{"type": "line", "length": 100.0}])
    assert tr.total_length == 100.0 and not tr.closed
    assert tr.project(3.0, 0.7)[:2] == pytest.approx((3.0, 0.7))


def test_full_circle_closes():
    k = 0.05
    tr = build_track([{"type": "arc", "length": 2 * math.pi / k, "curvature": k}])
    assert tr.closed
    assert all(p.curvature == k for p in tr.sample(3.7))
    # the circle is centred at (0, 20); a point at radius 19 lies 1 m inside (left of travel)
    s, off, _, _ = tr.project(0.0, 1.0)
    assert off == pytest.approx(1.0, abs=1e-9) and s == pytest.approx(0.0, abs=1e-9)


def test_sampled_curvature_is_exact(tracks):
    tr = tracks["test_track"]
    for p in tr.sample(2.5):
        assert p.curvature == tr.segments[tr.segment_index(p.s)].curvature


def test_chord_length_converges(tracks):
    tr = tracks["test_track"]
    errs = []
    for ds in (8.0, 2.0, 0.5, 0.1):
        samples = tr.sample(ds)
        pts = np.array([[p.x, p.y] for p in samples])
        errs.append(abs(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() - (samples[-1].s - samples[0].s)))
    assert errs[0] > errs[1] > errs[2] > errs[3]
    assert errs[3] < 1e-3


def test_projection_is_continuous_across_seam(tracks):
    tr = tracks["test_track"]
    p0 = tr.segments[0]
    prev = None
    for dx in np.linspace(-1.0, 1.0, 41):
        x = p0.x0 + dx * math.cos(p0.heading0)
        y = p0.y0 + dx * math.sin(p0.heading0)
        s = tr.project(x, y)[0]
        if prev is not None:
            step = abs(s - prev)
            assert min(step, tr.total_length - step) <= 0.05 + 1e-9
        prev = s
