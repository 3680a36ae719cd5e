import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plmnet.geometry import preset
from plmnet.latency import LatencySchedule
from plmnet.plm import (BaseController, ClampEvents, LatencyError, PlmController, PlmKnots, interpolate,
                        plm_act)
from plmnet.policies import BaseModel, TimedActionPredictor, bm_infer
from plmnet.simcore import run_episode


@st.composite
def knots(draw):
    n = draw(st.integers(1, 6))
    gaps = draw(st.lists(st.floats(1e-3, 0.2), min_size=n, max_size=n))
    acts = draw(st.lists(st.floats(-1, 1), min_size=n + 1, max_size=n + 1))
    return PlmKnots(tuple(np.concatenate([[0.0], np.cumsum(gaps)]).tolist()), tuple(acts))


@given(knots(), st.data())
def test_knots_are_exact(k, data):
    j = data.draw(st.integers(0, len(k.delta_ref) - 1))
    assert interpolate(k, k.delta_ref[j]) == k.action_ref[j]


@given(knots(), st.data())
def test_midpoints(k, data):
    j = data.draw(st.integers(0, len(k.delta_ref) - 2)) if len(k.delta_ref) > 1 else None
    if j is None:
        return
    mid = 0.5 * (k.delta_ref[j] + k.delta_ref[j + 1])
    assert interpolate(k, mid) == pytest.approx(0.5 * (k.action_ref[j] + k.action_ref[j + 1]), abs=1e-12)


@given(knots(), st.floats(0, 2))
def test_between_neighbours_and_clamped_beyond(k, x):
    events = ClampEvents()
    y = interpolate(k, x, events)
    d, a = k.delta_ref, k.action_ref
    if x > d[-1]:
        assert y == a[-1] and events.count == 1
    else:
        assert events.count == 0
        if x < d[-1]:
            j = int(np.searchsorted(d, x, side="right")) - 1
            assert min(a[j], a[j + 1]) - 1e-15 <= y <= max(a[j], a[j + 1]) + 1e-15


def test_output_is_clamped():
    k = PlmKnots((0.0, 0.1), (0.5, 3.0))
    assert interpolate(k, 0.1) == 1.0


@pytest.mark.parametrize("delta", [-0.1, math.nan, math.inf])
def test_bad_latency(delta):
    with pytest.raises(LatencyError):
        interpolate(PlmKnots((0.0, 0.1), (0.0, 0.0)), delta)


@pytest.mark.parametrize("d, a", [((0.1, 0.2), (0, 0)), ((0.0, 0.0), (0, 0)), ((0.0,), (0, 1))])
def test_bad_knots(d, a):
    with pytest.raises(ValueError):
        PlmKnots(d, a)


@pytest.fixture(scope="module")
def models():
    bm = BaseModel(13, seed=4).eval()
    return bm, TimedActionPredictor(bm.zo_width, seed=4).eval()


def test_zero_latency_is_the_base_model(models, small_dataset):
    bm, tapm = models
    ctrl = PlmController(bm, tapm)
    for i in range(0, len(small_dataset), 50):
        obs = small_dataset.observation(i)
        a_plm, diag = plm_act(ctrl, obs, 16.7, 0.0)
        assert a_plm == BaseController(bm).act(obs, 16.7, 0.0)[0]
        assert diag["a_0.00"] == bm_infer(bm, obs, 16.7)[0]


def test_closed_loop_with_random_models_counts_clamps(models):
    bm, tapm = models
    ctrl = PlmController(bm, tapm)
    log = run_episode(preset("test_track"), ctrl, LatencySchedule.constant(0.4), 0.05, 1.0)
    assert ctrl.events.count == len(log)
    assert all(d["clamped"] == 1.0 for d in log.diagnostics)


def test_predictor_must_match_encoder():
    bm = BaseModel(13, encoder_widths=(32, 32)).eval()
    with pytest.raises(ValueError):
        PlmController(bm, TimedActionPredictor(64).eval())


@given(knots(), st.data())
def test_second_differences_vanish_inside_a_segment(k, data):
    if len(k.delta_ref) < 2:
        return
    j = data.draw(st.integers(0, len(k.delta_ref) - 2))
    lo, hi = k.delta_ref[j], k.delta_ref[j + 1]
    x = np.linspace(lo, hi, 5)[1:4]
    y = [interpolate(k, v) for v in x]
    assert abs(y[0] - 2 * y[1] + y[2]) < 1e-12


def test_knot_example_from_grid():
    k = PlmKnots((0.0, 0.15, 0.20, 0.25), (0.05, 0.10, 0.20, 0.4))
    assert interpolate(k, 0.175) == pytest.approx(0.15, abs=1e-12)
    assert interpolate(k, 0.20) == 0.20
    events = ClampEvents()
    assert interpolate(k, 0.40, events) == 0.4 and events.count == 1 and events.last_delta == 0.40


def test_grid_latency_returns_predictor_output(models, small_dataset):
    from plmnet.policies import tapm_infer
    bm, tapm = models
    ctrl = PlmController(bm, tapm)
    obs = small_dataset.observation(3)
    a, zo, zv = bm_infer(bm, obs, 16.7)
    preds = tapm_infer(tapm, a, zo, zv)
    got, _ = plm_act(ctrl, obs, 16.7, 0.20)
    assert got == max(-1.0, min(1.0, preds[1]))
