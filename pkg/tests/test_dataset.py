import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plmnet.dataset import (DatasetError, ImitationDataset, Jitter, augment_flip, balance_dataset,
                            build_tapm_dataset, collect_dataset, steering_summary, temporal_split)
from plmnet.geometry import preset
from plmnet.simcore import ExpertController


def _toy(actions, episodes=None):
    a = np.asarray(actions, dtype=float)
    n = len(a)
    ep = np.zeros(n, int) if episodes is None else np.asarray(episodes)
    return ImitationDataset(np.arange(n, dtype=float)[:, None] * np.ones((1, 3)), np.full(n, 16.7), a,
                            np.arange(n) * 0.05, ep, 0.05)


def test_collection_shapes_and_labels(small_dataset):
    ds = small_dataset
    assert ds.features.shape == (len(ds), 13)
    assert len(ds.episodes()) + len(ds.aborted) == 6
    # labels are the clean expert action on the recorded observation
    expert = ExpertController()
    for i in range(0, len(ds), 97):
        assert ds.action[i] == expert.act(ds.observation(i), ds.speed[i], 0.0)[0]


def test_collection_is_seeded():
    tr = preset("train_track")
    a = collect_dataset(tr, episodes=2, duration=2.0, jitter=Jitter(action_noise=0.02), seed=5)
    b = collect_dataset(tr, episodes=2, duration=2.0, jitter=Jitter(action_noise=0.02), seed=5)
    assert a.to_csv() == b.to_csv()


def test_csv_roundtrip(small_dataset):
    back = ImitationDataset.from_csv(small_dataset.to_csv(), small_dataset.dt)
    assert back.to_csv() == small_dataset.to_csv()
    assert np.array_equal(back.features, small_dataset.features)


def test_tapm_labels_are_shifted_actions():
    ds = _toy(np.arange(20) / 100, [0] * 12 + [1] * 8)
    out = build_tapm_dataset(ds, (0.1, 0.2), 0.05)
    # shift of 2 and 4 ticks; last 4 records of every episode dropped
    assert len(out) == 8 + 4
    assert np.allclose(out.future[0], [0.02, 0.04])
    first_ep1 = np.flatnonzero(out.episode == 1)[0]
    assert np.allclose(out.future[first_ep1], [0.14, 0.16])


def test_tapm_grid_must_be_whole_ticks():
    with pytest.raises(DatasetError):
        build_tapm_dataset(_toy(np.zeros(20)), (0.12,), 0.05)


@given(st.lists(st.floats(-1, 1), min_size=5, max_size=300), st.integers(3, 41), st.floats(0.5, 20),
       st.integers(0, 100))
def test_balance_caps_bins_and_keeps_order(actions, bins, ratio, seed):
    ds = _toy(actions)
    out = balance_dataset(ds, bins, ratio, seed)
    assert np.all(np.diff(out.stamp) > 0)
    assert set(out.stamp) <= set(ds.stamp)
    edges = np.linspace(-1, 1, bins + 1)
    before = np.histogram(ds.action, edges)[0]
    after = np.histogram(out.action, edges)[0]
    assert np.all(after <= before)
    # bins below the cap are untouched, over-full bins are all cut to the same cap
    capped = after[after < before]
    assert len(set(capped)) <= 1


def test_balance_reduces_zero_spike():
    ds = _toy([0.0] * 500 + list(np.linspace(-0.5, 0.5, 100)))
    out = balance_dataset(ds, 21, 2.0, 0)
    assert np.sum(out.action == 0.0) < 50


def test_flip():
    f, a, fut = augment_flip(np.ones((2, 3)), np.array([0.1, -0.2]), np.ones((2, 2)))
    assert np.all(f == -1) and np.allclose(a, [-0.1, 0.2]) and np.all(fut == -1)


def test_temporal_split_holds_out_episode_tails():
    ds = _toy(np.zeros(30), [0] * 20 + [1] * 10)
    train, val = temporal_split(ds, 0.1)
    assert len(train) + len(val) == 30
    for e in (0, 1):
        assert train.stamp[train.episode == e].max() < val.stamp[val.episode == e].min()


def test_summary():
    s = steering_summary(np.array([-1.0, 0.0, 1.0]))
    assert s["count"] == 3 and s["mean"] == 0 and s["min"] == -1 and s["50%"] == 0


def test_one_episode_record_count():
    ds = collect_dataset(preset("train_track"), episodes=1, duration=10.0, seed=0)
    assert len(ds) == 200
    assert np.all(np.abs(ds.action) <= 1)


def test_balance_toy_example():
    ds = _toy([0.0] * 100 + [0.5] * 10)
    out = balance_dataset(ds, 21, 1.0, 0)
    assert np.sum(out.action == 0.0) == 10 and np.sum(out.action == 0.5) == 10


def test_balance_uniform_is_unchanged():
    ds = _toy(np.repeat(np.linspace(-0.95, 0.95, 21), 4))
    assert len(balance_dataset(ds, 21, 1.0, 0)) == len(ds)


def test_tapm_labels_exhaustive_and_constant_episode():
    rng = np.random.default_rng(0)
    ds = _toy(rng.uniform(-1, 1, 50))
    grid = (0.15, 0.2, 0.25, 0.3, 0.35)
    out = build_tapm_dataset(ds, grid, 0.05)
    assert len(out) == 50 - 7
    for i in range(len(out)):
        for j, shift in enumerate((3, 4, 5, 6, 7)):
            assert out.future[i, j] == ds.action[i + shift]
    const = build_tapm_dataset(_toy(np.full(20, 0.3)), grid, 0.05)
    assert np.all(const.future == 0.3)


def test_double_flip_is_identity(small_dataset):
    f, a, fut = augment_flip(*augment_flip(small_dataset.features, small_dataset.action,
                                           small_dataset.action[:, None]))
    assert np.array_equal(f, small_dataset.features) and np.array_equal(a, small_dataset.action)


def test_steering_skews_toward_zero(small_dataset):
    assert np.mean(np.abs(small_dataset.action) < 0.02) >= 0.4
