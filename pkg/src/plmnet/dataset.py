"""Expert demonstrations, histogram balancing, flip augmentation and future-action labels."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Track
from .latency import LatencySchedule
from .simcore import (DEFAULT_DT, DEFAULT_LOOKAHEADS, NOMINAL_SPEED, ExpertController,
                      Observation, run_episode, start_state)


class DatasetError(ValueError):
    pass


@dataclass
class ImitationDataset:
    """Time-ordered records grouped by episode.

    ``features`` rows are ``[lateral_offset, heading_error, *curvature_previews]``.
    ``future`` holds the shifted expert actions once labels are attached.
    """

    features: np.ndarray  # (M, F)
    speed: np.ndarray  # (M,)
    action: np.ndarray  # (M,)
    stamp: np.ndarray  # (M,)
    episode: np.ndarray  # (M,) int
    dt: float = DEFAULT_DT
    future: np.ndarray | None = None  # (M, N)
    delta_grid: tuple[float, ...] = ()
    aborted: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.action)

    @property
    def is_tapm(self) -> bool:
        return self.future is not None

    def subset(self, idx) -> "ImitationDataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], speed=self.speed[idx],
                       action=self.action[idx], stamp=self.stamp[idx], episode=self.episode[idx],
                       future=None if self.future is None else self.future[idx])

    def episodes(self) -> list[np.ndarray]:
        """Index arrays, one per episode, in order of appearance."""
        out = []
        if len(self) == 0:
            return out
        cuts = np.flatnonzero(np.diff(self.episode)) + 1
        return np.split(np.arange(len(self)), cuts)

    def observation(self, i: int) -> Observation:
        f = self.features[i]
        return Observation(float(f[0]), float(f[1]), tuple(float(k) for k in f[2:]), float(self.stamp[i]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_prev = self.features.shape[1] - 2
        header = ["episode", "stamp", "speed", "action", "lateral_offset", "heading_error"]
        header += [f"kappa_{i}" for i in range(n_prev)]
        if self.future is not None:
            header += [f"future_{d:.2f}" for d in self.delta_grid]
        w.writerow(header)
        for i in range(len(self)):
            row = [int(self.episode[i])] + [repr(float(v)) for v in (self.stamp[i], self.speed[i], self.action[i])]
            row += [repr(float(v)) for v in self.features[i]]
            if self.future is not None:
                row += [repr(float(v)) for v in self.future[i]]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dt: float = DEFAULT_DT) -> "ImitationDataset":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
        if rows.size == 0:
            raise DatasetError("empty dataset file")
        fut_cols = [i for i, h in enumerate(header) if h.startswith("future_")]
        feat_cols = [header.index("lateral_offset"), header.index("heading_error")]
        feat_cols += [i for i, h in enumerate(header) if h.startswith("kappa_")]
        grid = tuple(float(header[i][len("future_"):]) for i in fut_cols)
        return cls(rows[:, feat_cols], rows[:, header.index("speed")], rows[:, header.index("action")],
                   rows[:, header.index("stamp")], rows[:, 0].astype(int), dt,
                   rows[:, fut_cols] if fut_cols else None, grid)


def concat(parts: list[ImitationDataset]) -> ImitationDataset:
    first = parts[0]
    fut = None if first.future is None else np.concatenate([p.future for p in parts])
    return ImitationDataset(np.concatenate([p.features for p in parts]),
                            np.concatenate([p.speed for p in parts]),
                            np.concatenate([p.action for p in parts]),
                            np.concatenate([p.stamp for p in parts]),
                            np.concatenate([p.episode for p in parts]),
                            first.dt, fut, first.delta_grid)


@dataclass(frozen=True)
class Jitter:
    """Per-episode randomization of the start pose and speed, plus optional
    perturbation of the executed steering.

    The perturbation is piecewise constant (``noise_hold`` seconds) with
    standard deviation ``action_noise``; it pushes the vehicle into recovery
    states while the recorded label stays the clean expert action.
    """

    offset: float = 1.0  # m, uniform +-
    heading: float = 0.05  # rad, uniform +-
    speed: float = 1.0  # m/s, uniform +-
    random_start: bool = True
    action_noise: float = 0.0
    noise_hold: float = 0.5  # s


def collect_dataset(track: Track, expert=None, episodes: int = 40, dt: float = DEFAULT_DT,
                    duration: float = 12.0, jitter: Jitter = Jitter(), seed: int = 0,
                    speed: float = NOMINAL_SPEED, lookaheads=DEFAULT_LOOKAHEADS,
                    max_offset: float | None = None, params=None) -> ImitationDataset:
    """Roll out the expert with zero latency and record (observation, speed, action).

    Episodes whose rollout leaves the track are dropped; the indices of the
    dropped episodes are available as ``dataset.aborted``.
    """
    expert = expert or ExpertController()
    rng = np.random.default_rng(seed)
    parts = []
    aborted = []
    kwargs = {} if params is None else {"params": params}
    for ep in range(episodes):
        s0 = rng.uniform(0, track.total_length) if jitter.random_start else 0.0
        off = rng.uniform(-jitter.offset, jitter.offset)
        dpsi = rng.uniform(-jitter.heading, jitter.heading)
        v = speed + rng.uniform(-jitter.speed, jitter.speed)
        init = start_state(track, v, s0, off, dpsi)
        rec = _Recorder(expert, rng, jitter.action_noise, max(1, round(jitter.noise_hold / dt)))
        log = run_episode(track, rec, LatencySchedule.zero(), dt, duration, v,
                          lookaheads=lookaheads, init=init, max_offset=max_offset, **kwargs)
        if log.off_track:
            aborted.append(ep)
            continue
        feats = np.array([o.features() for o in rec.obs])
        n = len(feats)
        parts.append(ImitationDataset(feats, np.full(n, v), np.asarray(rec.labels[:n]),
                                      np.asarray(log.t), np.full(n, ep), dt))
    if not parts:
        raise DatasetError("every episode left the track")
    ds = concat(parts)
    ds.aborted = tuple(aborted)
    return ds


class _Recorder:
    def __init__(self, controller, rng=None, noise=0.0, hold=1):
        self.controller = controller
        self.rng, self.noise, self.hold = rng, noise, hold
        self.obs = []
        self.labels = []
        self._bias = 0.0

    def act(self, obs, v, delta):
        a, diag = self.controller.act(obs, v, delta)
        if self.noise > 0 and len(self.obs) % self.hold == 0:
            self._bias = float(self.rng.normal(0.0, self.noise))
        self.obs.append(obs)
        self.labels.append(a)
        return a + self._bias, diag


def steering_summary(action: np.ndarray) -> dict:
    """Count/mean/std/quartiles/min/max of a steering series."""
    a = np.asarray(action, dtype=float)
    q = np.percentile(a, [25, 50, 75])
    return {"count": int(a.size), "mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0,
            "min": float(a.min()), "25%": float(q[0]), "50%": float(q[1]), "75%": float(q[2]),
            "max": float(a.max())}


def _bin_index(action: np.ndarray, bins: int) -> np.ndarray:
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return np.clip(np.digitize(action, edges[1:-1]), 0, bins - 1)


def reference_bin_count(counts: np.ndarray, zero_bin: int) -> float:
    """Median count over occupied bins, leaving out the bin holding zero steering."""
    others = np.array([c for i, c in enumerate(counts) if c > 0 and i != zero_bin])
    if others.size == 0:
        others = counts[counts > 0]
    return float(np.median(others))


def balance_dataset(ds: ImitationDataset, bins: int = 51, cap_ratio: float = 1.5,
                    seed: int = 0) -> ImitationDataset:
    """Cap every steering-histogram bin at ``cap_ratio`` times the reference count.

    Bins are uniform over [-1, 1]; over-full bins are subsampled without
    replacement and the surviving records keep their original order.
    """
    if bins < 3:
        raise DatasetError("need at least 3 bins")
    if cap_ratio <= 0:
        raise DatasetError("cap_ratio must be positive")
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    which = _bin_index(ds.action, bins)
    counts = np.bincount(which, minlength=bins)
    zero_bin = int(_bin_index(np.array([0.0]), bins)[0])
    cap = max(1, int(math.floor(cap_ratio * reference_bin_count(counts, zero_bin) + 1e-9)))
    rng = np.random.default_rng(seed)
    keep = []
    for b in range(bins):
        idx = np.flatnonzero(which == b)
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(idx)
    keep = np.sort(np.concatenate(keep))
    if keep.size == 0:
        raise DatasetError("balancing removed every record")
    return ds.subset(keep)


def augment_flip(features: np.ndarray, action, future=None):
    """Mirror a record (or batch) left/right: every signed quantity changes sign."""
    if future is None:
        return -features, -action
    return -features, -action, -future


def build_tapm_dataset(ds: ImitationDataset, delta_grid, dt: float | None = None) -> ImitationDataset:
    """Attach, to each record, the expert actions ``delta_j`` later in the same episode.

    The last ``max(shift)`` records of every episode have no complete label
    set and are dropped.
    """
    dt = ds.dt if dt is None else dt
    grid = tuple(float(d) for d in delta_grid)
    if not grid or any(d <= 0 for d in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise DatasetError("delta grid must be positive and strictly increasing")
    shifts = []
    for d in grid:
        k = d / dt
        if abs(k - round(k)) > 1e-9:
            raise DatasetError(f"latency {d} is not a whole number of {dt} s ticks")
        shifts.append(int(round(k)))
    shifts = np.array(shifts)
    smax = int(shifts.max())
    keep, labels = [], []
    for idx in ds.episodes():
        if len(idx) <= smax:
            continue
        base = idx[: len(idx) - smax]
        keep.append(base)
        labels.append(ds.action[base[:, None] + shifts[None, :]])
    if not keep:
        raise DatasetError("no episode is longer than the largest shift")
    keep = np.concatenate(keep)
    out = ds.subset(keep)
    out.future = np.concatenate(labels)
    out.delta_grid = grid
    out.dt = dt
    return out


def temporal_split(ds: ImitationDataset, val_fraction: float = 0.1) -> tuple[ImitationDataset, ImitationDataset]:
    """Hold out the last ``val_fraction`` of every episode."""
    train, val = [], []
    for idx in ds.episodes():
        n_val = max(1, int(round(len(idx) * val_fraction))) if len(idx) > 1 else 0
        train.append(idx[: len(idx) - n_val])
        val.append(idx[len(idx) - n_val:])
    return ds.subset(np.concatenate(train)), ds.subset(np.concatenate(val))
