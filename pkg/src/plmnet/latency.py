"""Latency schedules and the delayed-observation buffer."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

# stamps are multiples of the tick; comparisons need a little slack
STAMP_EPS = 1e-9


@dataclass(frozen=True)
class LatencySchedule:
    """``kind`` is one of "zero", "constant", "piecewise_random".

    For "piecewise_random" a value is drawn uniformly from [lo, hi] at t=0
    and redrawn every ``hold`` seconds.
    """

    kind: str = "zero"
    delta: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    hold: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "piecewise_random"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not (self.delta >= 0 and math.isfinite(self.delta)):
            raise ValueError("constant latency must be finite and >= 0")
        if self.kind == "piecewise_random":
            if not 0 <= self.lo <= self.hi:
                raise ValueError("need 0 <= lo <= hi")
            if self.hold <= 0:
                raise ValueError("hold must be positive")

    @classmethod
    def zero(cls) -> "LatencySchedule":
        return cls("zero")

    @classmethod
    def constant(cls, delta: float) -> "LatencySchedule":
        return cls("constant", delta=delta, lo=delta, hi=delta)

    @classmethod
    def piecewise_random(cls, lo: float, hi: float, hold: float = 1.0, seed: int = 0) -> "LatencySchedule":
        return cls("piecewise_random", lo=lo, hi=hi, hold=hold, seed=seed)

    @property
    def bounds(self) -> tuple[float, float]:
        if self.kind == "zero":
            return 0.0, 0.0
        if self.kind == "constant":
            return self.delta, self.delta
        return self.lo, self.hi

    def __call__(self, t: float) -> float:
        return schedule_delta(self, t)

    def label(self) -> str:
        if self.kind == "zero":
            return "none"
        if self.kind == "constant":
            return f"const_{self.delta:.2f}"
        return f"tv_{self.lo:.2f}_{self.hi:.2f}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "lo": self.lo, "hi": self.hi,
                "hold": self.hold, "seed": self.seed}


def _window_value(seed: int, window: int, lo: float, hi: float) -> float:
    # one independent stream per hold window keeps lookup O(1) and order-free
    rng = np.random.default_rng([seed, window])
    return float(rng.uniform(lo, hi))


def schedule_delta(sched: LatencySchedule, t: float) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if sched.kind == "zero":
        return 0.0
    if sched.kind == "constant":
        return sched.delta
    window = int(math.floor(t / sched.hold + STAMP_EPS))
    return _window_value(sched.seed, window, sched.lo, sched.hi)


def quantize(delta: float, dt: float) -> float:
    """Latency rounded up to whole ticks."""
    return math.ceil(delta / dt - STAMP_EPS) * dt


class BufferEmpty(RuntimeError):
    pass


class DelayBuffer:
    """Timestamped observation queue serving the newest entry at least ``delta`` old.

    Entries are kept (not consumed) so that a latency that grows again can
    reach back to older observations, up to ``capacity`` entries.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    @classmethod
    def for_schedule(cls, sched: LatencySchedule, dt: float) -> "DelayBuffer":
        return cls(math.ceil(sched.bounds[1] / dt - STAMP_EPS) + 2)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, stamp: float, obs) -> None:
        if self._items and stamp <= self._items[-1][0]:
            raise ValueError(f"stamps must increase: {stamp} after {self._items[-1][0]}")
        self._items.append((stamp, obs))

    def pop(self, t: float, delta: float):
        """Return ``(stamp, obs)`` for the newest stamp <= t - delta.

        During warm-up (nothing old enough yet) the oldest entry is served.
        """
        if not self._items:
            raise BufferEmpty("pop on empty delay buffer")
        limit = t - delta + STAMP_EPS
        for stamp, obs in reversed(self._items):
            if stamp <= limit:
                return stamp, obs
        return self._items[0]


def buffer_push(buf: DelayBuffer, stamp: float, obs) -> None:
    buf.push(stamp, obs)


def buffer_pop(buf: DelayBuffer, t: float, delta: float):
    return buf.pop(t, delta)[1]
