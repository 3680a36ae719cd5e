"""Latency-aware action selection: knot assembly and piecewise-linear interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .policies import BaseModel, TimedActionPredictor, bm_infer, tapm_infer
from .simcore import Observation, clamp_action


class LatencyError(ValueError):
    pass


@dataclass(frozen=True)
class PlmKnots:
    delta_ref: tuple[float, ...]  # starts at 0.0
    action_ref: tuple[float, ...]

    def __post_init__(self):
        if len(self.delta_ref) != len(self.action_ref):
            raise ValueError("knot vectors differ in length")
        if not self.delta_ref or self.delta_ref[0] != 0.0:
            raise ValueError("first knot must be at zero latency")
        if any(b <= a for a, b in zip(self.delta_ref, self.delta_ref[1:])):
            raise ValueError("knot latencies must be strictly increasing")

    @classmethod
    def assemble(cls, base_action: float, delta_grid, predictions) -> "PlmKnots":
        return cls((0.0, *map(float, delta_grid)), (float(base_action), *map(float, predictions)))


@dataclass
class ClampEvents:
    count: int = 0
    last_delta: float | None = None


def interpolate(knots: PlmKnots, delta: float, events: ClampEvents | None = None) -> float:
    """Action at latency ``delta``.

    Exact knot values at the knots, linear in between, the last knot's value
    beyond the grid (counted in ``events``); finally clamped to [-1, 1].
    """
    if not math.isfinite(delta) or delta < 0:
        raise LatencyError(f"latency must be finite and >= 0, got {delta!r}")
    d, a = knots.delta_ref, knots.action_ref
    if delta >= d[-1]:
        if delta > d[-1] and events is not None:
            events.count += 1
            events.last_delta = delta
        return clamp_action(a[-1])
    for j in range(len(d) - 1):
        if delta == d[j]:
            return clamp_action(a[j])
        if d[j] < delta < d[j + 1]:
            w = (delta - d[j]) / (d[j + 1] - d[j])
            return clamp_action(a[j] + w * (a[j + 1] - a[j]))
    raise AssertionError("unreachable")


class BaseController:
    """The base model used directly as a controller, ignoring latency."""

    def __init__(self, bm: BaseModel):
        self.bm = bm.eval()

    def act(self, obs: Observation, v: float, delta: float):
        a, _, _ = bm_infer(self.bm, obs, v)
        return clamp_action(a), None


class PlmController:
    def __init__(self, bm: BaseModel, tapm: TimedActionPredictor):
        self.bm = bm.eval()
        self.tapm = tapm.eval()
        if self.tapm.in_zo.sizes[0] != bm.zo_width:
            raise ValueError("predictor does not match the base model's feature width")
        self.events = ClampEvents()

    @property
    def delta_grid(self) -> tuple[float, ...]:
        return self.tapm.delta_grid

    def act(self, obs: Observation, v: float, delta: float):
        return plm_act(self, obs, v, delta)


def plm_act(ctrl: PlmController, delayed_obs: Observation, v: float, delta_now: float):
    """Returns ``(action, diagnostics)``; diagnostics hold the knot actions."""
    a_bm, zo, zv = bm_infer(ctrl.bm, delayed_obs, v)
    preds = tapm_infer(ctrl.tapm, a_bm, zo, zv)
    knots = PlmKnots.assemble(a_bm, ctrl.delta_grid, preds)
    before = ctrl.events.count
    action = interpolate(knots, delta_now, ctrl.events)
    diag = {f"a_{d:.2f}": v for d, v in zip(knots.delta_ref, knots.action_ref)}
    diag["delta_now"] = delta_now
    diag["clamped"] = float(ctrl.events.count > before)
    return action, diag
