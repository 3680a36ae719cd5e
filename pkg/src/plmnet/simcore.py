"""Kinematic bicycle, observation model, scripted expert and the closed-loop engine."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OffTrackError, Track, wrap_angle
from .latency import DelayBuffer, LatencySchedule

NOMINAL_SPEED = 16.7  # m/s, about 60 km/h
DEFAULT_DT = 0.05
DEFAULT_LOOKAHEADS = tuple(float(d) for d in range(0, 11))
# hand-wheel angle at full steering command, used only for reporting in degrees
HANDWHEEL_DEG = 450.0


class SimulationFault(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.7
    max_wheel_angle: float = math.radians(30.0)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    t: float = 0.0


@dataclass(frozen=True)
class Observation:
    lateral_offset: float
    heading_error: float
    curvature_previews: tuple[float, ...]
    stamp: float

    def features(self) -> np.ndarray:
        return np.array([self.lateral_offset, self.heading_error, *self.curvature_previews])

    def flipped(self) -> "Observation":
        return Observation(-self.lateral_offset, -self.heading_error,
                           tuple(-k for k in self.curvature_previews), self.stamp)


def clamp_action(a: float) -> float:
    return min(1.0, max(-1.0, a))


def _deriv(state: np.ndarray, v: float, yaw_rate_per_v: float) -> np.ndarray:
    psi = state[2]
    return np.array([v * math.cos(psi), v * math.sin(psi), v * yaw_rate_per_v])


def step_vehicle(state: VehicleState, action: float, dt: float,
                 params: VehicleParams = VehicleParams(), tick: int | None = None) -> VehicleState:
    """One RK4 step of the constant-speed kinematic bicycle.

    ``tick`` (when given) sets the new time to ``tick * dt`` exactly instead
    of accumulating ``t + dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not math.isfinite(action):
        raise SimulationFault(f"non-finite action {action!r}")
    phi = clamp_action(action) * params.max_wheel_angle
    kappa = math.tan(phi) / params.wheelbase
    v = state.speed
    y0 = np.array([state.x, state.y, state.heading])
    k1 = _deriv(y0, v, kappa)
    k2 = _deriv(y0 + 0.5 * dt * k1, v, kappa)
    k3 = _deriv(y0 + 0.5 * dt * k2, v, kappa)
    k4 = _deriv(y0 + dt * k3, v, kappa)
    y1 = y0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(y1)):
        raise SimulationFault(f"non-finite state at t={state.t}")
    t1 = tick * dt if tick is not None else state.t + dt
    return VehicleState(float(y1[0]), float(y1[1]), float(y1[2]), v, t1)


def observe(track: Track, state: VehicleState, lookaheads=DEFAULT_LOOKAHEADS) -> Observation:
    return _observe(track, state, lookaheads)[0]


def _observe(track: Track, state: VehicleState, lookaheads) -> tuple[Observation, float]:
    s, e_y, h_ref, _ = track.project(state.x, state.y)
    e_psi = wrap_angle(state.heading - h_ref)
    previews = tuple(track.curvature_at(s + d) for d in lookaheads)
    return Observation(e_y, e_psi, previews, state.t), s


@dataclass(frozen=True)
class ExpertGains:
    k_y: float = 1.0
    k_psi: float = 1.0
    k_ff: float = 2.7 / math.radians(30.0)
    k_soft: float = 1.0  # atan(k_soft * e_y / v) in the cross-track term
    preview_index: int = 0


def expert_policy(obs: Observation, v: float, gains: ExpertGains = ExpertGains()) -> float:
    """Curvature feedforward plus Stanley-like heading and cross-track feedback."""
    k = obs.curvature_previews[gains.preview_index] if obs.curvature_previews else 0.0
    v_hat = max(v, 1.0)
    a = (gains.k_ff * k
         - gains.k_psi * obs.heading_error
         - gains.k_y * math.atan(gains.k_soft * obs.lateral_offset / v_hat))
    return clamp_action(a)


class ExpertController:
    def __init__(self, gains: ExpertGains = ExpertGains()):
        self.gains = gains

    def act(self, obs: Observation, v: float, delta: float):
        return expert_policy(obs, v, self.gains), None


@dataclass
class TrajectoryLog:
    dt: float
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    heading: list = field(default_factory=list)
    speed: list = field(default_factory=list)
    action: list = field(default_factory=list)
    stamp: list = field(default_factory=list)
    delta_sched: list = field(default_factory=list)
    delta_eff: list = field(default_factory=list)
    s: list = field(default_factory=list)
    lateral_offset: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    off_track: bool = False
    off_track_tick: int | None = None
    clamp_events: int = 0  # latencies beyond the predictor's grid (PLM runs only)

    def __len__(self) -> int:
        return len(self.t)

    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y]) if self.t else np.zeros((0, 2))

    def steering(self) -> np.ndarray:
        return np.asarray(self.action, dtype=float)

    BASE_COLUMNS = ("tick", "t", "x", "y", "heading", "speed", "action", "obs_stamp",
                    "delta_sched", "delta_eff", "s", "lateral_offset")

    def to_csv(self) -> str:
        diag_keys = []
        for d in self.diagnostics:
            if d:
                diag_keys = sorted(d)
                break
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.BASE_COLUMNS) + [f"plm.{k}" for k in diag_keys])
        for i in range(len(self)):
            row = [i] + [repr(float(v)) for v in (
                self.t[i], self.x[i], self.y[i], self.heading[i], self.speed[i], self.action[i],
                self.stamp[i], self.delta_sched[i], self.delta_eff[i], self.s[i], self.lateral_offset[i])]
            d = self.diagnostics[i] or {}
            row += [repr(float(d[k])) if k in d else "" for k in diag_keys]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dt: float) -> "TrajectoryLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        log = cls(dt)
        for r in rows:
            log.t.append(float(r["t"]))
            log.x.append(float(r["x"]))
            log.y.append(float(r["y"]))
            log.heading.append(float(r["heading"]))
            log.speed.append(float(r["speed"]))
            log.action.append(float(r["action"]))
            log.stamp.append(float(r["obs_stamp"]))
            log.delta_sched.append(float(r["delta_sched"]))
            log.delta_eff.append(float(r["delta_eff"]))
            log.s.append(float(r["s"]))
            log.lateral_offset.append(float(r["lateral_offset"]))
            d = {k[4:]: float(v) for k, v in r.items() if k.startswith("plm.") and v != ""}
            log.diagnostics.append(d or None)
        return log


def start_state(track: Track, speed: float, s0: float = 0.0, offset: float = 0.0,
                heading_error: float = 0.0) -> VehicleState:
    p = track.point(s0)
    x = p.x - offset * math.sin(p.heading)
    y = p.y + offset * math.cos(p.heading)
    return VehicleState(x, y, p.heading + heading_error, speed, 0.0)


def run_episode(track: Track, controller, latency: LatencySchedule, dt: float = DEFAULT_DT,
                duration: float = 31.0, speed: float = NOMINAL_SPEED,
                params: VehicleParams = VehicleParams(), lookaheads=DEFAULT_LOOKAHEADS,
                init: VehicleState | None = None, max_offset: float | None = None) -> TrajectoryLog:
    """Closed loop: observe, delay, act, integrate.

    The controller receives the delayed observation and the current
    scheduled latency; its action is applied immediately. An episode stops
    early (``log.off_track``) when the vehicle leaves the sanity band or,
    if given, exceeds ``max_offset`` from the centerline.
    """
    n = duration / dt
    if abs(n - round(n)) > 1e-6:
        raise ValueError("duration must be a multiple of dt")
    n = int(round(n))
    state = init if init is not None else start_state(track, speed)
    buf = DelayBuffer.for_schedule(latency, dt)
    log = TrajectoryLog(dt)
    for k in range(n):
        t = k * dt
        state = VehicleState(state.x, state.y, state.heading, state.speed, t)
        try:
            obs, s = _observe(track, state, lookaheads)
        except OffTrackError:
            log.off_track, log.off_track_tick = True, k
            break
        if max_offset is not None and abs(obs.lateral_offset) > max_offset:
            log.off_track, log.off_track_tick = True, k
            break
        buf.push(t, obs)
        delta = latency(t)
        stamp, delayed = buf.pop(t, delta)
        action, diag = controller.act(delayed, state.speed, delta)
        if not math.isfinite(action):
            raise SimulationFault(f"controller returned non-finite action at tick {k}")
        action = clamp_action(action)
        log.t.append(t)
        log.x.append(state.x)
        log.y.append(state.y)
        log.heading.append(state.heading)
        log.speed.append(state.speed)
        log.action.append(action)
        log.stamp.append(stamp)
        log.delta_sched.append(delta)
        log.delta_eff.append(round((t - stamp) / dt) * dt)
        log.s.append(s)
        log.lateral_offset.append(obs.lateral_offset)
        log.diagnostics.append(diag)
        state = step_vehicle(state, action, dt, params, tick=k + 1)
    return log


def steering_to_degrees(a) -> np.ndarray:
    return np.asarray(a) * HANDWHEEL_DEG
