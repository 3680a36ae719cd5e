"""Steering-error statistics and polyline similarity measures.

Curves are ``(n, 2)`` arrays of planar points.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Track

RESAMPLE_POINTS = 500
PCM_OFFSETS = 200
DTSI_WINDOW = 3.0  # s

TRAJECTORY_METRICS = ("pcm", "frechet", "area_between", "curve_length_measure", "dtw", "dtsi_standin")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SteeringReport:
    mae: float
    mse: float
    rmse: float

    def to_dict(self) -> dict:
        return asdict(self)


def steering_errors(run_a, run_b) -> SteeringReport:
    """MAE/MSE/RMSE over the common prefix of two equally sampled series."""
    a = np.asarray(run_a, dtype=float)
    b = np.asarray(run_b, dtype=float)
    n = min(len(a), len(b))
    if n == 0:
        raise MetricError("no overlapping samples")
    d = a[:n] - b[:n]
    mse = float(np.mean(d * d))
    return SteeringReport(float(np.mean(np.abs(d))), mse, math.sqrt(mse))


def _as_curve(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[1] != 2:
        raise MetricError("curves must be (n, 2) arrays")
    if len(c) == 0:
        raise MetricError("empty curve")
    if not np.all(np.isfinite(c)):
        raise MetricError("curve has non-finite coordinates")
    return c


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def _antidiagonal_dp(cost: np.ndarray, combine) -> float:
    """Monotone-coupling DP over a cost matrix, swept one anti-diagonal at a time.

    ``combine(c, best_predecessor)`` gives the cell value.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for k in range(1, n + m - 1):
        i = np.arange(max(0, k - m + 1), min(n, k + 1))
        j = k - i
        up = np.where(i > 0, acc[np.maximum(i - 1, 0), j], np.inf)
        left = np.where(j > 0, acc[i, np.maximum(j - 1, 0)], np.inf)
        diag = np.where((i > 0) & (j > 0), acc[np.maximum(i - 1, 0), np.maximum(j - 1, 0)], np.inf)
        acc[i, j] = combine(cost[i, j], np.minimum(np.minimum(up, left), diag))
    return float(acc[-1, -1])


def dtw(curve_a, curve_b) -> float:
    """Dynamic time warping distance: accumulated Euclidean cost of the best
    monotone alignment that matches both endpoints."""
    a, b = _as_curve(curve_a), _as_curve(curve_b)
    return _antidiagonal_dp(_pairwise(a, b), lambda c, p: c + p)


def discrete_frechet(curve_a, curve_b) -> float:
    a, b = _as_curve(curve_a), _as_curve(curve_b)
    return _antidiagonal_dp(_pairwise(a, b), np.maximum)


def cumulative_length(c: np.ndarray) -> np.ndarray:
    seg = np.sqrt((np.diff(c, axis=0) ** 2).sum(axis=1))
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_at(c: np.ndarray, cum: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(s, cum, c[:, 0]), np.interp(s, cum, c[:, 1])])


def resample(curve, m: int) -> np.ndarray:
    """``m`` points equally spaced in arc length, endpoints included."""
    c = _as_curve(curve)
    cum = cumulative_length(c)
    if cum[-1] <= 0:
        raise MetricError("zero-length curve")
    return resample_at(c, cum, np.linspace(0.0, cum[-1], m))


def _quad_areas(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|area| of quadrilaterals (a_i, a_i+1, b_i+1, b_i) via the shoelace formula.

    Works on stacked inputs of shape (..., m, 2).
    """
    p0, p1 = a[..., :-1, :], a[..., 1:, :]
    p2, p3 = b[..., 1:, :], b[..., :-1, :]

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    return 0.5 * np.abs(cross(p0, p1) + cross(p1, p2) + cross(p2, p3) + cross(p3, p0))


def area_between(curve_a, curve_b, m: int = RESAMPLE_POINTS) -> float:
    """Area enclosed between two curves, paired point-to-point after
    resampling each to ``m`` points by normalized arc length."""
    a, b = _as_curve(curve_a), _as_curve(curve_b)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("need at least two points per curve")
    return float(_quad_areas(resample(a, m), resample(b, m)).sum())


def curve_length_measure(curve_a, curve_b) -> float:
    """Arc-length signature discrepancy of ``curve_b`` against reference ``curve_a``.

    Each reference point is matched to the point of ``curve_b`` at the same
    normalized cumulative length; the log-scaled gaps are accumulated in
    quadrature. Gaps are scaled by the reference's RMS radius about its
    centroid.
    """
    a, b = _as_curve(curve_a), _as_curve(curve_b)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("need at least two points per curve")
    ca, cb = cumulative_length(a), cumulative_length(b)
    if ca[-1] <= 0 or cb[-1] <= 0:
        raise MetricError("zero-length curve")
    matched = resample_at(b, cb, ca / ca[-1] * cb[-1])
    scale = math.sqrt(np.mean(((a - a.mean(axis=0)) ** 2).sum(axis=1)))
    if scale <= 0:
        scale = 1.0
    gap = np.sqrt(((matched - a) ** 2).sum(axis=1))
    return float(np.sqrt(np.sum(np.log1p(gap / scale) ** 2)))


def pcm(curve_a, curve_b, m: int = RESAMPLE_POINTS, offsets: int = PCM_OFFSETS) -> float:
    """Partial curve mapping: slide the shorter curve along the longer one and
    keep the smallest mean separation (paired-quadrilateral area per unit length)."""
    a, b = _as_curve(curve_a), _as_curve(curve_b)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("need at least two points per curve")
    ca, cb = cumulative_length(a), cumulative_length(b)
    if ca[-1] > cb[-1]:
        a, b, ca, cb = b, a, cb, ca
    la, lb = ca[-1], cb[-1]
    if la <= 0:
        raise MetricError("zero-length curve")
    u = np.linspace(0.0, la, m)
    ra = resample_at(a, ca, u)
    slack = lb - la
    shifts = np.linspace(0.0, slack, offsets) if slack > 1e-12 else np.zeros(1)
    s = shifts[:, None] + u[None, :]
    rb = np.stack([np.interp(s, cb, b[:, 0]), np.interp(s, cb, b[:, 1])], axis=-1)
    areas = _quad_areas(np.broadcast_to(ra, rb.shape), rb).sum(axis=1)
    return float(areas.min() / la)


def dtsi_standin(trajectory, track: Track, dt: float, window: float = DTSI_WINDOW) -> float:
    """Windowed stability index of a path sampled every ``dt`` seconds: mean
    over half-overlapping windows of the standard deviation of the lateral
    offset from the centerline, divided by the lane half-width. Lower is
    steadier; a constant offset scores 0."""
    offsets = [track.project(x, y)[1] for x, y in _as_curve(trajectory)]
    return dtsi_from_offsets(offsets, dt, track.lane_width, window)


def dtsi_from_offsets(lateral_offset, dt: float, lane_width: float, window: float = DTSI_WINDOW) -> float:
    e = np.asarray(lateral_offset, dtype=float)
    w = int(round(window / dt))
    if w < 2 or len(e) < w:
        raise MetricError("trajectory shorter than one window")
    stride = max(1, w // 2)
    stds = [e[i:i + w].std() for i in range(0, len(e) - w + 1, stride)]
    return float(np.mean(stds) / (lane_width / 2.0))


def trajectory_report(path: np.ndarray, lateral_offset, centerline: np.ndarray, dt: float,
                      lane_width: float, m: int = RESAMPLE_POINTS, offsets: int = PCM_OFFSETS,
                      window: float = DTSI_WINDOW) -> dict:
    """All six measures of a driven path against a reference centerline."""
    return {
        "pcm": pcm(centerline, path, m, offsets),
        "frechet": discrete_frechet(centerline, path),
        "area_between": area_between(centerline, path, m),
        "curve_length_measure": curve_length_measure(centerline, path),
        "dtw": dtw(centerline, path),
        "dtsi_standin": dtsi_from_offsets(lateral_offset, dt, lane_width, window),
    }


# -- three-arm comparison ---------------------------------------------------

ARMS = ("no_latency", "bm_delayed", "plm")


def _region_slice(s: np.ndarray, lo: float, hi: float) -> slice:
    """First contiguous run of samples whose arc length lies in [lo, hi]."""
    inside = (s >= lo) & (s <= hi)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return slice(0, 0)
    start = idx[0]
    stop = start
    while stop < len(s) and inside[stop]:
        stop += 1
    return slice(start, stop)


def segment_ranges(track: Track) -> dict:
    out = {"full": (0.0, track.total_length)}
    out.update(track.regions)
    return out


def compare_runs(no_latency, bm_delayed, plm, track: Track, ds: float = 1.0,
                 m: int = RESAMPLE_POINTS, offsets: int = PCM_OFFSETS, window: float = DTSI_WINDOW) -> dict:
    """Steering errors of the latency arms against the no-latency arm and
    trajectory measures of every arm against the lane center, for the full
    lap and each named region of the track (centerline sampled every ``ds`` m).
    """
    logs = dict(zip(ARMS, (no_latency, bm_delayed, plm)))
    dts = {round(l.dt, 12) for l in logs.values()}
    if len(dts) != 1:
        raise MetricError("runs use different time steps")
    dt = dts.pop()
    ref = logs["no_latency"]
    report = {"steering": {}, "trajectory": {}, "flags": {}}
    for arm, log in logs.items():
        report["flags"][arm] = {"off_track": bool(log.off_track), "ticks": len(log)}
        if arm != "no_latency":
            report["steering"][arm] = steering_errors(log.action, ref.action).to_dict()
    for seg, (lo, hi) in segment_ranges(track).items():
        centre = track.polyline(ds, lo, hi)
        report["trajectory"][seg] = {}
        for arm, log in logs.items():
            if seg == "full":
                sl = slice(0, len(log))
            else:
                sl = _region_slice(np.asarray(log.s), lo, hi)
            path = log.xy()[sl]
            if len(path) < max(2, int(round(window / dt))):
                report["trajectory"][seg][arm] = None
                continue
            report["trajectory"][seg][arm] = trajectory_report(
                path, np.asarray(log.lateral_offset)[sl], centre, dt, track.lane_width, m, offsets, window)
    report["wins"] = count_wins(report)
    return report


def count_wins(report: dict, better="plm", worse="bm_delayed") -> dict:
    """Per segment, how many trajectory measures are strictly lower for ``better``."""
    wins = {}
    for seg, arms in report["trajectory"].items():
        a, b = arms.get(better), arms.get(worse)
        if a is None or b is None:
            wins[seg] = None
            continue
        wins[seg] = sum(1 for k in TRAJECTORY_METRICS if a[k] < b[k])
    return wins


ARM_LABELS = {"no_latency": "BM, no latency", "bm_delayed": "BM, latency", "plm": "PLM, latency"}


def format_steering_table(report: dict, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'vs. BM, no latency':<22}{'MAE':>10}{'MSE':>10}{'RMSE':>10}")
    for arm in ("bm_delayed", "plm"):
        r = report["steering"].get(arm)
        if r:
            lines.append(f"{ARM_LABELS[arm]:<22}{r['mae']:>10.4f}{r['mse']:>10.4f}{r['rmse']:>10.4f}")
    return "\n".join(lines)


def format_trajectory_table(report: dict, title: str = "") -> str:
    short = {"pcm": "PCM", "frechet": "Frechet", "area_between": "Area", "curve_length_measure": "CurveLen",
             "dtw": "DTW", "dtsi_standin": "DTSI*"}
    lines = [title] if title else []
    lines.append(f"{'segment':<12}{'arm':<18}" + "".join(f"{short[k]:>12}" for k in TRAJECTORY_METRICS))
    for seg, arms in report["trajectory"].items():
        for arm, vals in arms.items():
            if vals is None:
                lines.append(f"{seg:<12}{ARM_LABELS[arm]:<18}{'(no data)':>12}")
                continue
            lines.append(f"{seg:<12}{ARM_LABELS[arm]:<18}" + "".join(f"{vals[k]:>12.4f}" for k in TRAJECTORY_METRICS))
    return "\n".join(lines)
