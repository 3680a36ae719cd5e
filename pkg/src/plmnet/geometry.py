"""Line/arc centerline tracks with arc-length parameterization and projection.

Sign conventions: heading is measured counter-clockwise from +x, positive
curvature turns left, and the lateral offset of a point is positive on the
left of the travel direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

G1_TOL = 1e-9


class TrackError(ValueError):
    """Raised for malformed track descriptions."""


class OffTrackError(RuntimeError):
    """Raised when a query point is too far from the centerline."""


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Segment:
    kind: str  # "line" | "arc"
    length: float
    curvature: float
    s0: float
    x0: float
    y0: float
    heading0: float

    @property
    def s1(self) -> float:
        return self.s0 + self.length

    def pose(self, u: float) -> tuple[float, float, float]:
        """Pose at local arc length ``u`` in [0, length]."""
        k = self.curvature
        h = self.heading0 + k * u
        if k == 0.0:
            return (self.x0 + u * math.cos(self.heading0),
                    self.y0 + u * math.sin(self.heading0), h)
        x = self.x0 + (math.sin(h) - math.sin(self.heading0)) / k
        y = self.y0 - (math.cos(h) - math.cos(self.heading0)) / k
        return x, y, h

    def end_pose(self) -> tuple[float, float, float]:
        return self.pose(self.length)

    def nearest(self, px: float, py: float) -> tuple[float, float]:
        """Local arc length of the nearest point and its squared distance."""
        if self.curvature == 0.0:
            c, s = math.cos(self.heading0), math.sin(self.heading0)
            u = (px - self.x0) * c + (py - self.y0) * s
            u = min(max(u, 0.0), self.length)
        else:
            k = self.curvature
            r = 1.0 / k
            cx = self.x0 - r * math.sin(self.heading0)
            cy = self.y0 + r * math.cos(self.heading0)
            dx, dy = px - cx, py - cy
            if math.hypot(dx, dy) < 1e-12:
                u = 0.0
            else:
                # angle of start point around the center, then sweep in the travel direction
                a0 = math.atan2(self.y0 - cy, self.x0 - cx)
                a = math.atan2(dy, dx)
                sweep = (a - a0) % (2.0 * math.pi)
                if k < 0:
                    sweep = (-(a - a0)) % (2.0 * math.pi)
                u = sweep * abs(r)
                if u > self.length:
                    # outside the arc span: pick the closer endpoint
                    x1, y1, _ = self.end_pose()
                    d_end = (px - x1) ** 2 + (py - y1) ** 2
                    d_start = (px - self.x0) ** 2 + (py - self.y0) ** 2
                    u = self.length if d_end < d_start else 0.0
        x, y, _ = self.pose(u)
        return u, (px - x) ** 2 + (py - y) ** 2


@dataclass(frozen=True)
class CenterlinePoint:
    s: float
    x: float
    y: float
    heading: float
    curvature: float


@dataclass(frozen=True)
class Track:
    segments: tuple[Segment, ...]
    lane_width: float = 3.5
    closed: bool = False
    name: str = "custom"
    # named s-ranges used for per-segment trajectory analysis
    regions: dict = field(default_factory=dict)

    @property
    def total_length(self) -> float:
        return self.segments[-1].s1

    @property
    def min_turning_radius(self) -> float:
        ks = [abs(seg.curvature) for seg in self.segments if seg.curvature != 0.0]
        return 1.0 / max(ks) if ks else math.inf

    def _wrap_s(self, s: float) -> float:
        if self.closed:
            return s % self.total_length
        return min(max(s, 0.0), self.total_length)

    def segment_index(self, s: float) -> int:
        s = self._wrap_s(s)
        for i, seg in enumerate(self.segments):
            if s < seg.s1:
                return i
        return len(self.segments) - 1

    def point(self, s: float) -> CenterlinePoint:
        s = self._wrap_s(s)
        seg = self.segments[self.segment_index(s)]
        x, y, h = seg.pose(s - seg.s0)
        return CenterlinePoint(s, x, y, h, seg.curvature)

    def curvature_at(self, s: float) -> float:
        return self.segments[self.segment_index(s)].curvature

    def project(self, px: float, py: float) -> tuple[float, float, float, float]:
        """Global nearest centerline point of (px, py).

        Returns ``(s, lateral_offset, heading_ref, curvature_ref)``.
        Raises OffTrackError beyond five lane widths.
        """
        best = None
        for seg in self.segments:
            u, d2 = seg.nearest(px, py)
            if best is None or d2 < best[2] - 1e-18:
                best = (seg, u, d2)
        seg, u, d2 = best
        if math.sqrt(d2) > 5.0 * self.lane_width:
            raise OffTrackError(f"point ({px:.3f}, {py:.3f}) is {math.sqrt(d2):.2f} m from the centerline")
        x, y, h = seg.pose(u)
        offset = -(px - x) * math.sin(h) + (py - y) * math.cos(h)
        s = seg.s0 + u
        if self.closed and s >= self.total_length:
            s -= self.total_length
        return s, offset, wrap_angle(h), seg.curvature

    def sample(self, ds: float, s_start: float = 0.0, s_end: float | None = None) -> list[CenterlinePoint]:
        return sample_centerline(self, ds, s_start, s_end)

    def polyline(self, ds: float, s_start: float = 0.0, s_end: float | None = None) -> np.ndarray:
        pts = sample_centerline(self, ds, s_start, s_end)
        return np.array([[p.x, p.y] for p in pts])


def build_track(spec: list[dict], lane_width: float = 3.5, closed: bool | None = None,
                start: tuple[float, float, float] = (0.0, 0.0, 0.0), name: str = "custom",
                regions: dict | None = None) -> Track:
    """Chain line/arc descriptors ``{"type", "length", "curvature"}`` into a Track.

    When ``closed`` is None the track is treated as closed if its end pose
    returns to the start pose.
    """
    if not spec:
        raise TrackError("track needs at least one segment")
    x, y, h = start
    s = 0.0
    segs = []
    for i, d in enumerate(spec):
        kind = d.get("type", "line")
        length = float(d["length"])
        k = float(d.get("curvature", 0.0))
        if length <= 0:
            raise TrackError(f"segment {i}: length must be positive")
        if kind == "line":
            if k != 0.0:
                raise TrackError(f"segment {i}: line with nonzero curvature")
        elif kind == "arc":
            if k == 0.0:
                raise TrackError(f"segment {i}: arc needs nonzero curvature")
        else:
            raise TrackError(f"segment {i}: unknown type {kind!r}")
        if "start" in d:
            # explicit pose; must agree with the previous end pose
            x, y, h = (float(v) for v in d["start"])
        seg = Segment(kind, length, k, s, x, y, h)
        if segs:
            px, py, ph = segs[-1].end_pose()
            if math.hypot(px - x, py - y) > G1_TOL or abs(wrap_angle(ph - h)) > G1_TOL:
                raise TrackError(f"G1 discontinuity at junction {i}")
        segs.append(seg)
        x, y, h = seg.end_pose()
        s += length
    ex, ey, eh = segs[-1].end_pose()
    returns = math.hypot(ex - start[0], ey - start[1]) <= G1_TOL and abs(wrap_angle(eh - start[2])) <= G1_TOL
    if closed is None:
        closed = returns
    elif closed and not returns:
        raise TrackError(f"G1 discontinuity at junction {len(segs)} (closure): "
                         f"end pose ({ex:.6g}, {ey:.6g}, {eh:.6g}) does not meet the start")
    return Track(tuple(segs), lane_width, closed, name, dict(regions or {}))


def sample_centerline(track: Track, ds: float, s_start: float = 0.0,
                      s_end: float | None = None) -> list[CenterlinePoint]:
    """Points at s_start, s_start + ds, ... up to and including s_end."""
    total = track.total_length
    if s_end is None:
        s_end = total
    if not 0 < ds <= max(total, s_end - s_start):
        raise ValueError("ds must be in (0, total_length]")
    n = int(math.floor((s_end - s_start) / ds + 1e-9))
    out = []
    for i in range(n + 1):
        s = s_start + i * ds
        seg = track.segments[track.segment_index(s)]
        local = track._wrap_s(s) - seg.s0
        x, y, h = seg.pose(local)
        out.append(CenterlinePoint(s, x, y, h, seg.curvature))
    return out


def project_to_centerline(track: Track, p: tuple[float, float]) -> tuple[float, float, float, float]:
    return track.project(p[0], p[1])


def _solve_closing_lines(spec: list[dict], i: int, j: int) -> list[dict]:
    """Set the lengths of line segments i and j so the chain returns to the origin."""
    spec = [dict(d) for d in spec]
    for k in (i, j):
        spec[k]["length"] = 1.0

    def end_with(li: float, lj: float) -> tuple[float, float]:
        spec[i]["length"], spec[j]["length"] = li, lj
        t = build_track(spec, closed=False)
        ex, ey, _ = t.segments[-1].end_pose()
        return ex, ey

    # end position is affine in the two lengths
    e00 = np.array(end_with(1.0, 1.0))
    e10 = np.array(end_with(2.0, 1.0)) - e00
    e01 = np.array(end_with(1.0, 2.0)) - e00
    A = np.column_stack([e10, e01])
    delta = np.linalg.solve(A, -e00)
    spec[i]["length"] = 1.0 + float(delta[0])
    spec[j]["length"] = 1.0 + float(delta[1])
    if spec[i]["length"] <= 0 or spec[j]["length"] <= 0:
        raise TrackError("closing lines came out non-positive")
    return spec


def _arc(radius: float, degrees: float, left: bool = True) -> dict:
    k = 1.0 / radius if left else -1.0 / radius
    return {"type": "arc", "length": radius * math.radians(degrees), "curvature": k}


def _line(length: float) -> dict:
    return {"type": "line", "length": length, "curvature": 0.0}


def _regions(spec: list[dict], straight: int, left: int, right: int, pad: float = 0.0) -> dict:
    starts = np.concatenate([[0.0], np.cumsum([d["length"] for d in spec])])
    return {name: (float(starts[k]) - pad, float(starts[k + 1]) + pad)
            for name, k in (("straight", straight), ("left_turn", left), ("right_turn", right))}


def _test_track_spec() -> list[dict]:
    spec = [
        _line(120.0),
        _arc(50.0, 90.0),
        _line(110.0),
        _arc(40.0, 90.0),
        _line(30.0),
        _arc(35.0, 90.0),
        _arc(35.0, 90.0, left=False),
        _line(80.0),
        _arc(45.0, 90.0),
        _line(1.0),
        _arc(50.0, 90.0),
        _line(1.0),
    ]
    return _solve_closing_lines(spec, 9, 11)


def _train_track_spec() -> list[dict]:
    spec = [
        _line(90.0),
        _arc(55.0, 60.0),
        _arc(38.0, 60.0, left=False),
        _line(45.0),
        _arc(42.0, 120.0),
        _line(40.0),
        _arc(33.0, 90.0, left=False),
        _arc(37.0, 90.0),
        _line(30.0),
        _arc(48.0, 90.0),
        _line(1.0),
        _arc(52.0, 150.0),
        _line(1.0),
    ]
    return _solve_closing_lines(spec, 10, 12)


def _test_track() -> Track:
    spec = _test_track_spec()
    return build_track(spec, closed=True, name="test_track",
                       regions=_regions(spec, straight=2, left=3, right=6, pad=5.0))


def _train_track() -> Track:
    spec = _train_track_spec()
    return build_track(spec, closed=True, name="train_track",
                       regions=_regions(spec, straight=3, left=4, right=6, pad=5.0))


PRESETS = {"test_track": _test_track, "train_track": _train_track}


def preset(name: str) -> Track:
    try:
        return PRESETS[name]()
    except KeyError:
        raise TrackError(f"unknown track preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_track(path_or_name: str | Path) -> Track:
    """A preset name or a JSON file.

    File layout::

        {"lane_width": 3.5, "closed": true,
         "start": [0, 0, 0],
         "segments": [{"type": "line", "length": 50, "curvature": 0}, ...],
         "regions": {"straight": [0, 50], ...}}
    """
    if str(path_or_name) in PRESETS:
        return PRESETS[str(path_or_name)]()
    data = json.loads(Path(path_or_name).read_text())
    regions = {k: tuple(v) for k, v in data.get("regions", {}).items()}
    return build_track(data["segments"], lane_width=data.get("lane_width", 3.5),
                       closed=data.get("closed"), start=tuple(data.get("start", (0.0, 0.0, 0.0))),
                       name=data.get("name", Path(path_or_name).stem), regions=regions)


def dump_track(track: Track) -> dict:
    s0 = track.segments[0]
    return {
        "name": track.name,
        "lane_width": track.lane_width,
        "closed": track.closed,
        "start": [s0.x0, s0.y0, s0.heading0],
        "segments": [{"type": s.kind, "length": s.length, "curvature": s.curvature} for s in track.segments],
        "regions": {k: list(v) for k, v in track.regions.items()},
    }
