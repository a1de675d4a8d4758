"""Core domain types and geometric primitives.

Ego/agent states, arc-length parameterized routes, scene contexts and
trajectories, plus the projection / interpolation / oriented-box helpers
everything else is built on.  All types are immutable value data after
construction and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

TICK_DT = 0.2
HORIZON_STEPS = 30  # 6 s plan at 0.2 s steps
HISTORY_STEPS = 5  # 1 s of past at 0.2 s steps

# Default ego footprint (length, width); the planner never learns these.
EGO_LENGTH = 4.9
EGO_WIDTH = 2.0


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the principal value in (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    wrapped = np.remainder(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # remainder maps -pi to -pi; push onto the (-pi, pi] convention
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def angle_diff(a: float, b: float) -> float:
    """Shortest signed angular difference a - b, in (-pi, pi]."""
    return wrap_angle(a - b)


class AgentKind(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    BICYCLIST = "bicyclist"


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    theta: float
    v: float
    a: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))
        object.__setattr__(self, "v", max(0.0, self.v))

    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class AgentTrack:
    id: str
    kind: AgentKind
    pose: tuple[float, float, float]
    extent: tuple[float, float]  # (length, width)
    v: float
    has_lane: bool = False

    def __post_init__(self):
        length, width = self.extent
        if length <= 0 or width <= 0:
            raise ValueError(f"agent {self.id}: non-positive extent {self.extent}")
        if self.v < 0:
            raise ValueError(f"agent {self.id}: negative speed {self.v}")
        x, y, th = self.pose
        object.__setattr__(self, "pose", (x, y, wrap_angle(th)))


class RouteSpec:
    """A single lane centerline as a densified, arc-length parameterized polyline.

    Waypoints are densified to <= `max_spacing` meters at construction so that
    projection and discrete-curvature estimates stay stable.  The speed limit
    is piecewise constant over arclength.
    """

    def __init__(self, centerline, speed_limit=15.0, lane_half_width=1.85,
                 max_spacing=1.0):
        pts = np.asarray(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("centerline must be an (N>=2, 2) array of waypoints")
        self.points = _densify(pts, max_spacing)
        seg = np.diff(self.points, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("centerline has duplicate consecutive waypoints")
        self.cumulative_arclength = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.segment_headings = np.arctan2(seg[:, 1], seg[:, 0])
        self.lane_half_width = float(lane_half_width)
        if np.isscalar(speed_limit):
            self._limit_breaks = np.array([0.0])
            self._limit_values = np.array([float(speed_limit)])
        else:
            breaks, values = zip(*speed_limit)
            self._limit_breaks = np.asarray(breaks, dtype=float)
            self._limit_values = np.asarray(values, dtype=float)
        if np.any(self._limit_values <= 0):
            raise ValueError("speed limit must be positive everywhere")

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def speed_limit_at(self, s):
        """Piecewise-constant speed limit at arclength s (scalar or array)."""
        idx = np.searchsorted(self._limit_breaks, np.asarray(s, dtype=float), side="right") - 1
        idx = np.clip(idx, 0, len(self._limit_values) - 1)
        out = self._limit_values[idx]
        return float(out) if np.isscalar(s) else out

    def speed_limit_pieces(self):
        return list(zip(self._limit_breaks.tolist(), self._limit_values.tolist()))

    def pose_at(self, s):
        """(x, y, heading) on the centerline at arclength s.

        Arclengths beyond either end extrapolate along the end tangent, so
        speed profiles that run off the route stay well defined.
        """
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        cum = self.cumulative_arclength
        idx = np.clip(np.searchsorted(cum, s_arr, side="right") - 1, 0, len(cum) - 2)
        ds = s_arr - cum[idx]
        head = self.segment_headings[idx]
        x = self.points[idx, 0] + ds * np.cos(head)
        y = self.points[idx, 1] + ds * np.sin(head)
        if np.isscalar(s):
            return float(x[0]), float(y[0]), float(head[0])
        return x, y, head


def _densify(points: np.ndarray, max_spacing: float) -> np.ndarray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        d = float(np.hypot(*(b - a)))
        if d <= 1e-12:
            continue
        n = max(1, int(math.ceil(d / max_spacing)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return np.asarray(out)


def project_to_route(p, route: RouteSpec):
    """Project a point onto the route polyline.

    Returns (arclength, lateral_offset, route_heading) of the closest point;
    lateral offset is signed positive to the left of the route direction.
    """
    s, lat, head, _ = _project_many(np.asarray(p, dtype=float)[None, :], route)
    return float(s[0]), float(lat[0]), float(head[0])


def _project_many(points: np.ndarray, route: RouteSpec):
    """Vectorized projection of an (N, 2) array of points onto the route.

    Returns arrays (arclength, lateral_offset, heading, distance).
    """
    a = route.points[:-1]  # (M, 2)
    b = route.points[1:]
    ab = b - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    ap = points[:, None, :] - a[None, :, :]  # (N, M, 2)
    t = np.clip(np.einsum("nmj,mj->nm", ap, ab) / seg_len2, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    delta = points[:, None, :] - closest
    dist2 = np.einsum("nmj,nmj->nm", delta, delta)
    best = np.argmin(dist2, axis=1)
    rows = np.arange(points.shape[0])
    t_best = t[rows, best]
    seg_len = np.sqrt(seg_len2)
    s = route.cumulative_arclength[best] + t_best * seg_len[best]
    head = route.segment_headings[best]
    d = delta[rows, best]
    # sign: positive when the point lies to the left of the segment direction
    cross = ab[best, 0] * d[:, 1] - ab[best, 1] * d[:, 0]
    dist = np.sqrt(dist2[rows, best])
    lat = np.where(cross >= 0, dist, -dist)
    return s, lat, head, dist


def obb_corners(cx, cy, theta, length, width):
    """Corner coordinates of an oriented box, shape (..., 4, 2)."""
    cx = np.asarray(cx, dtype=float)
    cy = np.asarray(cy, dtype=float)
    c, s = np.cos(np.asarray(theta, dtype=float)), np.sin(np.asarray(theta, dtype=float))
    hl, hw = length / 2.0, width / 2.0
    lx = np.stack([hl, hl, -hl, -hl], axis=-1) * np.ones_like(cx)[..., None]
    ly = np.stack([hw, -hw, -hw, hw], axis=-1) * np.ones_like(cx)[..., None]
    x = cx[..., None] + lx * np.asarray(c)[..., None] - ly * np.asarray(s)[..., None]
    y = cy[..., None] + lx * np.asarray(s)[..., None] + ly * np.asarray(c)[..., None]
    return np.stack([x, y], axis=-1)


def obb_overlap(box_a, box_b) -> bool:
    """Separating-axis intersection test for two oriented rectangles.

    Boxes are (center_x, center_y, theta, length, width).
    """
    a = np.array([box_a], dtype=float)
    b = np.array([box_b], dtype=float)
    if a[0, 3] <= 0 or a[0, 4] <= 0 or b[0, 3] <= 0 or b[0, 4] <= 0:
        raise ValueError("oriented boxes need positive extents")
    return bool(obb_overlap_many(a, b)[0])


def obb_overlap_many(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Vectorized SAT overlap for paired box arrays of shape (N, 5)."""
    boxes_a = np.asarray(boxes_a, dtype=float)
    boxes_b = np.asarray(boxes_b, dtype=float)
    corners_a = obb_corners(boxes_a[:, 0], boxes_a[:, 1], boxes_a[:, 2],
                            boxes_a[:, 3], boxes_a[:, 4])
    corners_b = obb_corners(boxes_b[:, 0], boxes_b[:, 1], boxes_b[:, 2],
                            boxes_b[:, 3], boxes_b[:, 4])
    overlap = np.ones(boxes_a.shape[0], dtype=bool)
    for boxes, theta in ((boxes_a, boxes_a[:, 2]), (boxes_b, boxes_b[:, 2])):
        for phi in (theta, theta + np.pi / 2.0):
            axis = np.stack([np.cos(phi), np.sin(phi)], axis=-1)  # (N, 2)
            pa = np.einsum("nkj,nj->nk", corners_a, axis)
            pb = np.einsum("nkj,nj->nk", corners_b, axis)
            sep = (pa.max(axis=1) < pb.min(axis=1)) | (pb.max(axis=1) < pa.min(axis=1))
            overlap &= ~sep
    return overlap


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed sequence of ego states at fixed dt."""

    states: tuple[EgoState, ...]
    dt: float = TICK_DT
    origin_timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if len(self.states) < 2:
            raise ValueError("trajectory needs at least 2 states")
        th = np.array([s.theta for s in self.states])
        step = np.abs(np.mod(np.diff(th) + math.pi, 2.0 * math.pi) - math.pi)
        if np.any(step > math.pi - 1e-12):
            raise ValueError("heading step > pi between consecutive states")
        object.__setattr__(self, "_headings_cache", th)

    def __len__(self):
        return len(self.states)

    @property
    def duration(self) -> float:
        return (len(self.states) - 1) * self.dt

    def xy(self) -> np.ndarray:
        cached = getattr(self, "_xy_cache", None)
        if cached is None:
            cached = np.array([(s.x, s.y) for s in self.states])
            object.__setattr__(self, "_xy_cache", cached)
        return cached

    def speeds(self) -> np.ndarray:
        cached = getattr(self, "_speeds_cache", None)
        if cached is None:
            cached = np.array([s.v for s in self.states])
            object.__setattr__(self, "_speeds_cache", cached)
        return cached

    def headings(self) -> np.ndarray:
        return self._headings_cache

    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt


def interpolate_state(traj: Trajectory, t: float) -> EgoState:
    """State at relative time t; linear in x, y, v, shortest-arc in heading."""
    if t < -1e-12 or t > traj.duration + 1e-12:
        raise ValueError(f"t={t} outside [0, {traj.duration}]")
    t = min(max(t, 0.0), traj.duration)
    idx = min(int(t / traj.dt), len(traj.states) - 2)
    frac = (t - idx * traj.dt) / traj.dt
    s0, s1 = traj.states[idx], traj.states[idx + 1]
    if frac <= 1e-12:
        return s0
    if frac >= 1.0 - 1e-12:
        return s1
    theta = wrap_angle(s0.theta + frac * angle_diff(s1.theta, s0.theta))
    return EgoState(
        x=s0.x + frac * (s1.x - s0.x),
        y=s0.y + frac * (s1.y - s0.y),
        theta=theta,
        v=s0.v + frac * (s1.v - s0.v),
        a=s0.a + frac * (s1.a - s0.a),
        steering=s0.steering + frac * (s1.steering - s0.steering),
    )


@dataclass(frozen=True)
class SceneContext:
    """Everything the planner sees at one planning tick."""

    ego: EgoState
    agents: tuple[AgentTrack, ...]
    route: RouteSpec
    history: tuple  # ((timestamp, EgoState, (AgentTrack, ...)), ...) oldest first
    timestamp: float = 0.0
    ego_extent: tuple[float, float] = (EGO_LENGTH, EGO_WIDTH)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "history", tuple(self.history))
        if len(self.history) != HISTORY_STEPS:
            raise ValueError(f"history must have exactly {HISTORY_STEPS} entries")
        ts = [h[0] for h in self.history]
        for prev, cur in zip(ts[:-1], ts[1:]):
            if abs((cur - prev) - TICK_DT) > 1e-6:
                raise ValueError("history timestamps must be 0.2 s apart, increasing")
        if abs((self.timestamp - ts[-1]) - TICK_DT) > 1e-6:
            raise ValueError("newest history entry must be 0.2 s before the scene")

    def past_ego_states(self) -> list[EgoState]:
        return [h[1] for h in self.history]

    def with_ego(self, ego: EgoState) -> "SceneContext":
        return replace(self, ego=ego)
