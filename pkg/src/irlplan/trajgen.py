"""Candidate trajectory synthesis.

Constant-acceleration speed profiles integrated along the route, with Dubins
merges back to the centerline when the ego starts away from it.  Output is a
diverse trajectory set whose members all pass the feasibility checks in
`validate_trajectory`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dubins
from .geometry import (
    EgoState,
    RouteSpec,
    SceneContext,
    Trajectory,
    angle_diff,
    project_to_route,
    wrap_angle,
    wrap_angle_array,
)

WHEELBASE = 2.8  # for the steering annotation on generated states

# heading misalignment above which an on-centerline ego still needs a merge
_ALIGN_TOL = 0.05
_PATH_STEP = 0.25


class NoMergeFound(Exception):
    """No Dubins merge to the route exists within the lookahead window."""


@dataclass(frozen=True)
class GeneratorConfig:
    accel_min: float = -5.0
    accel_max: float = 1.5
    accel_step: float = 0.5
    turning_radii: tuple[float, ...] = (6.0, 9.0, 13.0, 20.0, 40.0)
    dt: float = 0.2
    horizon: float = 6.0
    merge_lateral_threshold: float = 0.15
    merge_lookahead: float = 40.0
    off_route_bound: float = 4.0

    def __post_init__(self):
        if self.accel_min >= self.accel_max:
            raise ValueError("accel_min must be below accel_max")
        if any(r <= 0 for r in self.turning_radii):
            raise ValueError("turning radii must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integral number of dt steps")

    def accel_profiles(self) -> np.ndarray:
        n = int(round((self.accel_max - self.accel_min) / self.accel_step)) + 1
        return np.linspace(self.accel_min, self.accel_max, n)

    @property
    def n_states(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class TrajectorySet:
    trajectories: list[Trajectory]
    provenance: list[tuple[float, object]]  # (accel, radius or "centerline")
    fallback: bool = False

    def __len__(self):
        return len(self.trajectories)


def speed_profile(v0: float, accel: float, horizon: float, dt: float):
    """Exact kinematics of a clamped constant-acceleration profile.

    Returns (arclengths, speeds) sampled at t = 0, dt, ..., horizon with
    v(t) = max(0, v0 + accel*t); once the speed hits zero the vehicle stays
    stopped (no reversing), and the arclength integral accounts for the
    partial step in which the stop happens.
    """
    if v0 < 0:
        raise ValueError("initial speed must be non-negative")
    t = np.arange(int(round(horizon / dt)) + 1) * dt
    v_raw = v0 + accel * t
    v = np.maximum(0.0, v_raw)
    if accel < 0 and v0 + accel * horizon < 0:
        t_stop = v0 / (-accel)
        s_stop = 0.5 * v0 * t_stop  # == v0^2 / (2|a|)
        s = np.where(t < t_stop, v0 * t + 0.5 * accel * t * t, s_stop)
    else:
        s = v0 * t + 0.5 * accel * t * t
    return s, v


class GeometricPath:
    """Arc-length parameterized pose sequence with linear interpolation.

    Headings interpolate along the unwrapped angle so queries never jump
    across the +-pi seam; arclengths beyond the sampled range extrapolate
    along the end tangents.
    """

    def __init__(self, s: np.ndarray, poses: np.ndarray):
        self.s = np.asarray(s, dtype=float)
        self.poses = np.asarray(poses, dtype=float)
        self._theta_unwrapped = np.unwrap(self.poses[:, 2])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def pose_at(self, s):
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        over = s_arr > self.s[-1]
        s_clamped = np.clip(s_arr, self.s[0], self.s[-1])
        x = np.interp(s_clamped, self.s, self.poses[:, 0])
        y = np.interp(s_clamped, self.s, self.poses[:, 1])
        th = wrap_angle_array(np.interp(s_clamped, self.s, self._theta_unwrapped))
        if np.any(over):
            extra = s_arr[over] - self.s[-1]
            th_end = self.poses[-1, 2]
            x[over] = self.poses[-1, 0] + extra * math.cos(th_end)
            y[over] = self.poses[-1, 1] + extra * math.sin(th_end)
            th[over] = th_end
        if np.isscalar(s):
            return float(x[0]), float(y[0]), float(th[0])
        return np.stack([x, y, th], axis=-1)


def _route_tail_path(route: RouteSpec, s_from: float, extent: float) -> tuple[np.ndarray, np.ndarray]:
    """Centerline samples from arclength s_from over at least `extent` meters."""
    s_samples = np.arange(s_from, s_from + extent + _PATH_STEP, _PATH_STEP)
    x, y, th = route.pose_at(s_samples)
    return s_samples - s_from, np.stack([x, y, th], axis=-1)


def _headings_from_positions(poses: np.ndarray) -> np.ndarray:
    """Replace pose headings by segment directions (keeps endpoints)."""
    out = poses.copy()
    seg = np.diff(poses[:, :2], axis=0)
    ok = np.hypot(seg[:, 0], seg[:, 1]) > 1e-9
    head = np.arctan2(seg[:, 1], seg[:, 0])
    for i in range(1, len(poses) - 1):
        if ok[i - 1]:
            out[i, 2] = head[i - 1]
    return out


def centerline_snap_path(ego_pose, route: RouteSpec, extent: float) -> GeometricPath:
    """A path starting exactly at the ego pose that eases onto the centerline.

    The lateral offset decays with a smoothstep over a short blend window, so
    the path is usable both for on-route egos (tiny offsets) and as the
    fallback when no Dubins merge exists.
    """
    x0, y0, th0 = ego_pose
    s0, lat, head, = project_to_route((x0, y0), route)[:3]
    blend = max(2.0, 10.0 * abs(lat), 20.0 * abs(angle_diff(th0, head)))
    n_blend = max(4, int(math.ceil(blend / _PATH_STEP)))
    u = np.linspace(0.0, 1.0, n_blend + 1)
    decay = 1.0 - (3.0 * u**2 - 2.0 * u**3)  # smoothstep down from 1 to 0
    s_c = s0 + u * blend
    cx, cy, ch = route.pose_at(s_c)
    nx, ny = -np.sin(ch), np.cos(ch)
    px = cx + lat * decay * nx
    py = cy + lat * decay * ny
    blend_poses = np.stack([px, py, ch], axis=-1)
    blend_poses[0, :2] = (x0, y0)

    tail_rel_s, tail_poses = _route_tail_path(route, s0 + blend, extent)
    poses = np.concatenate([blend_poses, tail_poses[1:]], axis=0)
    poses = _headings_from_positions(poses)
    poses[0, 2] = th0
    seg = np.diff(poses[:, :2], axis=0)
    s = np.concatenate(([0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))))
    return GeometricPath(s, poses)


def _merge_targets(ego_pose, route: RouteSpec, lookahead: float):
    """Route-frame merge target poses scanned at 1 m ahead of the ego
    projection; shared by every turning radius."""
    x0, y0, _ = ego_pose
    s0, lat, _ = project_to_route((x0, y0), route)
    if abs(lat) > route.lane_half_width + 10.0:
        raise NoMergeFound(f"ego {abs(lat):.1f} m from route, too far to merge")
    target_s = s0 + np.arange(1.0, lookahead + 1e-9, 1.0)
    tx, ty, tth = route.pose_at(target_s)
    return target_s, np.stack([tx, ty, tth], axis=-1)


def dubins_merge(ego_pose, route: RouteSpec, radius: float,
                 lookahead: float = 40.0, extent: float = 160.0,
                 targets=None) -> GeometricPath:
    """Shortest Dubins merge from the ego pose onto the route centerline.

    Target poses are scanned at 1 m increments ahead of the ego projection;
    the winning path is the shortest Dubins solution not exceeding the
    lookahead window, continued along the centerline afterwards.
    """
    if targets is None:
        targets = _merge_targets(ego_pose, route, lookahead)
    target_s_arr, target_poses = targets
    best = dubins.solve_dubins_to_targets(ego_pose, target_poses, radius,
                                          max_length=lookahead)
    if best is None:
        raise NoMergeFound(
            f"no Dubins merge with radius {radius} within {lookahead} m")

    word, lengths, t_idx, path_len = best
    target_s = float(target_s_arr[t_idx])
    s_d, poses_d = dubins.sample_dubins(ego_pose, word, lengths, radius,
                                        step=_PATH_STEP)
    tail_rel_s, tail_poses = _route_tail_path(route, target_s, extent)
    poses = np.concatenate([poses_d, tail_poses[1:]], axis=0)
    s = np.concatenate([s_d, s_d[-1] + tail_rel_s[1:]])
    return GeometricPath(s, poses)


def _fast_state(x, y, theta, v, a, steering) -> EgoState:
    """EgoState without wrap/clamp post-init; inputs must already satisfy
    wrapped theta and v >= 0."""
    st = object.__new__(EgoState)
    osa = object.__setattr__
    osa(st, "x", x)
    osa(st, "y", y)
    osa(st, "theta", theta)
    osa(st, "v", v)
    osa(st, "a", a)
    osa(st, "steering", steering)
    return st


def _build_candidates(poses: np.ndarray, arclengths: np.ndarray,
                      speeds: np.ndarray, accels, ego: EgoState, dt: float,
                      kappa_lim: float):
    """Trajectories for every acceleration profile on one geometric path.

    poses (A, n, 3), arclengths (A, n), speeds (A, n).  Feasibility (bounded
    discrete curvature, no reversing, chord lengths consistent with the
    speed profile) is checked on the stacked arrays with the first state
    pinned to the exact ego state; returns a list of (Trajectory, accel)
    for the feasible rows.
    """
    a_count, n, _ = poses.shape
    xs = poses[:, :, 0].copy()
    ys = poses[:, :, 1].copy()
    th = poses[:, :, 2].copy()
    xs[:, 0], ys[:, 0], th[:, 0] = ego.x, ego.y, ego.theta
    chord = np.hypot(np.diff(xs, axis=1), np.diff(ys, axis=1))
    dth = np.mod(np.diff(th, axis=1) + math.pi, 2.0 * math.pi) - math.pi
    moving = chord > 1e-3
    ratio = np.zeros_like(chord)
    np.divide(np.abs(dth), chord, out=ratio, where=moving)
    bad = (speeds < 0).any(axis=1)
    bad |= (ratio > kappa_lim + 1e-9).any(axis=1)
    expected = 0.5 * (speeds[:, :-1] + speeds[:, 1:]) * dt
    bad |= (np.abs(chord - expected) > 0.1 * expected + 0.05).any(axis=1)
    if bad.all():
        return []
    # discrete curvature along the unpinned path for the steering annotation
    dth_path = np.diff(np.unwrap(poses[:, :, 2], axis=1), axis=1)
    ds = np.maximum(np.diff(arclengths, axis=1), 1e-9)
    kappa = np.concatenate([dth_path / ds, np.zeros((a_count, 1))], axis=1)
    steer = np.arctan(WHEELBASE * kappa)
    a_arr = np.where(speeds > 0, np.asarray(accels)[:, None], 0.0)
    out = []
    for j in np.nonzero(~bad)[0]:
        xs_l, ys_l, th_l = xs[j].tolist(), ys[j].tolist(), th[j].tolist()
        v_l, a_l, st_l = speeds[j].tolist(), a_arr[j].tolist(), steer[j].tolist()
        states = [_fast_state(xs_l[k], ys_l[k], th_l[k], v_l[k], a_l[k], st_l[k])
                  for k in range(n)]
        states[0] = EgoState(x=ego.x, y=ego.y, theta=ego.theta, v=ego.v,
                             a=float(accels[j]), steering=ego.steering)
        out.append((Trajectory(states=tuple(states), dt=dt), float(accels[j])))
    return out


def generate_trajectories(scene: SceneContext, cfg: GeneratorConfig = GeneratorConfig()) -> TrajectorySet:
    """Cartesian product of acceleration profiles and geometric paths."""
    ego = scene.ego
    s0, lat, route_head = project_to_route((ego.x, ego.y), scene.route)
    heading_err = angle_diff(ego.theta, route_head)
    max_travel = (ego.v + abs(cfg.accel_max) * cfg.horizon) * cfg.horizon + 10.0

    paths: list[tuple[GeometricPath, object]] = []
    on_route = abs(lat) <= cfg.merge_lateral_threshold and abs(heading_err) <= _ALIGN_TOL
    if on_route or abs(lat) > cfg.off_route_bound:
        paths.append((centerline_snap_path(ego.pose(), scene.route, max_travel),
                      "centerline"))
    else:
        try:
            targets = _merge_targets(ego.pose(), scene.route, cfg.merge_lookahead)
        except NoMergeFound:
            targets = None
        if targets is not None:
            for radius in cfg.turning_radii:
                try:
                    paths.append((dubins_merge(ego.pose(), scene.route, radius,
                                               cfg.merge_lookahead, max_travel,
                                               targets=targets), radius))
                except NoMergeFound:
                    continue
        if not paths:
            paths.append((centerline_snap_path(ego.pose(), scene.route, max_travel),
                          "centerline"))

    n = cfg.n_states
    accels = [float(a) for a in cfg.accel_profiles()]
    profiles = [speed_profile(ego.v, a, cfg.horizon, cfg.dt) for a in accels]
    s_all = np.stack([s[:n] for s, _ in profiles])  # (n_accel, n)
    v_all = np.stack([v[:n] for _, v in profiles])
    kappa_lim = 1.05 / min(cfg.turning_radii)
    trajectories, provenance = [], []
    for path, tag in paths:
        poses = path.pose_at(s_all.ravel()).reshape(len(accels), n, 3)
        for traj, accel in _build_candidates(poses, s_all, v_all, accels, ego,
                                             cfg.dt, kappa_lim):
            trajectories.append(traj)
            provenance.append((accel, tag))
    if not trajectories:
        raise RuntimeError("trajectory generation produced no feasible candidates")
    return TrajectorySet(trajectories=trajectories, provenance=provenance)


def validate_trajectory(traj: Trajectory, cfg: GeneratorConfig = GeneratorConfig()) -> bool:
    """Feasibility: bounded discrete curvature, no reversing, consistent speeds."""
    v = traj.speeds()
    if np.any(v < 0):
        return False
    xy = traj.xy()
    chord = np.hypot(*(np.diff(xy, axis=0).T))
    dth = np.array([angle_diff(b.theta, a.theta)
                    for a, b in zip(traj.states[:-1], traj.states[1:])])
    kappa_max = 1.05 / min(cfg.turning_radii)
    moving = chord > 1e-3
    if np.any(np.abs(dth[moving]) / chord[moving] > kappa_max + 1e-9):
        return False
    v_avg = 0.5 * (v[:-1] + v[1:])
    expected = v_avg * traj.dt
    if np.any(np.abs(chord - expected) > 0.1 * expected + 0.05):
        return False
    return True
