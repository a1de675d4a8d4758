"""Recursive safety filter.

A candidate is safe when a modified version of it (follow the plan for 1 s,
then brake firmly with limited jerk) keeps a 1.5 m longitudinal gap to the
track ahead while every other agent performs a worst-case hard brake.
Passing implies the recursive guarantee: after executing one tick there is
still a braking continuation that stays safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    AgentKind,
    EgoState,
    SceneContext,
    Trajectory,
    _project_many,
    wrap_angle_array,
)
from .prediction import PredictedTrack, PredictedTracks
from .trajgen import TrajectorySet


@dataclass(frozen=True)
class SafetyConfig:
    min_gap: float = 1.5
    lead_hard_brake: float = 3.5
    ego_firm_brake: float = 2.5
    ego_jerk_limit: float = 3.5
    follow_time: float = 1.0

    def __post_init__(self):
        for name in ("min_gap", "lead_hard_brake", "ego_firm_brake",
                     "ego_jerk_limit", "follow_time"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SafetyConfig.{name} must be positive")


def _brake_profile(v0: float, a0: float, cfg: SafetyConfig, dt: float):
    """Speeds and travelled distances of the jerk-limited firm brake.

    Acceleration moves from a0 toward -ego_firm_brake at the jerk limit and
    then holds until the speed reaches zero.  Integration is piecewise exact,
    sampled on the dt grid; returns (speeds, distances, stop_distance).
    """
    a_target = -cfg.ego_firm_brake
    j = -cfg.ego_jerk_limit if a0 > a_target else cfg.ego_jerk_limit
    t_ramp = abs(a_target - a0) / cfg.ego_jerk_limit

    def v_of(t):
        if t <= t_ramp:
            return v0 + a0 * t + 0.5 * j * t * t
        tr = t - t_ramp
        v_r = v0 + a0 * t_ramp + 0.5 * j * t_ramp * t_ramp
        return v_r + a_target * tr

    def s_of(t):
        if t <= t_ramp:
            return v0 * t + 0.5 * a0 * t * t + j * t**3 / 6.0
        tr = t - t_ramp
        s_r = v0 * t_ramp + 0.5 * a0 * t_ramp**2 + j * t_ramp**3 / 6.0
        v_r = v0 + a0 * t_ramp + 0.5 * j * t_ramp * t_ramp
        return s_r + v_r * tr + 0.5 * a_target * tr * tr

    # earliest zero crossing of v (the ramp can momentarily keep v rising);
    # on the ramp v(t) is quadratic, afterwards linear, both closed-form
    t_stop = None
    if v0 <= 1e-12 and a0 <= 0:
        t_stop = 0.0
    else:
        if abs(j) > 1e-15:
            disc = a0 * a0 - 2.0 * j * v0
            if disc >= 0.0:
                r = math.sqrt(disc)
                roots = sorted(((-a0 - r) / j, (-a0 + r) / j))
                for root in roots:
                    if -1e-12 <= root <= t_ramp:
                        t_stop = max(0.0, root)
                        break
        elif a0 < 0:
            root = -v0 / a0
            if root <= t_ramp:
                t_stop = root
        if t_stop is None:
            v_r = v_of(t_ramp)
            t_stop = t_ramp + v_r / cfg.ego_firm_brake
    s_stop = s_of(t_stop)

    n = int(math.ceil(t_stop / dt - 1e-9)) + 1
    times = np.arange(n + 1) * dt
    t_c = np.minimum(times, t_stop)
    on_ramp = t_c <= t_ramp
    v_ramp_end = v0 + a0 * t_ramp + 0.5 * j * t_ramp * t_ramp
    s_ramp_end = v0 * t_ramp + 0.5 * a0 * t_ramp**2 + j * t_ramp**3 / 6.0
    tr = t_c - t_ramp
    speeds = np.where(on_ramp, v0 + a0 * t_c + 0.5 * j * t_c * t_c,
                      v_ramp_end + a_target * tr)
    dists = np.where(on_ramp, v0 * t_c + 0.5 * a0 * t_c**2 + j * t_c**3 / 6.0,
                     s_ramp_end + v_ramp_end * tr + 0.5 * a_target * tr * tr)
    speeds = np.maximum(0.0, speeds)
    speeds[times >= t_stop] = 0.0
    dists[times >= t_stop] = s_stop
    return speeds, dists, s_stop


class _PathMap:
    """Arclength -> pose lookup along a trajectory's own geometric path."""

    def __init__(self, traj: Trajectory):
        xy = traj.xy()
        seg = np.diff(xy, axis=0)
        ds = np.hypot(seg[:, 0], seg[:, 1])
        self.s = np.concatenate(([0.0], np.cumsum(ds)))
        self.xy = xy
        self.theta_unwrapped = np.unwrap(traj.headings())
        # de-duplicate stationary samples for interp
        self._knots, self._idx = np.unique(self.s, return_index=True)

    def pose_at(self, s_arr):
        s_arr = np.asarray(s_arr, dtype=float)
        over = s_arr > self.s[-1]
        s_c = np.clip(s_arr, 0.0, self.s[-1])
        s_knots, idx = self._knots, self._idx
        x = np.interp(s_c, s_knots, self.xy[idx, 0])
        y = np.interp(s_c, s_knots, self.xy[idx, 1])
        th = wrap_angle_array(np.interp(s_c, s_knots, self.theta_unwrapped[idx]))
        if np.any(over):
            th_end = wrap_angle_array(self.theta_unwrapped[-1:])[0]
            extra = s_arr[over] - self.s[-1]
            x = np.array(x); y = np.array(y); th = np.array(th)
            x[over] = self.xy[-1, 0] + extra * math.cos(th_end)
            y[over] = self.xy[-1, 1] + extra * math.sin(th_end)
            th[over] = th_end
        return x, y, th


def _modified_xy(traj: Trajectory, cfg: SafetyConfig, profile_cache: dict):
    """Positions (N, 2) of the modified trajectory, without state objects.

    Same follow-then-brake arithmetic as modify_trajectory; brake profiles
    are cached on (v, a) at the follow boundary since candidates sharing an
    acceleration profile reuse the same one.
    """
    dt = traj.dt
    k_follow = min(int(round(cfg.follow_time / dt)), len(traj.states) - 1)
    v = traj.speeds()
    xy = traj.xy()
    if v[k_follow] <= 1e-12:
        return xy
    a0 = (v[k_follow] - v[k_follow - 1]) / dt if k_follow >= 1 else traj.states[0].a
    key = (float(v[k_follow]), float(a0))
    prof = profile_cache.get(key)
    if prof is None:
        prof = _brake_profile(key[0], key[1], cfg, dt)
        profile_cache[key] = prof
    _, dists, _ = prof
    path = _PathMap(traj)
    seg = np.hypot(*(np.diff(xy, axis=0).T))
    s_follow = float(np.sum(seg[:k_follow]))
    x, y, _ = path.pose_at(s_follow + dists[1:])
    return np.concatenate([xy[: k_follow + 1], np.stack([x, y], axis=-1)])


def modify_trajectory(traj: Trajectory, cfg: SafetyConfig = SafetyConfig()) -> Trajectory:
    """Follow the plan for `follow_time`, then brake firmly to a stop.

    The speed profile past the follow window is replaced by a jerk-limited
    ramp toward the firm-brake deceleration; positions are re-integrated
    along the original geometric path, extending past the planning horizon
    until the vehicle stops.
    """
    dt = traj.dt
    k_follow = int(round(cfg.follow_time / dt))
    k_follow = min(k_follow, len(traj.states) - 1)
    v = traj.speeds()
    if v[k_follow] <= 1e-12:
        return traj  # already stopped inside the follow window

    a0 = (v[k_follow] - v[k_follow - 1]) / dt if k_follow >= 1 else traj.states[0].a
    speeds, dists, _ = _brake_profile(float(v[k_follow]), float(a0), cfg, dt)

    path = _PathMap(traj)
    xy = traj.xy()
    seg = np.hypot(*(np.diff(xy, axis=0).T))
    s_follow = float(np.sum(seg[:k_follow]))

    s_tail = s_follow + dists[1:]
    x, y, th = path.pose_at(s_tail)
    states = list(traj.states[: k_follow + 1])
    a_tail = np.diff(speeds) / dt
    for i in range(len(s_tail)):
        states.append(EgoState(x=float(x[i]), y=float(y[i]), theta=float(th[i]),
                               v=float(speeds[i + 1]), a=float(a_tail[i]),
                               steering=0.0))
    return Trajectory(states=tuple(states), dt=dt,
                      origin_timestamp=traj.origin_timestamp)


def worst_case_lead(scene: SceneContext, cfg: SafetyConfig = SafetyConfig(),
                    horizon: float = 12.0, dt: float = 0.2) -> PredictedTracks:
    """Every agent hard-brakes along its heading until stopped.

    Pedestrians are treated identically to vehicles (conservative).
    """
    n = int(math.ceil(horizon / dt))
    times = np.arange(n + 1) * dt
    tracks: PredictedTracks = {}
    for agent in scene.agents:
        x, y, th = agent.pose
        b = cfg.lead_hard_brake
        t_stop = agent.v / b
        dist = np.where(times < t_stop,
                        agent.v * times - 0.5 * b * times**2,
                        agent.v**2 / (2.0 * b))
        speeds = np.maximum(0.0, agent.v - b * times)
        poses = np.stack([x + dist * math.cos(th), y + dist * math.sin(th),
                          np.full_like(dist, th)], axis=-1)
        tracks[agent.id] = PredictedTrack(
            agent_id=agent.id, times=times, poses=poses, speeds=speeds,
            extent=agent.extent, kind=agent.kind, has_lane=agent.has_lane)
    return tracks


def _tracks_ahead(scene: SceneContext):
    """Agents in the lane corridor ahead of the ego at scene time."""
    ego_s, _, _ = _project_one(scene.ego.x, scene.ego.y, scene.route)
    out = []
    for agent in scene.agents:
        s, lat, _ = _project_one(agent.pose[0], agent.pose[1], scene.route)
        if s > ego_s and abs(lat) <= scene.route.lane_half_width:
            out.append((agent, s))
    return ego_s, out


def _project_one(x, y, route):
    s, lat, head, _ = _project_many(np.array([[x, y]]), route)
    return float(s[0]), float(lat[0]), float(head[0])


def check_trajectory(traj: Trajectory, scene: SceneContext,
                     cfg: SafetyConfig = SafetyConfig(),
                     leads: PredictedTracks | None = None,
                     ahead_cache=None, lead_s_cache=None,
                     ego_s=None) -> bool:
    """Gap check for an already-modified trajectory.

    True iff the bumper-to-bumper longitudinal gap along the route to every
    track ahead stays >= min_gap at every step, with all agents under the
    worst-case hard brake.
    """
    if ahead_cache is None:
        _, ahead = _tracks_ahead(scene)
    else:
        ahead = ahead_cache
    if not ahead:
        return True
    horizon = traj.duration + 2.0
    if leads is None:
        leads = worst_case_lead(scene, cfg, horizon=horizon, dt=traj.dt)
    times = traj.times()
    if ego_s is None:
        ego_s, _, _, _ = _project_many(traj.xy(), scene.route)
    half_ego = scene.ego_extent[0] / 2.0
    for agent, _ in ahead:
        track = leads[agent.id]
        if lead_s_cache is not None and agent.id in lead_s_cache[1]:
            grid_t, s_map = lead_s_cache
            lead_s = np.interp(times, grid_t, s_map[agent.id])
        else:
            pos = track.pose_at(times)
            lead_s, _, _, _ = _project_many(pos[:, :2], scene.route)
        gap = lead_s - ego_s - half_ego - agent.extent[0] / 2.0
        if np.any(gap < cfg.min_gap - 1e-12):
            return False
    return True


def filter_set(tset: TrajectorySet, scene: SceneContext,
               cfg: SafetyConfig = SafetyConfig()):
    """Apply the modify-then-check pipeline to a whole trajectory set.

    Returns (accepted TrajectorySet, per-trajectory mask).  When nothing
    passes, the single hardest-brake candidate is returned with the set's
    fallback flag raised.
    """
    dt = tset.trajectories[0].dt
    _, ahead = _tracks_ahead(scene)
    if not ahead:
        mask = np.ones(len(tset.trajectories), dtype=bool)
        return TrajectorySet(trajectories=list(tset.trajectories),
                             provenance=list(tset.provenance),
                             fallback=False), mask
    horizon = max(t.duration for t in tset.trajectories) + 8.0
    leads = worst_case_lead(scene, cfg, horizon=horizon, dt=dt)
    # candidate-independent caches: each in-corridor lead's route arclength
    # on the trajectory dt grid, so per-step gaps index exact samples
    grid_t = np.arange(int(math.ceil(horizon / dt)) + 1) * dt
    s_map = {}
    for agent, _ in ahead:
        pos = leads[agent.id].pose_at(grid_t)
        s_map[agent.id], _, _, _ = _project_many(pos[:, :2], scene.route)
    profile_cache: dict = {}
    mod_xy = [_modified_xy(traj, cfg, profile_cache)
              for traj in tset.trajectories]
    # one bulk projection of every modified trajectory's positions
    s_flat, _, _, _ = _project_many(np.concatenate(mod_xy), scene.route)
    offsets = np.cumsum([0] + [len(m) for m in mod_xy])
    half_ego = scene.ego_extent[0] / 2.0
    mask = np.ones(len(mod_xy), dtype=bool)
    for i in range(len(mod_xy)):
        ego_s = s_flat[offsets[i]:offsets[i + 1]]
        n = len(ego_s)
        for agent, _ in ahead:
            gap = (s_map[agent.id][:n] - ego_s
                   - half_ego - agent.extent[0] / 2.0)
            if np.any(gap < cfg.min_gap - 1e-12):
                mask[i] = False
                break
    if mask.any():
        kept = [t for t, ok in zip(tset.trajectories, mask) if ok]
        prov = [p for p, ok in zip(tset.provenance, mask) if ok]
        return TrajectorySet(trajectories=kept, provenance=prov, fallback=False), mask
    hardest = int(np.argmin([p[0] for p in tset.provenance]))
    return (
        TrajectorySet(trajectories=[tset.trajectories[hardest]],
                      provenance=[tset.provenance[hardest]], fallback=True),
        mask,
    )
