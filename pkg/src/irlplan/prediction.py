"""Non-ego agent motion prediction.

Vehicles with an associated lane roll forward along the route with IDM
acceleration against their own lead; pedestrians and laneless vehicles use a
constant-velocity model.  Predicted agents never react to the ego, matching
the replay-style evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import AgentKind, SceneContext, project_to_route, wrap_angle_array

IDM_ACCEL_FLOOR = -3.5  # matches the safety filter's worst-case brake


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 1.0  # conservative so stationary traffic is not assumed to speed up
    b_comf: float = 1.5
    v_desired: float = 15.0
    headway_T: float = 1.5
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for name in ("a_max", "b_comf", "v_desired", "headway_T", "s0", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be positive")


@dataclass(frozen=True)
class PredictedTrack:
    agent_id: str
    times: np.ndarray  # (K,)
    poses: np.ndarray  # (K, 3)
    speeds: np.ndarray  # (K,)
    extent: tuple[float, float]
    kind: AgentKind
    has_lane: bool

    def pose_at(self, t):
        """Interpolated (x, y, theta) at time(s) t; holds the ends."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        t_arr = np.clip(t_arr, self.times[0], self.times[-1])
        x = np.interp(t_arr, self.times, self.poses[:, 0])
        y = np.interp(t_arr, self.times, self.poses[:, 1])
        th = wrap_angle_array(np.interp(t_arr, self.times, np.unwrap(self.poses[:, 2])))
        if np.isscalar(t):
            return float(x[0]), float(y[0]), float(th[0])
        return np.stack([x, y, th], axis=-1)

    def speed_at(self, t):
        t_arr = np.clip(np.asarray(t, dtype=float), self.times[0], self.times[-1])
        out = np.interp(t_arr, self.times, self.speeds)
        return float(out) if np.isscalar(t) else out


PredictedTracks = dict  # agent_id -> PredictedTrack


def idm_accel(v: float, gap: float, lead_v: float, p: IdmParams) -> float:
    """IDM acceleration, clamped to [IDM_ACCEL_FLOOR, a_max].

    gap = +inf encodes a free road; when a lead exists the gap must be
    positive (bumper-to-bumper).
    """
    if gap <= 0:
        raise ValueError("gap must be positive when a lead exists")
    free_term = (v / p.v_desired) ** p.delta
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_star = p.s0 + v * p.headway_T + v * (v - lead_v) / (2.0 * math.sqrt(p.a_max * p.b_comf))
        interaction = (s_star / gap) ** 2
    a = p.a_max * (1.0 - free_term - interaction)
    return float(min(p.a_max, max(IDM_ACCEL_FLOOR, a)))


def predict_agents(scene: SceneContext, horizon: float, params: IdmParams | None = None,
                   dt: float = 0.2) -> PredictedTracks:
    """Roll every agent forward over `horizon` seconds at `dt` steps."""
    steps = horizon / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("horizon must be a multiple of dt")
    n = int(round(steps))
    times = np.arange(n + 1) * dt

    route = scene.route
    if params is None:
        params = IdmParams(v_desired=float(route.speed_limit_at(0.0)))

    on_lane = [a for a in scene.agents if a.has_lane and a.kind == AgentKind.VEHICLE]
    others = [a for a in scene.agents if a not in on_lane]

    tracks: PredictedTracks = {}

    # constant-velocity rollout: exactly linear in t
    for agent in others:
        x, y, th = agent.pose
        xs = x + agent.v * times * math.cos(th)
        ys = y + agent.v * times * math.sin(th)
        poses = np.stack([xs, ys, np.full_like(xs, th)], axis=-1)
        tracks[agent.id] = PredictedTrack(
            agent_id=agent.id, times=times, poses=poses,
            speeds=np.full_like(xs, agent.v), extent=agent.extent,
            kind=agent.kind, has_lane=agent.has_lane)

    # on-lane agents: order by route arclength once, then IDM each against
    # the agent ahead (the front-most drives on a free road)
    if on_lane:
        proj = [project_to_route(a.pose[:2], route)[0] for a in on_lane]
        order = np.argsort(proj)
        s = np.array([proj[i] for i in order])
        v = np.array([on_lane[i].v for i in order], dtype=float)
        lengths = np.array([on_lane[i].extent[0] for i in order])
        s_hist = np.empty((n + 1, len(on_lane)))
        v_hist = np.empty((n + 1, len(on_lane)))
        s_hist[0], v_hist[0] = s, v
        for k in range(n):
            a_arr = np.empty(len(on_lane))
            for i in range(len(on_lane)):
                p_i = IdmParams(
                    a_max=params.a_max, b_comf=params.b_comf,
                    v_desired=float(route.speed_limit_at(s[i])),
                    headway_T=params.headway_T, s0=params.s0, delta=params.delta)
                if i + 1 < len(on_lane):
                    gap = s[i + 1] - s[i] - 0.5 * (lengths[i] + lengths[i + 1])
                    gap = max(gap, 1e-3)
                    a_arr[i] = idm_accel(v[i], gap, v[i + 1], p_i)
                else:
                    a_arr[i] = idm_accel(v[i], math.inf, 0.0, p_i)
            # semi-implicit Euler: update speed first, then position
            v = np.maximum(0.0, v + a_arr * dt)
            s = s + v * dt
            s_hist[k + 1], v_hist[k + 1] = s, v
        for rank, i in enumerate(order):
            agent = on_lane[i]
            x, y, th = route.pose_at(s_hist[:, rank])
            poses = np.stack([x, y, th], axis=-1)
            tracks[agent.id] = PredictedTrack(
                agent_id=agent.id, times=times, poses=poses,
                speeds=v_hist[:, rank], extent=agent.extent,
                kind=agent.kind, has_lane=True)
    return tracks
