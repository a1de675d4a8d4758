"""Planner step functions: the learned pipeline and the two baselines.

Every planner maps a SceneContext to a single 6 s Trajectory; the closed-loop
simulator executes one 0.2 s step of it and replans.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .geometry import (EgoState, SceneContext, Trajectory, TICK_DT,
                       interpolate_state, project_to_route)
from .trajgen import GeneratorConfig, generate_trajectories
from .safety import SafetyConfig, filter_set
from .prediction import IdmParams, idm_accel, predict_agents
from .features import compute_bundles, zero_features
from .scorer import ScorerParams, forward

PLAN_HORIZON = 6.0


class PlannerKind(str, Enum):
    LEARNED = "learned"
    LEARNED_PLUS_SAFETY = "learned_plus_safety"
    IDM = "idm"
    CONSTANT_SPEED = "constant_speed"
    EXPERT_REPLAY = "expert_replay"


def _centerline_rollout(scene: SceneContext, accel_fn) -> Trajectory:
    """Integrate ego speed along the route centerline from its projection.

    accel_fn(t, s, v) gives the longitudinal acceleration at each tick.
    """
    route = scene.route
    s, _, _ = project_to_route((scene.ego.x, scene.ego.y), route)
    v = scene.ego.v
    n = int(round(PLAN_HORIZON / TICK_DT))
    states = []
    for k in range(n + 1):
        x, y, th = route.pose_at(s)
        if k == 0:
            # keep the true ego pose at t=0 so the set stays anchored
            x, y, th = scene.ego.x, scene.ego.y, scene.ego.theta
        a = accel_fn(k * TICK_DT, s, v)
        states.append(EgoState(x=x, y=y, theta=th, v=v, a=a))
        v = max(0.0, v + a * TICK_DT)
        s = s + v * TICK_DT
    return Trajectory(states=tuple(states), dt=TICK_DT)


def _predicted_lead(s_ego: float, t: float, scene: SceneContext, predictions):
    """(bumper gap, lead speed) of the nearest in-corridor predicted agent."""
    best = None
    half_len = 0.5 * scene.ego_extent[0]
    for agent in scene.agents:
        track = predictions[agent.id]
        x, y, _ = track.pose_at(t)
        s, lat, _ = project_to_route((x, y), scene.route)
        if abs(lat) > scene.route.lane_half_width or s <= s_ego:
            continue
        gap = (s - s_ego) - half_len - 0.5 * agent.extent[0]
        gap = max(gap, 0.01)
        if best is None or gap < best[0]:
            best = (gap, float(track.speed_at(t)))
    return best


def idm_planner_step(scene: SceneContext,
                     params: IdmParams | None = None) -> Trajectory:
    predictions = predict_agents(scene, horizon=PLAN_HORIZON + 2.0)

    def accel(t, s, v):
        p = params or IdmParams(v_desired=max(0.5, scene.route.speed_limit_at(s)))
        lead = _predicted_lead(s, t, scene, predictions)
        if lead is None:
            return idm_accel(v, math.inf, 0.0, p)
        return idm_accel(v, lead[0], lead[1], p)

    return _centerline_rollout(scene, accel)


def cs_planner_step(scene: SceneContext) -> Trajectory:
    return _centerline_rollout(scene, lambda t, s, v: 0.0)


def learned_planner_step(scene: SceneContext, params: ScorerParams,
                         use_safety_filter: bool = True,
                         gen_cfg: GeneratorConfig = GeneratorConfig(),
                         safety_cfg: SafetyConfig = SafetyConfig(),
                         drop_features=()) -> Trajectory:
    """generate -> (filter) -> features -> score -> argmax reward."""
    tset = generate_trajectories(scene, gen_cfg)
    if use_safety_filter:
        tset, _ = filter_set(tset, scene, safety_cfg)
    predictions = predict_agents(scene, horizon=PLAN_HORIZON + 2.0)
    bundles = compute_bundles(tset.trajectories, scene, predictions)
    if drop_features:
        bundles = [zero_features(b, drop_features) for b in bundles]
    rewards, _ = forward(bundles, params, mode="eval")
    return tset.trajectories[int(np.argmax(rewards))]


def expert_replay_planner(scenario):
    """Planner that replays the scenario's expert future from the scene time."""

    def step(scene: SceneContext) -> Trajectory:
        expert = scenario.expert
        k = int(round(scene.timestamp / TICK_DT))
        end = min(len(expert.states), k + int(PLAN_HORIZON / TICK_DT) + 1)
        states = expert.states[k:end]
        if len(states) < 2:
            raise RuntimeError("expert future exhausted")
        return Trajectory(states=states, dt=TICK_DT)

    return step


def make_planner(kind: PlannerKind, params: ScorerParams | None = None,
                 scenario=None, drop_features=()):
    """Bind a PlannerKind to a scene -> Trajectory callable."""
    kind = PlannerKind(kind)
    if kind is PlannerKind.IDM:
        return idm_planner_step
    if kind is PlannerKind.CONSTANT_SPEED:
        return cs_planner_step
    if kind is PlannerKind.EXPERT_REPLAY:
        if scenario is None:
            raise ValueError("expert_replay needs the scenario")
        return expert_replay_planner(scenario)
    if params is None:
        raise ValueError(f"{kind.value} needs trained parameters")
    use_filter = kind is PlannerKind.LEARNED_PLUS_SAFETY
    return lambda scene: learned_planner_step(scene, params, use_filter,
                                              drop_features=drop_features)
