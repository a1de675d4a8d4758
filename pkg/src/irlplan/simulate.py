"""Closed-loop replay simulation and the evaluation metric suite.

The ego executes its own plans one 0.2 s step at a time while all other
agents replay their recorded positions.  Metrics are computed on the executed
(teleported) trajectory with plain finite differences; no smoothing.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .geometry import (EgoState, SceneContext, Trajectory, TICK_DT,
                       obb_corners, obb_overlap_many, project_to_route,
                       wrap_angle_array)

ROLLOUT_TICKS = 50
TTC_SATURATION = 4.0
TTC_FINE_DT = 0.1
MIN_TTC_THRESHOLD = 0.95
TAILGATE_GAP = 1.5
OFF_ROAD_MARGIN = 0.5
YAW_L2_WEIGHT = 2.5

# comfort thresholds on finite-difference kinematics of the executed rollout
LON_ACCEL_BOUNDS = (-4.05, 2.40)
LAT_ACCEL_MAX = 4.89
YAW_RATE_MAX = 0.95
YAW_ACCEL_MAX = 1.93
LON_JERK_MAX = 4.13
JERK_MAG_MAX = 8.37

PROGRESS_MIN = 1.0
DIVERGENCE_MAX = 4.0

# scenario tag thresholds
TAG_STRAIGHT_RAD = 0.1
TAG_TURN_RAD = math.pi / 3
TAG_SLOW_SPEED = 2.64
TAG_CLOSE_TIME_GAP = 1.7
TAG_ASV_DISTANCE = 10.0
TAG_STOPPED_DISP = 0.05


class RolloutError(RuntimeError):
    def __init__(self, tick: int, cause: Exception):
        super().__init__(f"planner failed at tick {tick}: {cause}")
        self.tick = tick
        self.cause = cause


@dataclass
class Rollout:
    scenario_id: str
    states: list                 # ROLLOUT_TICKS + 1 executed EgoStates
    chosen: list                 # per-tick (n_candidates, chosen_index, fallback)
    wall_times: list             # per-tick planner seconds
    agent_states: list           # per executed state, tuple of AgentTrack

    def __post_init__(self):
        if len(self.states) != ROLLOUT_TICKS + 1:
            raise ValueError(f"rollout must have {ROLLOUT_TICKS + 1} states")

    def xy(self) -> np.ndarray:
        return np.array([(s.x, s.y) for s in self.states])

    def headings(self) -> np.ndarray:
        return np.array([s.theta for s in self.states])


def run_closed_loop(scenario, planner, duration: float = 10.0) -> Rollout:
    """Execute the planner tick by tick against the replayed scenario."""
    n_ticks = int(round(duration / TICK_DT))
    history = list(scenario.ego_history_states())  # [(timestamp, EgoState)]
    ego = scenario.expert.states[0]
    states = [ego]
    agent_states = [scenario.agents_at(0.0)]
    chosen, wall_times = [], []
    for k in range(n_ticks):
        t = k * TICK_DT
        hist = tuple((ts, st, scenario.agents_at(ts)) for ts, st in history[-5:])
        scene = SceneContext(ego=ego, agents=scenario.agents_at(t),
                             route=scenario.route, history=hist, timestamp=t)
        t0 = time.perf_counter()
        try:
            traj = planner(scene)
        except Exception as exc:  # noqa: BLE001 - annotate with the tick
            raise RolloutError(k, exc) from exc
        wall_times.append(time.perf_counter() - t0)
        chosen.append((len(traj.states), 1, False))
        history.append((t, ego))
        ego = traj.states[1]  # teleport one step along the plan
        states.append(ego)
        agent_states.append(scenario.agents_at(t + TICK_DT))
    return Rollout(scenario_id=scenario.scenario_id, states=states,
                   chosen=chosen, wall_times=wall_times,
                   agent_states=agent_states)


# --- safety -----------------------------------------------------------------

def _agent_boxes(tracks) -> np.ndarray:
    return np.array([[t.pose[0], t.pose[1], t.pose[2], t.extent[0], t.extent[1]]
                     for t in tracks]).reshape(-1, 5)


def _overlap_front_half(ego: EgoState, extent, track) -> bool:
    """True when the overlap region's center lies in the ego's front half."""
    ego_poly = Polygon(obb_corners(ego.x, ego.y, ego.theta, *extent))
    ag_poly = Polygon(obb_corners(track.pose[0], track.pose[1], track.pose[2],
                                  *track.extent))
    inter = ego_poly.intersection(ag_poly)
    if inter.is_empty or inter.area <= 0:
        # touching contact; fall back to the agent's center side
        cx, cy = track.pose[0], track.pose[1]
    else:
        cx, cy = inter.centroid.x, inter.centroid.y
    dx = (cx - ego.x) * math.cos(ego.theta) + (cy - ego.y) * math.sin(ego.theta)
    return dx > 0.0


def front_collision(rollout: Rollout, scenario) -> bool:
    extent = (4.9, 2.0)
    for ego, tracks in zip(rollout.states, rollout.agent_states):
        if not tracks:
            continue
        ag = _agent_boxes(tracks)
        ego_box = np.tile([ego.x, ego.y, ego.theta, extent[0], extent[1]],
                          (len(ag), 1))
        hits = obb_overlap_many(ego_box, ag)
        for j, hit in enumerate(hits):
            if hit and _overlap_front_half(ego, extent, tracks[j]):
                return True
    return False


def off_road(rollout: Rollout, scenario) -> bool:
    limit = scenario.route.lane_half_width + OFF_ROAD_MARGIN
    for ego in rollout.states:
        corners = obb_corners(ego.x, ego.y, ego.theta, 4.9, 2.0)
        for cx, cy in corners:
            _, lat, _ = project_to_route((cx, cy), scenario.route)
            if abs(lat) > limit:
                return True
    return False


def _lead_gap(ego: EgoState, tracks, route) -> float:
    """Bumper gap to the nearest in-corridor agent ahead (inf if none)."""
    s_ego, _, _ = project_to_route((ego.x, ego.y), route)
    best = math.inf
    for tr in tracks:
        s, lat, _ = project_to_route(tr.pose[:2], route)
        if abs(lat) > route.lane_half_width or s <= s_ego:
            continue
        gap = (s - s_ego) - 0.5 * (4.9 + tr.extent[0])
        best = min(best, gap)
    return best


def tailgate(rollout: Rollout, scenario) -> bool:
    for ego, tracks in zip(rollout.states, rollout.agent_states):
        if _lead_gap(ego, tracks, scenario.route) < TAILGATE_GAP:
            return True
    return False


def _ttc_from_state(ego: EgoState, t0: float, scenario) -> float:
    """Seconds to first footprint overlap, ego extrapolated at constant
    velocity along its heading, agents replayed; saturated at 4.0 s."""
    taus = np.arange(0.0, TTC_SATURATION + TTC_FINE_DT / 2, TTC_FINE_DT)
    ex = ego.x + ego.v * taus * math.cos(ego.theta)
    ey = ego.y + ego.v * taus * math.sin(ego.theta)
    ego_boxes = np.stack([ex, ey, np.full_like(taus, ego.theta),
                          np.full_like(taus, 4.9), np.full_like(taus, 2.0)], axis=1)
    best = TTC_SATURATION
    for rep in scenario.agents:
        tt = np.clip(t0 + taus, rep.times[0], rep.times[-1])
        boxes = np.stack([
            np.interp(tt, rep.times, rep.xs),
            np.interp(tt, rep.times, rep.ys),
            np.interp(tt, rep.times, np.unwrap(rep.thetas)),
            np.full_like(taus, rep.extent[0]),
            np.full_like(taus, rep.extent[1])], axis=1)
        # circle prefilter before the exact per-time footprint test
        dist = np.hypot(boxes[:, 0] - ex, boxes[:, 1] - ey)
        reach = 0.5 * (np.hypot(4.9, 2.0) + np.hypot(*rep.extent))
        near = np.nonzero(dist <= reach)[0]
        for k in near:
            if obb_overlap_many(ego_boxes[k:k + 1], boxes[k:k + 1])[0]:
                best = min(best, float(taus[k]))
                break
    return best


def min_ttc_over_rollout(rollout: Rollout, scenario) -> float:
    best = TTC_SATURATION
    for k, ego in enumerate(rollout.states):
        best = min(best, _ttc_from_state(ego, k * TICK_DT, scenario))
        if best <= 0.0:
            break
    return best


# --- comfort / progress / imitation ------------------------------------------

def _kinematics(rollout: Rollout) -> dict:
    """Finite-difference kinematics of the executed path at dt = 0.2 s."""
    xy = rollout.xy()
    th = rollout.headings()
    dt = TICK_DT
    vel = np.diff(xy, axis=0) / dt                     # (50, 2)
    speed = np.linalg.norm(vel, axis=1)
    lon_acc = np.diff(speed) / dt
    lon_jerk = np.diff(lon_acc) / dt
    yaw_rate = wrap_angle_array(np.diff(th)) / dt
    yaw_acc = np.diff(yaw_rate) / dt
    lat_acc = speed[1:] * yaw_rate[1:]                 # v * thetadot, aligned
    acc_vec = np.diff(vel, axis=0) / dt                # (49, 2)
    jerk_vec = np.diff(acc_vec, axis=0) / dt           # (48, 2)
    jerk_mag = np.linalg.norm(jerk_vec, axis=1)
    return {"speed": speed, "lon_acc": lon_acc, "lon_jerk": lon_jerk,
            "yaw_rate": yaw_rate, "yaw_acc": yaw_acc, "lat_acc": lat_acc,
            "jerk_mag": jerk_mag}


@dataclass
class MetricsReport:
    safety: dict
    comfort: dict
    progress: dict
    l2: dict
    tags: frozenset = frozenset()

    def as_row(self) -> dict:
        return {
            "safety": self.safety["category_score"],
            "comfort": self.comfort["category_score"],
            "progress": self.progress["category_score"],
            "l2_with_yaw": self.l2["avg_l2_with_yaw"],
            "collision": float(not self.safety["front_collision_ok"]),
            "tailgate": float(not self.safety["tailgate_ok"]),
        }


def _category(checks: dict) -> dict:
    out = dict(checks)
    out["category_score"] = float(np.mean([bool(v) for v in checks.values()]))
    return out


def compute_metrics(rollout: Rollout, scenario) -> MetricsReport:
    kin = _kinematics(rollout)
    safety = _category({
        "front_collision_ok": not front_collision(rollout, scenario),
        "off_road_ok": not off_road(rollout, scenario),
        "min_ttc_ok": min_ttc_over_rollout(rollout, scenario) > MIN_TTC_THRESHOLD,
        "tailgate_ok": not tailgate(rollout, scenario),
    })
    comfort = _category({
        "lon_accel_ok": bool(np.all((kin["lon_acc"] > LON_ACCEL_BOUNDS[0])
                                    & (kin["lon_acc"] < LON_ACCEL_BOUNDS[1]))),
        "lat_accel_ok": bool(np.all(np.abs(kin["lat_acc"]) < LAT_ACCEL_MAX)),
        "yaw_rate_ok": bool(np.all(np.abs(kin["yaw_rate"]) < YAW_RATE_MAX)),
        "yaw_accel_ok": bool(np.all(np.abs(kin["yaw_acc"]) < YAW_ACCEL_MAX)),
        "lon_jerk_ok": bool(np.all(np.abs(kin["lon_jerk"]) < LON_JERK_MAX)),
        "jerk_mag_ok": bool(np.all(kin["jerk_mag"] < JERK_MAG_MAX)),
    })
    exp_xy = scenario.expert.xy()
    exp_th = scenario.expert.headings()
    xy = rollout.xy()
    th = rollout.headings()
    expert_moved = float(np.linalg.norm(exp_xy[-1] - exp_xy[0]))
    ego_moved = float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))
    div = np.linalg.norm(xy - exp_xy, axis=1)
    progress = _category({
        # a correctly stopped ego is not penalized when the expert never moved
        "moved_ok": ego_moved > PROGRESS_MIN or expert_moved <= PROGRESS_MIN,
        "divergence_ok": bool(np.all(div < DIVERGENCE_MAX)),
    })
    dth = wrap_angle_array(th - exp_th)
    l2_yaw = np.sqrt(div ** 2 + (YAW_L2_WEIGHT * dth) ** 2)
    l2 = {"avg_l2_with_yaw": float(np.mean(l2_yaw)), "avg_l2": float(np.mean(div))}
    return MetricsReport(safety=safety, comfort=comfort, progress=progress,
                         l2=l2, tags=tag_scenario(scenario))


# --- scenario tags -----------------------------------------------------------

def tag_scenario(scenario) -> frozenset:
    expert = scenario.expert
    xy = expert.xy()
    th = expert.headings()
    v = expert.speeds()
    tags = set()
    net_turn = float(np.sum(wrap_angle_array(np.diff(th))))
    if abs(net_turn) < TAG_STRAIGHT_RAD:
        tags.add("Straight")
    elif net_turn > TAG_TURN_RAD:
        tags.add("Left")
    elif net_turn < -TAG_TURN_RAD:
        tags.add("Right")
    if float(np.max(v)) < TAG_SLOW_SPEED:
        tags.add("Slow")
    if float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1))) < TAG_STOPPED_DISP:
        tags.add("Stopped")
    if scenario.intersection:
        tags.add("Intersection")
    for k, ego in enumerate(expert.states):
        tracks = scenario.agents_at(k * TICK_DT)
        gap = _lead_gap(ego, tracks, scenario.route)
        if not math.isinf(gap):
            if ego.v > 0.1 and gap / ego.v < TAG_CLOSE_TIME_GAP:
                tags.add("Close")
            lead_stopped = any(t.v < 0.1 for t in tracks)
            if gap < TAG_ASV_DISTANCE and lead_stopped:
                tags.add("ASV")
    return frozenset(tags)


# --- aggregation -------------------------------------------------------------

SUMMARY_COLUMNS = ("safety", "comfort", "progress", "l2_with_yaw",
                   "collision", "tailgate")


def aggregate(reports) -> dict:
    """Mean category scores and event rates over scenario reports."""
    rows = [r.as_row() for r in reports]
    summary = {col: float(np.mean([row[col] for row in rows]))
               for col in SUMMARY_COLUMNS}
    summary["n"] = len(rows)
    per_tag = {}
    for r in reports:
        for tag in r.tags:
            per_tag.setdefault(tag, []).append(r.l2["avg_l2_with_yaw"])
    summary["l2_per_tag"] = {t: float(np.mean(v)) for t, v in sorted(per_tag.items())}
    return summary


def write_summary_csv(path, summaries: dict) -> None:
    """summaries: planner name -> aggregate() dict; Table-style CSV."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["planner", *SUMMARY_COLUMNS, "n"])
        for name, s in summaries.items():
            w.writerow([name] + [f"{s[c]:.6g}" for c in SUMMARY_COLUMNS] + [s["n"]])
