"""Scenario records, their JSONL serialization, and a synthetic generator.

A scenario is 11 seconds of traffic at 0.2 s resolution: 1 second of ego +
agent history, a 10 second "expert" ego future, and 11 seconds of agent
replay.  Synthetic scenes are scripted kinematically; the expert is an
IDM-style follower with comfort-bounded, rate-limited accelerations so the
ground truth itself passes the comfort metric suite by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (AgentKind, AgentTrack, EgoState, RouteSpec, SceneContext,
                       Trajectory, TICK_DT, project_to_route)
from .prediction import IdmParams, idm_accel

FORMAT_VERSION = 1
SCRIPTS = ("free_flow", "lead_follow", "lead_brake", "stop_and_go",
           "cut_in", "turn", "stopped")

HISTORY_SEC = 1.0
FUTURE_SEC = 10.0
N_REPLAY = int(round((HISTORY_SEC + FUTURE_SEC) / TICK_DT)) + 1  # 56 samples

# expert comfort envelope, inset from the metric thresholds
EXPERT_ACCEL_LO = -3.4
EXPERT_ACCEL_HI = 1.8
EXPERT_JERK = 3.0  # max accel change per second


@dataclass(frozen=True)
class AgentReplay:
    """One agent's recorded motion over the full 11 s window."""

    agent_id: str
    kind: AgentKind
    extent: tuple[float, float]
    times: np.ndarray   # (K,) seconds, history negative
    xs: np.ndarray
    ys: np.ndarray
    thetas: np.ndarray
    vs: np.ndarray
    has_lane: bool = True

    def track_at(self, t: float) -> AgentTrack:
        t = min(max(t, self.times[0]), self.times[-1])
        x = float(np.interp(t, self.times, self.xs))
        y = float(np.interp(t, self.times, self.ys))
        th = float(np.interp(t, self.times, np.unwrap(self.thetas)))
        v = float(np.interp(t, self.times, self.vs))
        return AgentTrack(id=self.agent_id, kind=self.kind, pose=(x, y, th),
                          extent=self.extent, v=max(0.0, v), has_lane=self.has_lane)


@dataclass
class ScenarioRecord:
    scenario_id: str
    script: str
    seed: int
    route: RouteSpec
    expert: Trajectory          # 51 states, t = 0 .. 10 s
    agents: list                # AgentReplay
    intersection: bool = False

    def __post_init__(self):
        if len(self.expert.states) != int(FUTURE_SEC / TICK_DT) + 1:
            raise ValueError("expert future must span 10 s at 0.2 s")

    def agents_at(self, t: float) -> tuple:
        # memoized: the simulator asks for the same tick times repeatedly
        cache = self.__dict__.setdefault("_agents_at_cache", {})
        key = round(t, 9)
        if key not in cache:
            cache[key] = tuple(a.track_at(t) for a in self.agents)
        return cache[key]

    def ego_history_states(self):
        """The five history (timestamp, EgoState) pairs, t = -1.0 .. -0.2."""
        return list(self._history)

    def set_history(self, history):
        self._history = tuple(history)

    def initial_scene(self) -> SceneContext:
        hist = tuple((ts, st, self.agents_at(ts)) for ts, st in self._history)
        return SceneContext(ego=self.expert.states[0], agents=self.agents_at(0.0),
                            route=self.route, history=hist, timestamp=0.0)


# --- synthetic generation ---------------------------------------------------

def _straight_route(length=260.0, speed_limit=12.0) -> RouteSpec:
    # coarse straight polyline: projection cost scales with segment count
    # and extra vertices add nothing on a straight
    xs = np.arange(0.0, length + 1.0, 5.0)
    pts = np.stack([xs, np.zeros_like(xs)], axis=1)
    return RouteSpec(pts, speed_limit=speed_limit, max_spacing=math.inf)


def _turn_route(radius: float, direction: float, speed_limit: float,
                curve_speed: float) -> RouteSpec:
    """Straight 60 m, 90 degree arc, straight 150 m, slower limit in the arc."""
    lead_in = 60.0
    pts = [(x, 0.0) for x in np.arange(0.0, lead_in, 4.0)]
    cx, cy = lead_in, direction * radius
    n_arc = max(16, int(radius * math.pi / 2))  # ~1 m chords on the arc
    for ang in np.linspace(0.0, math.pi / 2, n_arc + 1):
        pts.append((cx + radius * math.sin(ang),
                    cy - direction * radius * math.cos(ang)))
    end_x, end_y = pts[-1]
    for d in np.arange(4.0, 120.0, 4.0):
        pts.append((end_x, end_y + direction * d))
    arc_len = radius * math.pi / 2
    limits = [(0.0, speed_limit), (lead_in - 15.0, curve_speed),
              (lead_in + arc_len + 10.0, speed_limit)]
    return RouteSpec(np.array(pts), speed_limit=limits, max_spacing=math.inf)


def _effective_lead(s_ego: float, t: float, agents, route: RouteSpec,
                    ego_len: float):
    """Nearest in-corridor agent ahead: (bumper gap, lead speed) or None."""
    best = None
    for rep in agents:
        tr = rep.track_at(t)
        s, lat, _ = project_to_route(tr.pose[:2], route)
        if abs(lat) > route.lane_half_width or s <= s_ego:
            continue
        gap = (s - s_ego) - 0.5 * (tr.extent[0] + ego_len)
        if gap <= 0:
            gap = 0.01
        if best is None or gap < best[0]:
            best = (gap, tr.v)
    return best


def _drive_expert(route: RouteSpec, agents, s_start: float, v_start: float,
                  ego_len: float, hold_stopped: bool = False):
    """Integrate the comfort-bounded IDM expert from t=-1 to t=10.

    Returns (states, times): 56 EgoStates on the tick grid.  The IDM desired
    speed tracks the local speed limit; acceleration is clamped inside the
    comfort envelope and rate-limited so finite-difference jerk stays legal.
    """
    times = np.arange(-HISTORY_SEC, FUTURE_SEC + TICK_DT / 2, TICK_DT)
    s, v, a_prev = s_start, v_start, 0.0
    states = []
    for t in times:
        x, y, th = route.pose_at(s)
        states.append(EgoState(x=x, y=y, theta=th, v=v, a=a_prev))
        if hold_stopped:
            continue
        p = IdmParams(a_max=1.5, b_comf=2.0,
                      v_desired=max(0.5, route.speed_limit_at(s)),
                      headway_T=1.5, s0=2.0)
        lead = _effective_lead(s, t, agents, route, ego_len)
        if lead is None:
            a = idm_accel(v, math.inf, 0.0, p)
        else:
            a = idm_accel(v, lead[0], lead[1], p)
        a = min(max(a, EXPERT_ACCEL_LO), EXPERT_ACCEL_HI)
        da = EXPERT_JERK * TICK_DT
        a = min(max(a, a_prev - da), a_prev + da)
        if v + a * TICK_DT < 0:
            a = -v / TICK_DT
        v = v + a * TICK_DT
        s = s + v * TICK_DT
        a_prev = a
    return states, times


def _const_speed_replay(agent_id, route, s0, v, t_profile, extent,
                        lat_offset=0.0, kind=AgentKind.VEHICLE, has_lane=True):
    """Agent replay following the route at scripted speeds.

    t_profile: callable t -> accel; integrated on the tick grid.
    """
    times = np.arange(-HISTORY_SEC, FUTURE_SEC + TICK_DT / 2, TICK_DT)
    s, vv = s0, v
    xs, ys, ths, vs = [], [], [], []
    for t in times:
        x, y, th = route.pose_at(s)
        off = lat_offset(t) if callable(lat_offset) else lat_offset
        xs.append(x - off * math.sin(th))
        ys.append(y + off * math.cos(th))
        ths.append(th)
        vs.append(vv)
        a = t_profile(t)
        vv = max(0.0, vv + a * TICK_DT)
        s = s + vv * TICK_DT
    return AgentReplay(agent_id=agent_id, kind=kind, extent=extent,
                       times=times, xs=np.array(xs), ys=np.array(ys),
                       thetas=np.array(ths), vs=np.array(vs), has_lane=has_lane)


def _build_script(script: str, rng: np.random.Generator):
    """Route, agents, ego start (s, v), and flags for one scripted scene."""
    ego_len = 4.9
    intersection = False
    hold_stopped = False
    if script == "turn":
        limit = rng.uniform(8.0, 11.0)
        curve_v = rng.uniform(4.5, 5.5)
        radius = rng.uniform(25.0, 35.0)
        direction = 1.0 if rng.random() < 0.5 else -1.0
        route = _turn_route(radius, direction, limit, curve_v)
        intersection = True
        agents = []
        s0, v0 = rng.uniform(3.0, 10.0), rng.uniform(5.0, 7.0)
        return route, agents, s0, v0, intersection, hold_stopped
    limit = rng.uniform(9.0, 13.0)
    route = _straight_route(speed_limit=limit)
    s0 = rng.uniform(3.0, 10.0)
    car = (rng.uniform(4.2, 5.2), rng.uniform(1.8, 2.1))
    agents = []
    if script == "free_flow":
        v0 = rng.uniform(0.7, 1.0) * limit
    elif script == "lead_follow":
        v_lead = rng.uniform(0.5, 0.85) * limit
        v0 = v_lead + rng.uniform(-0.5, 0.5)
        gap = v0 * 1.5 + rng.uniform(8.0, 18.0)
        agents.append(_const_speed_replay("lead", route, s0 + ego_len + gap,
                                          v_lead, lambda t: 0.0, car))
    elif script == "lead_brake":
        v_lead = rng.uniform(0.55, 0.8) * limit
        v0 = v_lead
        gap = v0 * 2.0 + rng.uniform(12.0, 20.0)
        t_brake = rng.uniform(1.5, 2.5)

        def brake(t, t_brake=t_brake, v_lead=v_lead):
            if t < t_brake:
                return 0.0
            return -3.0 if t < t_brake + v_lead / 3.0 else 0.0

        agents.append(_const_speed_replay("lead", route, s0 + ego_len + gap,
                                          v_lead, brake, car))
    elif script == "stop_and_go":
        v0 = rng.uniform(0.45, 0.65) * limit
        gap = v0 * 2.5 + rng.uniform(12.0, 18.0)
        t_go = rng.uniform(4.0, 6.0)

        def go(t, t_go=t_go, limit=limit):
            if t < t_go:
                return 0.0
            return 1.0 if t < t_go + limit else 0.0

        agents.append(_const_speed_replay("lead", route, s0 + ego_len + gap,
                                          0.0, go, car))
    elif script == "cut_in":
        v0 = rng.uniform(0.6, 0.8) * limit
        v_cut = v0 + rng.uniform(0.0, 1.0)
        t_cut = rng.uniform(1.0, 2.5)
        merge_T = 2.0
        side = 3.5 if rng.random() < 0.5 else -3.5

        def lat(t, t_cut=t_cut, side=side):
            if t < t_cut:
                return side
            if t > t_cut + merge_T:
                return 0.0
            u = (t - t_cut) / merge_T
            return side * (1.0 - u * u * (3.0 - 2.0 * u))

        gap = v0 * 1.8 + rng.uniform(10.0, 16.0)
        agents.append(_const_speed_replay("cutter", route, s0 + ego_len + gap,
                                          v_cut, lambda t: 0.0, car,
                                          lat_offset=lat))
    elif script == "stopped":
        v0 = 0.0
        hold_stopped = True
        gap = rng.uniform(2.0, 4.0)
        agents.append(_const_speed_replay("lead", route, s0 + ego_len + gap,
                                          0.0, lambda t: 0.0, car))
    else:
        raise ValueError(f"unknown script {script!r}")
    return route, agents, s0, v0, intersection, hold_stopped


DEFAULT_MIX = {
    "free_flow": 0.24,
    "lead_follow": 0.28,
    "lead_brake": 0.12,
    "stop_and_go": 0.12,
    "cut_in": 0.09,
    "turn": 0.10,
    "stopped": 0.05,
}


def generate_scenario(script: str, seed: int) -> ScenarioRecord:
    rng = np.random.default_rng(seed)
    route, agents, s0, v0, intersection, hold = _build_script(script, rng)
    states, times = _drive_expert(route, agents, s0, v0, 4.9, hold)
    n_hist = int(HISTORY_SEC / TICK_DT)
    history = [(float(times[k]), states[k]) for k in range(n_hist)]
    expert = Trajectory(states=tuple(states[n_hist:]), dt=TICK_DT)
    rec = ScenarioRecord(scenario_id=f"{script}-{seed:08d}", script=script,
                         seed=seed, route=route, expert=expert, agents=agents,
                         intersection=intersection)
    rec.set_history(history)
    return rec


def generate_synthetic_scenarios(n: int, seed: int, mix: dict | None = None):
    """Deterministic list of n scenarios drawn from the script mixture."""
    mix = DEFAULT_MIX if mix is None else mix
    for name in mix:
        if name not in SCRIPTS:
            raise ValueError(f"unknown script {name!r}")
    names = sorted(mix)
    weights = np.array([mix[k] for k in names], dtype=float)
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        script = names[int(rng.choice(len(names), p=weights))]
        records.append(generate_scenario(script, seed=int(rng.integers(1 << 31))))
    return records


# --- JSONL serialization ----------------------------------------------------
# One scenario per line.  Floats go through Python repr (shortest round-trip
# representation), so write-then-read is bit-exact.

def _ego_to_list(s: EgoState):
    return [s.x, s.y, s.theta, s.v, s.a, s.steering]


def _ego_from_list(row) -> EgoState:
    st = EgoState(x=row[0], y=row[1], theta=row[2], v=row[3], a=row[4],
                  steering=row[5])
    # bypass the wrap/clamp normalization so round-trips are bit-exact
    object.__setattr__(st, "theta", row[2])
    object.__setattr__(st, "v", row[3])
    return st


def scenario_to_dict(rec: ScenarioRecord) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "id": rec.scenario_id,
        "script": rec.script,
        "seed": rec.seed,
        "intersection": rec.intersection,
        "route": {
            "points": rec.route.points.tolist(),
            "lane_half_width": rec.route.lane_half_width,
            "speed_limit": rec.route.speed_limit_pieces(),
        },
        "history": [[ts] + _ego_to_list(st) for ts, st in rec.ego_history_states()],
        "expert": [_ego_to_list(s) for s in rec.expert.states],
        "agents": [
            {
                "id": a.agent_id,
                "kind": a.kind.value,
                "extent": list(a.extent),
                "has_lane": a.has_lane,
                "times": a.times.tolist(),
                "x": a.xs.tolist(),
                "y": a.ys.tolist(),
                "theta": a.thetas.tolist(),
                "v": a.vs.tolist(),
            }
            for a in rec.agents
        ],
    }


def scenario_from_dict(d: dict) -> ScenarioRecord:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported scenario format_version {d.get('format_version')}")
    route = RouteSpec(np.array(d["route"]["points"]),
                      speed_limit=[tuple(p) for p in d["route"]["speed_limit"]],
                      lane_half_width=d["route"]["lane_half_width"],
                      max_spacing=math.inf)
    agents = [
        AgentReplay(agent_id=a["id"], kind=AgentKind(a["kind"]),
                    extent=tuple(a["extent"]), has_lane=a["has_lane"],
                    times=np.array(a["times"]), xs=np.array(a["x"]),
                    ys=np.array(a["y"]), thetas=np.array(a["theta"]),
                    vs=np.array(a["v"]))
        for a in d["agents"]
    ]
    expert = Trajectory(states=tuple(_ego_from_list(row) for row in d["expert"]),
                        dt=TICK_DT)
    rec = ScenarioRecord(scenario_id=d["id"], script=d["script"], seed=d["seed"],
                         route=route, expert=expert, agents=agents,
                         intersection=d["intersection"])
    rec.set_history([(row[0], _ego_from_list(row[1:])) for row in d["history"]])
    return rec


def save_scenarios(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(scenario_to_dict(rec)) + "\n")


def load_scenarios(path):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(scenario_from_dict(json.loads(line)))
    return records
