"""Safety filter tests.

Oracles: closed-form stopping distances of the jerk-limited firm brake,
fine-grid numerical integration of the brake ODE, and a step-by-step gap
recomputation for the follow-then-brake check.
"""

import math

import numpy as np
import pytest

from irlplan.geometry import EgoState, Trajectory
from irlplan.safety import (SafetyConfig, _brake_profile, check_trajectory,
                            filter_set, modify_trajectory, worst_case_lead)
from irlplan.trajgen import generate_trajectories

from conftest import make_scene, vehicle


def brake_stop_ode(v0, a0, cfg, dt=1e-5):
    """Integrate the jerk ramp numerically; returns (t_stop, s_stop)."""
    v, a, s, t = v0, a0, 0.0, 0.0
    a_target = -cfg.ego_firm_brake
    j = -cfg.ego_jerk_limit if a0 > a_target else cfg.ego_jerk_limit
    while v > 0.0 and t < 60.0:
        if (j < 0 and a > a_target) or (j > 0 and a < a_target):
            a_next = a + j * dt
            if (j < 0 and a_next < a_target) or (j > 0 and a_next > a_target):
                a_next = a_target
        else:
            a_next = a_target
        v_next = v + 0.5 * (a + a_next) * dt
        s += 0.5 * (v + max(0.0, v_next)) * dt
        v, a = v_next, a_next
        t += dt
    return t, s


def test_stop_distance_from_ten_mps():
    # follow 1 s at 10 m/s, then ramp a from 0 to -2.5 at 3.5 m/s^3 and
    # hold: total distance about 33.5 m
    cfg = SafetyConfig()
    states = tuple(EgoState(x=2.0 * i, y=0.0, theta=0.0, v=10.0)
                   for i in range(31))
    mod = modify_trajectory(Trajectory(states=states, dt=0.2), cfg)
    total = mod.states[-1].x - mod.states[0].x
    assert total == pytest.approx(33.51828, abs=0.02)
    _, s_ode = brake_stop_ode(10.0, 0.0, cfg)
    assert total == pytest.approx(10.0 + s_ode, abs=2e-3)


def test_lead_hard_brake_distance_closed_form():
    # v^2 / (2b) with b = 3.5 and v = 8: 64/7 m
    cfg = SafetyConfig()
    ego = EgoState(x=0.0, y=0.0, theta=0.0, v=0.0)
    lead = vehicle("lead", 0.0, 0.0, v=8.0)
    scene = make_scene(ego=ego, agents=(lead,))
    tracks = worst_case_lead(scene, cfg, horizon=12.0, dt=0.2)
    travelled = tracks["lead"].poses[-1, 0] - 0.0
    assert travelled == pytest.approx(64.0 / 7.0, abs=1e-3)


def test_brake_profile_matches_ode_on_random_states(rng):
    cfg = SafetyConfig()
    for _ in range(20):
        v0 = rng.uniform(0.5, 18.0)
        a0 = rng.uniform(-2.0, 1.5)
        _, _, s_stop = _brake_profile(v0, a0, cfg, 0.2)
        _, s_ode = brake_stop_ode(v0, a0, cfg)
        assert s_stop == pytest.approx(s_ode, abs=2e-3)


def test_modified_keeps_plan_then_brakes():
    scene = make_scene()
    ts = generate_trajectories(scene)
    cfg = SafetyConfig()
    for traj in ts.trajectories:
        mod = modify_trajectory(traj, cfg)
        # identical for the first follow_time second
        for a, b in zip(traj.states[:6], mod.states[:6]):
            assert (a.x, a.y, a.v) == (b.x, b.y, b.v)
        v = mod.speeds()
        assert v[-1] == 0.0
        # deceleration and jerk bounded after the follow window: the accel
        # ramps from its follow-window value (at most +1.5) down to -2.5
        acc = np.diff(v[5:]) / mod.dt
        assert np.all(acc <= 1.5 + 1e-6)
        # never brakes harder than the plan's own deceleration or the firm
        # brake target, whichever is stronger
        floor = min(traj.states[0].a, -cfg.ego_firm_brake)
        assert np.all(acc >= floor - 1e-6)
        # discrete jerk is only meaningful while still moving: the partial
        # step in which v reaches zero aliases to a large finite difference
        jerk = np.diff(acc) / mod.dt
        moving = v[7:] > 0.0
        assert np.all(np.abs(jerk[moving]) <= cfg.ego_jerk_limit + 1e-6)


def test_modified_path_unchanged():
    scene = make_scene()
    ts = generate_trajectories(scene)
    for traj in ts.trajectories:
        mod = modify_trajectory(traj)
        xy = traj.xy()
        mxy = mod.xy()
        # every modified position lies on the original path (within the
        # shared arclength range)
        seg = np.hypot(*(np.diff(xy, axis=0).T))
        s_orig = np.concatenate([[0.0], np.cumsum(seg)])
        mseg = np.hypot(*(np.diff(mxy, axis=0).T))
        s_mod = np.concatenate([[0.0], np.cumsum(mseg)])
        inside = s_mod <= s_orig[-1] + 1e-9
        x_ref = np.interp(s_mod[inside], s_orig, xy[:, 0])
        y_ref = np.interp(s_mod[inside], s_orig, xy[:, 1])
        err = np.hypot(mxy[inside, 0] - x_ref, mxy[inside, 1] - y_ref)
        assert np.all(err <= 1e-6)


def test_stopped_close_lead_rejected():
    # stopped lead 1.4 m bumper-to-bumper ahead: below the 1.5 m minimum
    ego = EgoState(x=20.0, y=0.0, theta=0.0, v=0.0)
    gap = 1.4
    lead_x = 20.0 + 4.5 / 2.0 + 4.5 / 2.0 + gap
    lead = vehicle("lead", lead_x, 0.0, v=0.0)
    scene = make_scene(ego=ego, agents=(lead,))
    states = tuple(EgoState(x=20.0, y=0.0, theta=0.0, v=0.0) for _ in range(31))
    traj = Trajectory(states=states, dt=0.2)
    assert not check_trajectory(modify_trajectory(traj), scene)


def test_gap_oracle_stepwise():
    # recompute the worst-case gap by hand for a straight-road scene
    cfg = SafetyConfig()
    ego = EgoState(x=20.0, y=0.0, theta=0.0, v=10.0)
    lead = vehicle("lead", 55.0, 0.0, v=6.0)
    scene = make_scene(ego=ego, agents=(lead,))
    ts = generate_trajectories(scene)
    for traj in ts.trajectories:
        mod = modify_trajectory(traj, cfg)
        times = mod.times()
        lead_stop = 55.0 + 6.0 ** 2 / (2.0 * cfg.lead_hard_brake)
        t_stop = 6.0 / cfg.lead_hard_brake
        lead_x = np.where(times < t_stop,
                          55.0 + 6.0 * times - 0.5 * cfg.lead_hard_brake * times ** 2,
                          lead_stop)
        gap = lead_x - mod.xy()[:, 0] - 0.5 * (scene.ego_extent[0] + 4.5)
        expected = bool(np.all(gap >= cfg.min_gap - 1e-12))
        assert check_trajectory(mod, scene, cfg) == expected


def test_filter_monotone_in_lead_distance():
    # more headway can only enlarge the accepted set
    counts = []
    for lead_x in (30.0, 45.0, 70.0, 120.0):
        lead = vehicle("lead", lead_x, 0.0, v=0.0)
        scene = make_scene(agents=(lead,))
        ts = generate_trajectories(scene)
        kept, mask = filter_set(ts, scene)
        counts.append(int(mask.sum()))
    assert counts == sorted(counts)
    assert counts[-1] == 14


def test_filter_free_road_keeps_everything():
    scene = make_scene()
    ts = generate_trajectories(scene)
    kept, mask = filter_set(ts, scene)
    assert mask.all()
    assert not kept.fallback
    assert len(kept) == len(ts)


def test_filter_fallback_is_hardest_brake():
    # an impossible scene: fast ego, stopped lead right ahead
    ego = EgoState(x=20.0, y=0.0, theta=0.0, v=14.0)
    lead = vehicle("lead", 28.0, 0.0, v=0.0)
    scene = make_scene(ego=ego, agents=(lead,))
    ts = generate_trajectories(scene)
    kept, mask = filter_set(ts, scene)
    assert not mask.any()
    assert kept.fallback
    assert len(kept) == 1
    assert kept.provenance[0][0] == -5.0


def test_agents_behind_or_off_lane_ignored():
    behind = vehicle("behind", 5.0, 0.0, v=12.0)
    off = vehicle("off", 40.0, 6.0, v=0.0)
    scene = make_scene(agents=(behind, off))
    ts = generate_trajectories(scene)
    _, mask = filter_set(ts, scene)
    assert mask.all()


def test_config_validation():
    with pytest.raises(ValueError):
        SafetyConfig(min_gap=0.0)
    with pytest.raises(ValueError):
        SafetyConfig(ego_jerk_limit=-1.0)
