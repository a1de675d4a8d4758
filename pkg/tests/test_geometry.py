"""Geometric primitives against brute-force and closed-form oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irlplan.geometry import (EgoState, RouteSpec, Trajectory, angle_diff,
                              interpolate_state, obb_corners, obb_overlap,
                              obb_overlap_many, project_to_route, wrap_angle,
                              wrap_angle_array)

from conftest import straight_route


# --- oracles ---------------------------------------------------------------


def brute_force_projection(p, centerline):
    """Closest point over every segment by direct minimization."""
    p = np.asarray(p, dtype=float)
    pts = np.asarray(centerline, dtype=float)
    best = (math.inf, 0.0)
    s_cum = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        L = float(np.hypot(*seg))
        t = 0.0 if L == 0 else float(np.clip(np.dot(p - a, seg) / L**2, 0, 1))
        q = a + t * seg
        d = float(np.hypot(*(p - q)))
        if d < best[0]:
            best = (d, s_cum + t * L)
        s_cum += L
    return best  # (distance, arclength)


def raster_overlap(box_a, box_b, res=0.01):
    """1 cm point-sampling containment oracle for oriented boxes."""

    def corners(box):
        cx, cy, th, length, width = box
        return np.asarray(obb_corners(cx, cy, th, length, width))

    def contains(box, pts):
        cx, cy, th, length, width = box
        d = pts - np.array([cx, cy])
        lon = d @ np.array([math.cos(th), math.sin(th)])
        lat = d @ np.array([-math.sin(th), math.cos(th)])
        return (np.abs(lon) <= length / 2 + 1e-12) & (np.abs(lat) <= width / 2 + 1e-12)

    ca = corners(box_a)
    xs = np.arange(ca[:, 0].min(), ca[:, 0].max() + res, res)
    ys = np.arange(ca[:, 1].min(), ca[:, 1].max() + res, res)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    inside_a = contains(box_a, pts)
    return bool(np.any(contains(box_b, pts[inside_a])))


# --- projection -------------------------------------------------------------


def test_projection_on_centerline_zero_lateral():
    route = straight_route()
    s, lat, head = project_to_route((37.0, 0.0), route)
    assert lat == pytest.approx(0.0, abs=1e-12)
    assert s == pytest.approx(37.0, abs=1e-9)
    assert head == pytest.approx(0.0, abs=1e-12)


def test_projection_left_offset_positive():
    route = straight_route()
    _, lat, _ = project_to_route((50.0, 2.0), route)
    assert lat == pytest.approx(2.0, abs=1e-12)
    _, lat_r, _ = project_to_route((50.0, -2.0), route)
    assert lat_r == pytest.approx(-2.0, abs=1e-12)


def test_projection_matches_brute_force_on_random_polylines(rng):
    for _ in range(30):
        n = rng.integers(3, 12)
        steps = rng.uniform(0.5, 4.0, size=(n, 2)) * rng.choice([-1, 1], (n, 2))
        pts = np.cumsum(steps, axis=0)
        route = RouteSpec(centerline=[tuple(p) for p in pts])
        p = pts[0] + rng.uniform(-8, 8, 2)
        s, lat, _ = project_to_route(tuple(p), route)
        d_oracle, s_oracle = brute_force_projection(p, route.points)
        assert abs(lat) == pytest.approx(d_oracle, abs=1e-9)
        assert s == pytest.approx(s_oracle, abs=1e-6)


def test_projection_near_right_angle_corner():
    corner = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)]
    route = RouteSpec(centerline=corner)
    p = (11.0, -1.0)  # outside the corner elbow
    s, lat, _ = project_to_route(p, route)
    d_oracle, s_oracle = brute_force_projection(np.array(p), route.points)
    assert abs(lat) == pytest.approx(d_oracle, abs=1e-9)
    assert s == pytest.approx(s_oracle, abs=1e-6)


def test_route_densified_spacing():
    route = RouteSpec(centerline=[(0.0, 0.0), (30.0, 0.0)])
    pts = np.asarray(route.points)
    gaps = np.hypot(*np.diff(pts, axis=0).T)
    assert np.all(gaps <= 1.0 + 1e-9)


def test_route_rejects_nonpositive_speed_limit():
    with pytest.raises(ValueError):
        RouteSpec(centerline=[(0, 0), (10, 0)], speed_limit=0.0)


# --- oriented boxes ---------------------------------------------------------


def test_obb_identical_boxes_overlap():
    box = (0.0, 0.0, 0.3, 4.9, 2.0)
    assert obb_overlap(box, box)


def test_obb_distant_boxes_disjoint():
    assert not obb_overlap((0, 0, 0, 1, 1), (10, 0, 0, 1, 1))


def test_obb_45_degree_case_matches_raster_oracle():
    a = (0.0, 0.0, 0.0, 4.5, 2.0)
    b = (3.0, 0.0, math.pi / 4, 4.5, 2.0)
    assert obb_overlap(a, b) == raster_overlap(a, b)


def test_obb_random_pairs_match_raster_oracle(rng):
    for _ in range(25):
        a = (0.0, 0.0, rng.uniform(-np.pi, np.pi), rng.uniform(1, 5), rng.uniform(1, 3))
        b = (rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-np.pi, np.pi),
             rng.uniform(1, 5), rng.uniform(1, 3))
        got = obb_overlap(a, b)
        want = raster_overlap(a, b, res=0.01)
        # the raster can only miss overlaps thinner than its resolution, so a
        # disagreement is acceptable solely in the (exact-true, raster-false)
        # direction
        assert got == want or (got and not want)


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_obb_overlap_symmetric(seed):
    r = np.random.default_rng(seed)
    a = (r.uniform(-5, 5), r.uniform(-5, 5), r.uniform(-np.pi, np.pi),
         r.uniform(0.5, 5), r.uniform(0.5, 3))
    b = (r.uniform(-5, 5), r.uniform(-5, 5), r.uniform(-np.pi, np.pi),
         r.uniform(0.5, 5), r.uniform(0.5, 3))
    assert obb_overlap(a, b) == obb_overlap(b, a)


def test_obb_overlap_many_matches_scalar(rng):
    boxes_a = np.column_stack([rng.uniform(-5, 5, 40), rng.uniform(-5, 5, 40),
                               rng.uniform(-np.pi, np.pi, 40),
                               rng.uniform(0.5, 5, 40), rng.uniform(0.5, 3, 40)])
    boxes_b = np.column_stack([rng.uniform(-5, 5, 40), rng.uniform(-5, 5, 40),
                               rng.uniform(-np.pi, np.pi, 40),
                               rng.uniform(0.5, 5, 40), rng.uniform(0.5, 3, 40)])
    got = obb_overlap_many(boxes_a, boxes_b)
    want = [obb_overlap(tuple(a), tuple(b)) for a, b in zip(boxes_a, boxes_b)]
    assert list(got) == want


# --- angles and interpolation ----------------------------------------------


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_principal_value(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)


@given(st.floats(-10, 10, allow_nan=False), st.floats(-10, 10, allow_nan=False))
def test_angle_diff_principal_value(a, b):
    d = angle_diff(a, b)
    assert -math.pi < d <= math.pi


def test_wrap_angle_array_matches_scalar(rng):
    thetas = rng.uniform(-20, 20, 100)
    assert np.allclose(wrap_angle_array(thetas),
                       [wrap_angle(t) for t in thetas], atol=1e-12)


def _straight_traj(v=2.0, n=31):
    states = [EgoState(x=v * 0.2 * k, y=0.0, theta=0.0, v=v) for k in range(n)]
    return Trajectory(states=tuple(states), dt=0.2)


def test_interpolate_exact_at_samples():
    traj = _straight_traj()
    for k in (0, 7, 30):
        s = interpolate_state(traj, 0.2 * k)
        assert (s.x, s.y, s.theta, s.v) == (traj.states[k].x, traj.states[k].y,
                                            traj.states[k].theta, traj.states[k].v)


def test_interpolate_midpoint_linear():
    a = EgoState(x=0, y=0, theta=0, v=0)
    b = EgoState(x=1, y=0, theta=0, v=2)
    traj = Trajectory(states=(a, b), dt=0.2)
    mid = interpolate_state(traj, 0.1)
    assert (mid.x, mid.y, mid.theta, mid.v) == (0.5, 0.0, 0.0, 1.0)


def test_interpolate_heading_across_pi_seam():
    a = EgoState(x=0, y=0, theta=3.1, v=1)
    b = EgoState(x=1, y=0, theta=-3.1, v=1)
    traj = Trajectory(states=(a, b), dt=0.2)
    mid = interpolate_state(traj, 0.1)
    assert abs(mid.theta) == pytest.approx(math.pi, abs=1e-9)


def test_interpolate_rejects_out_of_range():
    traj = _straight_traj()
    with pytest.raises(ValueError):
        interpolate_state(traj, -0.1)
    with pytest.raises(ValueError):
        interpolate_state(traj, traj.duration + 0.1)


def test_trajectory_rejects_heading_jump():
    a = EgoState(x=0, y=0, theta=0.0, v=1)
    b = EgoState(x=1, y=0, theta=math.pi, v=1)  # exactly pi step
    with pytest.raises(ValueError):
        Trajectory(states=(a, b), dt=0.2)
