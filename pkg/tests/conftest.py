"""Shared fixtures: simple routes, scenes, and agent helpers."""

import numpy as np
import pytest

from irlplan.geometry import (AgentKind, AgentTrack, EgoState, RouteSpec,
                              SceneContext)


def straight_route(length=400.0, speed_limit=15.0, spacing=5.0):
    xs = np.arange(0.0, length + spacing, spacing)
    return RouteSpec(centerline=[(x, 0.0) for x in xs], speed_limit=speed_limit)


def make_scene(ego=None, agents=(), route=None, timestamp=0.0):
    """Scene with a synthetic constant-motion 1 s history behind the ego."""
    if route is None:
        route = straight_route()
    if ego is None:
        ego = EgoState(x=20.0, y=0.0, theta=0.0, v=10.0)
    history = []
    for k in range(5, 0, -1):
        t = -0.2 * k
        past = EgoState(x=ego.x + ego.v * t * np.cos(ego.theta),
                        y=ego.y + ego.v * t * np.sin(ego.theta),
                        theta=ego.theta, v=ego.v)
        history.append((timestamp + t, past, tuple(agents)))
    return SceneContext(ego=ego, agents=tuple(agents), route=route,
                        history=tuple(history), timestamp=timestamp)


def vehicle(agent_id, x, y, theta=0.0, v=0.0, extent=(4.5, 2.0),
            has_lane=True, kind=AgentKind.VEHICLE):
    return AgentTrack(id=agent_id, kind=kind, pose=(x, y, theta),
                      extent=extent, v=v, has_lane=has_lane)


@pytest.fixture
def scene_free():
    return make_scene()


@pytest.fixture
def scene_with_lead():
    lead = vehicle("lead", 60.0, 0.0, v=8.0)
    return make_scene(agents=(lead,))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
