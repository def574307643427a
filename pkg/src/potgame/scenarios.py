"""Scenario layouts: a four-way intersection and three-lane highway setups."""
from __future__ import annotations

import math

from .costs import CostParams, Route, RouteState, straight_route, turn_route
from .dynamics import RoadGeometry, VehicleState
from .sim import ScenarioConfig, SurroundingPolicy

LANE_WIDTH = 5.0
BOX_HALF = LANE_WIDTH  # the conflict region is a square of side two lane widths
ROUTE_REACH = 200.0

# interaction weight for the intersection game; the speed term alone would let
# the ego drive through a crossing vehicle rather than slow down
INTERSECTION_PARAMS = CostParams(theta_2=300.0)
INTERSECTION_SPEED = 5.0


def intersection_routes() -> tuple[Route, ...]:
    """Routes for the five-vehicle intersection, ego first.

    Right-hand traffic on two-lane roads crossing at the origin: the ego goes
    straight north, vehicle 2 comes from the north and turns left (east),
    vehicle 3 goes east, vehicle 4 goes west and vehicle 5 goes straight south.
    """
    w = LANE_WIDTH / 2
    r = ROUTE_REACH
    radius = BOX_HALF + w
    return (
        straight_route((w, -r), (w, r), "ego-north"),
        turn_route((-w, r), (BOX_HALF, BOX_HALF), radius, math.pi, math.pi / 2, r - BOX_HALF, "south-left"),
        straight_route((-r, -w), (r, -w), "east"),
        straight_route((r, w), (-r, w), "west"),
        straight_route((-w, r), (-w, -r), "south"),
    )


def entry_arc_length(distance_to_box: float) -> float:
    """Arc length of a point ``distance_to_box`` before the region edge on any route above."""
    return ROUTE_REACH - BOX_HALF - distance_to_box


def intersection_config(distances, speeds, desired_speeds=None, **kwargs) -> ScenarioConfig:
    """Intersection episode with vehicles placed by their distance to the conflict region."""
    routes = intersection_routes()
    n = len(distances)
    desired = tuple(desired_speeds) if desired_speeds is not None else (INTERSECTION_SPEED,) * n
    initial = tuple(RouteState(entry_arc_length(d), float(v)) for d, v in zip(distances, speeds))
    kwargs.setdefault("params", INTERSECTION_PARAMS)
    kwargs.setdefault("game", "continuous")
    return ScenarioConfig("intersection", initial, desired, routes=routes[:n], **kwargs)


def crossing_example(**kwargs) -> ScenarioConfig:
    """A hand-placed crossing where the ego has to let vehicles 3 and 4 pass."""
    return intersection_config([10.0, 22.0, 6.0, 8.0, 30.0], [5.0, 4.0, 5.0, 5.0, 4.5], **kwargs)


def highway() -> RoadGeometry:
    return RoadGeometry(lanes=3, lane_width=LANE_WIDTH)


def _lane_state(road: RoadGeometry, x: float, lane: int, v: float) -> VehicleState:
    return VehicleState(x, float(road.lane_center(lane)), v)


def lane_change_config(vehicles, desired_speeds, duration: float = 20.0, road: RoadGeometry | None = None,
                       **kwargs) -> ScenarioConfig:
    """Highway episode from (x, lane, speed) triples; the first is the ego."""
    road = road or highway()
    initial = tuple(_lane_state(road, x, lane, v) for x, lane, v in vehicles)
    kwargs.setdefault("policy", SurroundingPolicy("constant"))
    return ScenarioConfig("lane_change", initial, tuple(desired_speeds), road=road, duration=duration, **kwargs)


def lane_change_scenario(number: int, **kwargs) -> ScenarioConfig:
    """Scenarios 1 to 3 of the highway study; surrounding vehicles hold their speed.

    1: the car ahead is slow and a faster car in lane 2 is about to pass.
    2: slow cars ahead in lanes 1 and 2, a faster car alongside in lane 3.
    3: slow cars ahead in all three lanes; the lane 2 car is the least slow.
    """
    if number == 1:
        vehicles = [(0.0, 1, 27.0), (50.0, 1, 22.0), (-5.0, 2, 30.0), (80.0, 3, 25.0), (-60.0, 3, 26.0)]
    elif number == 2:
        vehicles = [(0.0, 1, 27.0), (50.0, 1, 22.0), (70.0, 2, 23.0), (-80.0, 2, 22.0), (0.0, 3, 30.0)]
    elif number == 3:
        vehicles = [(0.0, 1, 27.0), (30.0, 1, 22.0), (40.0, 2, 24.0), (-80.0, 3, 22.0), (50.0, 3, 23.0)]
    else:
        raise ValueError("scenario number must be 1, 2 or 3")
    desired = [27.0] + [v for _, _, v in vehicles[1:]]
    return lane_change_config(vehicles, desired, **kwargs)

