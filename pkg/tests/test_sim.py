import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from potgame.costs import RouteState, build_lane_change_game, straight_route, tanh_collision_cost
from potgame.dynamics import VehicleState, lanes_visited
from potgame.game_core import StrategyProfile
from potgame.scenarios import crossing_example, highway, intersection_config, lane_change_config
from potgame.sim import (CollisionEvent, ScenarioConfig, SimTrace, SurroundingPolicy, compute_metrics,
                         conflict_point, detect_collision, run_episode, trace_records, ttc, ttc_actions,
                         write_trace)
from potgame.solvers import check_nash

GOLDEN = Path(__file__).parent / "data" / "lane_change_trace.jsonl"


def golden_config():
    return lane_change_config([(0.0, 1, 27.0), (25.0, 1, 24.0)], [27.0, 24.0], duration=2.0,
                              policy=SurroundingPolicy("nash"))


def fake_trace(events=(), times=(0.1, 0.3), ego_speeds=(5.0, 5.0, 5.0), aborted=False):
    cfg = intersection_config([20.0], [5.0], duration=1.0)
    states = np.zeros((3, 1, 5))
    states[:, 0, 2] = ego_speeds
    return SimTrace(cfg, states, np.zeros((2, 1, 2)), [], np.array(times), np.zeros(2), list(events),
                    aborted=aborted)


class TestDetectCollision:
    def test_boundary_is_strict(self):
        assert detect_collision([0.0, 7.0], [0.0, 0.0]) == []

    def test_inside_box(self):
        assert detect_collision([0.0, 3.0], [0.0, 1.0]) == [(0, 1)]

    def test_non_adjacent_lanes_never_collide(self):
        assert detect_collision([0.0, 0.0], [2.5, 12.5]) == []

    def test_pairs_are_ordered(self):
        assert detect_collision([0.0, 50.0, 2.0], [0.0, 0.0, 0.0]) == [(0, 2)]


@settings(max_examples=300, deadline=None)
@given(dx=st.floats(-15, 15), dy=st.floats(-8, 8))
def test_collision_detector_agrees_with_pairwise_cost(dx, dy):
    # the smoothed cost only matches the box test away from its edges
    assume(abs(abs(dx) - 7.0) > 1e-3 and abs(abs(dy) - 4.5) > 1e-3)
    hit = bool(detect_collision([0.0, dx], [0.0, dy]))
    cost = float(tanh_collision_cost(np.array([0.0]), np.array([0.0]), np.array([dx]), np.array([dy])))
    assert cost == pytest.approx(4.0 if hit else 0.0, abs=1e-6)


class TestTimeToCollision:
    def test_stationary(self):
        assert ttc(20.0, 0.0) == math.inf

    def test_quotient(self):
        assert ttc(20.0, 5.0) == 4.0

    def test_already_past(self):
        assert ttc(-1.0, 5.0) == math.inf

    def test_equal_times_both_brake(self):
        routes = [straight_route((-20.0, 0.0), (20.0, 0.0)), straight_route((0.0, -20.0), (0.0, 20.0))]
        states = [RouteState(15.0, 5.0), RouteState(15.0, 5.0)]
        crossings = {(0, 1): conflict_point(routes[0], routes[1]), (1, 0): conflict_point(routes[1], routes[0])}
        acts = ttc_actions(states, routes, [0, 1], SurroundingPolicy("ttc"), crossings)
        assert acts == {0: -2.0, 1: -2.0}

    def test_closer_vehicle_accelerates(self):
        routes = [straight_route((-20.0, 0.0), (20.0, 0.0)), straight_route((0.0, -20.0), (0.0, 20.0))]
        states = [RouteState(17.0, 5.0), RouteState(14.0, 5.0)]
        crossings = {(0, 1): conflict_point(routes[0], routes[1]), (1, 0): conflict_point(routes[1], routes[0])}
        acts = ttc_actions(states, routes, [0, 1], SurroundingPolicy("ttc"), crossings)
        assert acts == {0: 2.0, 1: -2.0}

    def test_far_vehicles_ignore_each_other(self):
        routes = [straight_route((-40.0, 0.0), (40.0, 0.0)), straight_route((0.0, -40.0), (0.0, 40.0))]
        states = [RouteState(10.0, 5.0), RouteState(10.0, 5.0)]
        crossings = {(0, 1): conflict_point(routes[0], routes[1]), (1, 0): conflict_point(routes[1], routes[0])}
        assert ttc_actions(states, routes, [0, 1], SurroundingPolicy("ttc"), crossings) == {0: 0.0, 1: 0.0}


class TestMetrics:
    def test_empty_input(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_collision_free_fields_absent(self):
        m = compute_metrics([fake_trace()])
        assert m.collision_rate == 0.0
        assert m.avg_relative_collision_speed is None and m.max_ego_collision_speed is None

    def test_rate_arithmetic(self):
        hit = CollisionEvent(1, (0, 2), 3.0, 2.0, 5.0)
        traces = [fake_trace([hit]) if k < 2 else fake_trace() for k in range(200)]
        m = compute_metrics(traces)
        assert m.collision_rate == 0.01
        assert m.avg_relative_collision_speed == 2.0
        assert m.max_ego_collision_speed == 5.0

    def test_events_between_surrounding_vehicles_ignored(self):
        m = compute_metrics([fake_trace([CollisionEvent(1, (1, 2), 3.0, 3.0, None)])])
        assert m.collisions == 0 and m.avg_relative_collision_speed is None

    def test_timing_matches_raw_times(self):
        a, b = fake_trace(times=(0.1, 0.4)), fake_trace(times=(0.2, 0.05))
        m = compute_metrics([a, b])
        assert m.avg_compute_time == pytest.approx(np.mean([0.1, 0.4, 0.2, 0.05]))
        assert m.max_compute_time == 0.4

    def test_aborted_counted_separately(self):
        m = compute_metrics([fake_trace(), fake_trace(aborted=True, ego_speeds=(0.0, 0.0, 0.0))])
        assert m.aborted == 1 and m.episodes == 2
        assert m.avg_ego_speed == 5.0


class TestConfig:
    def test_duration_must_be_multiple_of_dt(self):
        with pytest.raises(ValueError, match="multiple"):
            intersection_config([20.0], [5.0], duration=1.2)

    def test_lane_change_needs_finite_game(self):
        with pytest.raises(ValueError):
            lane_change_config([(0.0, 1, 27.0)], [27.0], game="continuous")

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="policy"):
            SurroundingPolicy("aggressive")

    def test_route_count(self):
        with pytest.raises(ValueError, match="route"):
            ScenarioConfig("intersection", (RouteState(0.0, 5.0),), (5.0,))


class TestEpisodes:
    def test_single_lane_vehicle_keeps_desired_speed(self):
        tr = run_episode(lane_change_config([(0.0, 2, 25.0)], [25.0], duration=3.0))
        assert np.max(np.abs(tr.states[:, 0, 2] - 25.0)) <= 1e-9
        assert lanes_visited(highway(), tr.states[:, 0, 0], tr.states[:, 0, 1]) == [2]

    @pytest.mark.parametrize("game", ["finite", "continuous"])
    def test_single_intersection_vehicle_keeps_desired_speed(self, game):
        tr = run_episode(intersection_config([30.0], [5.0], game=game, duration=3.0))
        assert np.max(np.abs(tr.states[:, 0, 2] - 5.0)) <= 1e-9

    def test_trace_shape(self):
        cfg = golden_config()
        tr = run_episode(cfg)
        assert tr.states.shape == (cfg.n_steps + 1, 2, 5)
        assert len(tr.ego_plans) == cfg.n_steps
        assert np.all(tr.solve_times >= 0)

    def test_deterministic(self, tmp_path):
        cfg = intersection_config([12.0, 20.0, 8.0], [5.0, 4.5, 5.5], game="continuous", duration=2.0, seed=4,
                                  policy=SurroundingPolicy("random"))
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for p in paths:
            write_trace(run_episode(cfg), p, include_timing=False)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    @pytest.mark.parametrize("policy", ["random", "constant", "ttc"])
    def test_no_teleporting(self, policy):
        cfg = lane_change_config([(0.0, 1, 27.0), (30.0, 1, 22.0), (-10.0, 2, 28.0)], [27.0, 22.0, 28.0],
                                 duration=3.0, policy=SurroundingPolicy(policy), seed=3)
        tr = run_episode(cfg)
        step = np.hypot(*np.diff(tr.states[:, :, :2], axis=0).transpose(2, 0, 1))
        v_max = np.max(tr.states[:, :, 2])
        assert np.all(step <= v_max * cfg.dt + 0.5 * 3.0 * cfg.dt**2 + 1e-9)

    def test_nash_followers_play_an_equilibrium(self):
        cfg = golden_config()
        tr = run_episode(cfg)
        road = cfg.road
        for k in range(cfg.n_steps):
            states = [VehicleState.from_array(row) for row in tr.states[k]]
            game = build_lane_change_game(states, road, cfg.desired_speeds, cfg.params)
            rows = []
            for i, space in enumerate(game.spaces):
                lane_now = road.lane_of(road.to_frenet(states[i].x, states[i].y)[1])
                a, target = tr.actions[k, i]
                match = np.flatnonzero((space.strategies[:, 0] == a) &
                                       (space.strategies[:, 1] == target - lane_now))
                rows.append(space.strategies[match[0]])
            assert check_nash(game, StrategyProfile(tuple(rows))).passes

    def test_intersection_crossing_with_nash_followers(self):
        tr = run_episode(crossing_example(game="continuous", policy=SurroundingPolicy("nash")))
        assert not tr.events and not tr.aborted
        v = tr.states[:, 0, 2]
        assert v.min() < v[0] - 0.5  # slows to let the crossing traffic through
        assert v[-1] > v.min() + 0.5

    def test_collisions_are_recorded_and_episode_continues(self):
        # a stopped car in the ego's lane that the ego cannot avoid in time
        cfg = lane_change_config([(0.0, 1, 30.0), (10.0, 1, 0.1)], [30.0, 0.1], duration=2.0)
        tr = run_episode(cfg)
        assert tr.ego_collided and tr.first_collision_step is not None
        assert not np.any(np.isnan(tr.states))

    def test_solver_failure_aborts_with_diagnostic(self):
        cfg = intersection_config([20.0, 25.0], [5.0, 5.0], duration=1.0, desired_speeds=[5.0, 0.0])
        tr = run_episode(cfg)
        assert tr.aborted and "step 0" in tr.diagnostic
        assert list(trace_records(tr))[-1] == {"aborted": True, "diagnostic": tr.diagnostic}


def test_golden_trace():
    records = list(trace_records(run_episode(golden_config()), include_timing=False))
    expected = [json.loads(line) for line in GOLDEN.read_text().splitlines()]
    assert len(records) == len(expected)
    for got, want in zip(records, expected):
        assert list(got) == list(want)
        np.testing.assert_allclose(got["states"], want["states"], rtol=0, atol=1e-9)
        assert got["actions"] == want["actions"] and got["events"] == want["events"]
        if want["potential"] is not None:
            assert got["potential"] == pytest.approx(want["potential"], abs=1e-9)
