import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potgame.dynamics import (LANE_CHANGE_STEER, MAX_STEER, ControlInput, RoadGeometry, VehicleGeometry,
                              VehicleState, concat, lane_change_steering, lane_keeping, lanes_visited,
                              road_heading, rollout, step, steer_for_slip_rate)

GEOM = VehicleGeometry()


def reference_step(x, y, v, phi, slip, a, delta, dt, l_f=1.5, l_r=1.5):
    """Plain-float transcription of the five update equations."""
    return (x + v * math.cos(phi + slip) * dt,
            y + v * math.sin(phi + slip) * dt,
            max(0.0, v + a * dt),
            phi + v / l_r * math.sin(slip) * dt,
            slip + math.atan(l_r / (l_r + l_f) * math.tan(delta)) * dt)


def as_tuple(s: VehicleState):
    return tuple(float(f) for f in (s.x, s.y, s.v, s.phi, s.slip))


class TestStep:
    def test_straight_constant_speed(self):
        out = step(VehicleState(0, 0, 10), ControlInput(0.0, 0.0), GEOM, 0.5)
        assert as_tuple(out) == pytest.approx((5, 0, 10, 0, 0), abs=1e-12)

    def test_position_uses_pre_update_speed(self):
        out = step(VehicleState(0, 0, 10), ControlInput(2.0, 0.0), GEOM, 0.5)
        assert as_tuple(out) == pytest.approx((5, 0, 11, 0, 0), abs=1e-12)

    def test_small_steer_moves_slip_only(self):
        delta = math.radians(0.9)
        out = step(VehicleState(0, 0, 10), ControlInput(0.0, delta), GEOM, 0.5)
        assert out.slip == pytest.approx(0.5 * math.atan(0.5 * math.tan(delta)), abs=1e-12)
        assert out.slip == pytest.approx(3.93e-3, abs=5e-6)
        assert out.y == 0.0
        assert out.phi == 0.0

    def test_rejects_oversized_steering(self):
        with pytest.raises(ValueError, match="20 degrees"):
            step(VehicleState(0, 0, 10), ControlInput(0.0, math.radians(20.5)), GEOM, 0.1)

    def test_accepts_steering_at_limit(self):
        step(VehicleState(0, 0, 10), ControlInput(0.0, MAX_STEER), GEOM, 0.1)

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            step(VehicleState(0, 0, 10), ControlInput(0.0, 0.0), GEOM, 0.0)

    def test_brake_clamps_speed(self):
        out = step(VehicleState(0, 0, 1.0), ControlInput(-3.0, 0.0), GEOM, 0.5)
        assert out.v == 0.0

    @settings(max_examples=1000, deadline=None)
    @given(x=st.floats(-1e3, 1e3), y=st.floats(-50, 50), v=st.floats(0, 40), phi=st.floats(-math.pi, math.pi),
           slip=st.floats(-0.3, 0.3), a=st.floats(-3, 3), delta=st.floats(-MAX_STEER, MAX_STEER),
           dt=st.sampled_from([0.1, 0.5]))
    def test_matches_reference_equations(self, x, y, v, phi, slip, a, delta, dt):
        out = step(VehicleState(x, y, v, phi, slip), ControlInput(a, delta), GEOM, dt)
        assert as_tuple(out) == pytest.approx(reference_step(x, y, v, phi, slip, a, delta, dt), abs=1e-12, rel=1e-12)


class TestProperties:
    @settings(max_examples=1000, deadline=None)
    @given(y=st.floats(-20, 20), v=st.floats(0, 35), phi=st.floats(-1, 1), slip=st.floats(-0.2, 0.2),
           accels=st.lists(st.floats(-3, 3), min_size=1, max_size=6),
           steers=st.lists(st.floats(-MAX_STEER, MAX_STEER), min_size=6, max_size=6))
    def test_mirror_symmetry(self, y, v, phi, slip, accels, steers):
        state = VehicleState(3.0, y, v, phi, slip)
        fwd = rollout(state, accels, lambda s, k: steers[k], GEOM, 0.5)
        mir = rollout(state.mirrored(), accels, lambda s, k: -steers[k], GEOM, 0.5)
        np.testing.assert_allclose(mir.x, fwd.x, atol=1e-12, rtol=0)
        np.testing.assert_allclose(mir.y, -fwd.y, atol=1e-12, rtol=0)
        np.testing.assert_allclose(mir.phi, -fwd.phi, atol=1e-12, rtol=0)
        np.testing.assert_allclose(mir.slip, -fwd.slip, atol=1e-12, rtol=0)
        np.testing.assert_allclose(mir.v, fwd.v, atol=1e-12, rtol=0)

    @settings(max_examples=1000, deadline=None)
    @given(v=st.floats(0, 35), d=st.floats(0.5, 14.5), phi=st.floats(-0.05, 0.05),
           accels=st.lists(st.floats(-3, 3), min_size=2, max_size=8), cut=st.integers(1, 7),
           lane=st.integers(1, 3))
    def test_rollout_compositionality(self, v, d, phi, accels, cut, lane):
        cut = min(cut, len(accels) - 1)
        road = RoadGeometry()
        policy = lane_keeping(road, lane)
        state = VehicleState(0.0, d, v, phi)
        whole = rollout(state, accels, policy, GEOM, 0.5)
        first = rollout(state, accels[:cut], policy, GEOM, 0.5)
        second = rollout(first.state(-1), accels[cut:], policy, GEOM, 0.5)
        joined = concat(first, second)
        for name in ("x", "y", "v", "phi", "slip"):
            assert np.array_equal(getattr(joined, name), getattr(whole, name))

    @settings(max_examples=300, deadline=None)
    @given(v=st.floats(0, 35), x=st.floats(-100, 100), heading=st.floats(-math.pi, math.pi),
           n=st.integers(1, 10))
    def test_zero_input_keeps_direction(self, v, x, heading, n):
        traj = rollout(VehicleState(x, 2.0, v, heading), np.zeros(n), None, GEOM, 0.5)
        assert np.all(traj.phi == heading)
        assert np.all(traj.v == v)
        step_len = np.hypot(np.diff(traj.x), np.diff(traj.y))
        np.testing.assert_allclose(step_len, v * 0.5, atol=1e-9)

    @settings(max_examples=300, deadline=None)
    @given(v=st.floats(0, 35), brakes=st.lists(st.floats(-3, 0), min_size=1, max_size=20))
    def test_speed_never_negative(self, v, brakes):
        traj = rollout(VehicleState(0, 2.5, v), brakes, None, GEOM, 0.5)
        assert np.all(traj.v >= 0)


class TestRollout:
    def test_zero_actions_uniform_samples(self):
        traj = rollout(VehicleState(0, 2.5, 10), np.zeros(4), None, GEOM, 0.5)
        np.testing.assert_allclose(traj.x, [0, 5, 10, 15, 20], atol=1e-12)
        np.testing.assert_allclose(traj.y, 2.5, atol=1e-12)

    def test_constant_acceleration_speeds(self):
        traj = rollout(VehicleState(0, 2.5, 10), np.ones(4), None, GEOM, 0.5)
        np.testing.assert_allclose(traj.v, [10, 10.5, 11, 11.5, 12], atol=1e-12)

    def test_first_sample_is_initial_state(self):
        s = VehicleState(1.0, 2.0, 3.0, 0.1, 0.01)
        traj = rollout(s, [1.0, -1.0], None, GEOM, 0.5)
        assert as_tuple(traj.state(0)) == as_tuple(s)
        assert len(traj) == 3

    def test_batched_rollout_matches_single(self):
        s = VehicleState(0, 2.5, 20)
        acc = np.array([[1.0] * 4, [-2.0] * 4])
        batch = rollout(s, acc, None, GEOM, 0.5)
        for b in range(2):
            single = rollout(s, acc[b], None, GEOM, 0.5)
            np.testing.assert_array_equal(batch.x[:, b], single.x)
            np.testing.assert_array_equal(batch.v[:, b], single.v)

    @pytest.mark.parametrize("v", [22.0, 27.0, 30.0])
    def test_lane_change_settles_on_straight_road(self, v):
        road = RoadGeometry()
        traj = rollout(VehicleState(0, 2.5, v), np.zeros(16), lane_keeping(road, 2), GEOM, 0.5)
        y = traj.y
        peak = int(np.argmax(y))
        assert np.all(np.diff(y[: peak + 1]) > 0)
        assert abs(y[-1] - 7.5) < 0.2
        assert np.all(np.abs(y[peak:] - 7.5) < 0.2)
        assert lanes_visited(road, traj.x, traj.y) == [1, 2]

    def test_lane_change_on_curved_road(self):
        road = RoadGeometry(curvature=1 / 500)
        traj = rollout(VehicleState(0, 2.5, 27), np.zeros(30), lane_keeping(road, 2), GEOM, 0.5)
        _, d = road.to_frenet(traj.x, traj.y)
        assert abs(d[-1] - 7.5) < 0.2
        assert lanes_visited(road, traj.x, traj.y) == [1, 2]


class TestSteering:
    def test_centered_on_straight_road_is_zero(self):
        road = RoadGeometry()
        assert lane_change_steering(VehicleState(0, 2.5, 20), 1, road) == pytest.approx(0.0, abs=1e-15)

    def test_lane_one_to_three_starts_leftwards(self):
        road = RoadGeometry()
        delta = lane_change_steering(VehicleState(0, 2.5, 25), 3, road)
        assert delta == pytest.approx(LANE_CHANGE_STEER)

    def test_rightward_request_is_negative(self):
        road = RoadGeometry()
        assert lane_change_steering(VehicleState(0, 12.5, 25), 1, road) == pytest.approx(-LANE_CHANGE_STEER)

    def test_heading_error_commands_half_slip(self):
        road = RoadGeometry()
        state = VehicleState(0, 2.5, 20, phi=0.02)
        delta = lane_change_steering(state, 1, road, GEOM, 0.1)
        after = step(state, ControlInput(0.0, delta), GEOM, 0.1)
        assert after.slip == pytest.approx(-0.01, abs=1e-12)

    def test_centering_steering_is_clamped(self):
        road = RoadGeometry()
        delta = lane_change_steering(VehicleState(0, 2.5, 20, phi=1.0), 1, road)
        assert abs(delta) == pytest.approx(MAX_STEER)

    def test_curved_road_centered_needs_road_steering(self):
        road = RoadGeometry(curvature=1 / 500)
        delta = lane_change_steering(VehicleState(0, 2.5, 25), 1, road)
        assert delta > 0

    def test_slip_rate_inversion(self):
        delta = steer_for_slip_rate(0.05)
        out = step(VehicleState(0, 0, 10), ControlInput(0.0, float(delta)), GEOM, 0.1)
        assert out.slip == pytest.approx(0.005, abs=1e-15)


class TestRoad:
    def test_straight_heading_is_zero(self):
        np.testing.assert_array_equal(road_heading(RoadGeometry(), [0.0, 50.0, 1e4]), 0.0)

    def test_arc_heading_after_100m(self):
        assert road_heading(RoadGeometry(curvature=1 / 500), 100.0) == pytest.approx(0.2, abs=1e-12)

    def test_negative_curvature_mirrors(self):
        assert road_heading(RoadGeometry(curvature=-1 / 500), 100.0) == pytest.approx(-0.2, abs=1e-12)

    def test_heading_clamps_outside_arc(self):
        road = RoadGeometry(curvature=1 / 500, arc_length=200.0)
        assert road_heading(road, 1e4) == pytest.approx(0.4)
        assert road_heading(road, -5.0) == 0.0

    def test_width_and_lanes(self):
        road = RoadGeometry(lanes=3, lane_width=5)
        assert road.width == 15
        np.testing.assert_allclose(road.lane_center([1, 2, 3]), [2.5, 7.5, 12.5])
        np.testing.assert_array_equal(road.lane_of([0.1, 5.1, 14.9, 20.0, -1.0]), [1, 2, 3, 3, 1])

    @settings(max_examples=200, deadline=None)
    @given(s=st.floats(0, 700), d=st.floats(0, 15))
    def test_frenet_round_trip_on_arc(self, s, d):
        road = RoadGeometry(curvature=1 / 500, arc_length=400.0)
        # build the global point from the frenet pair by hand
        k = road.curvature
        if s <= road.arc_length:
            th = k * s
            x, y = (1 / k - d) * math.sin(th), 1 / k - (1 / k - d) * math.cos(th)
        else:
            th = k * road.arc_length
            ex, ey = math.sin(th) / k, (1 - math.cos(th)) / k
            x = ex + (s - road.arc_length) * math.cos(th) - d * math.sin(th)
            y = ey + (s - road.arc_length) * math.sin(th) + d * math.cos(th)
        s2, d2 = road.to_frenet(x, y)
        assert float(s2) == pytest.approx(s, abs=1e-6)
        assert float(d2) == pytest.approx(d, abs=1e-6)

    def test_invalid_geometry(self):
        with pytest.raises(ValueError):
            RoadGeometry(lanes=0)
        with pytest.raises(ValueError):
            VehicleGeometry(l_f=0.0)
