"""Kinematic bicycle model, road geometry and lateral steering laws.

All functions accept either Python floats or numpy arrays of matching shape
for the state fields, so a whole batch of candidate rollouts can be advanced
in one call.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_STEER = math.radians(20.0)
LANE_CHANGE_STEER = math.radians(0.9)
CENTERED_TOL = 0.1
APPROACH_POLE = 1.8
# the 10 Hz lane-centering rate
CONTROL_DT = 0.1


@dataclass(frozen=True)
class VehicleGeometry:
    l_f: float = 1.5
    l_r: float = 1.5

    def __post_init__(self):
        if not (self.l_f > 0 and self.l_r > 0):
            raise ValueError("l_f and l_r must be positive")

    @property
    def rear_ratio(self) -> float:
        return self.l_r / (self.l_r + self.l_f)


@dataclass(frozen=True)
class VehicleState:
    """Bicycle-model state: position (m), speed (m/s), heading and slip (rad)."""

    x: float
    y: float
    v: float
    phi: float = 0.0
    slip: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.phi, self.slip], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        x, y, v, phi, slip = (float(a) for a in arr)
        return cls(x, y, v, phi, slip)

    def mirrored(self) -> "VehicleState":
        return VehicleState(self.x, -self.y, self.v, -self.phi, -self.slip)


@dataclass(frozen=True)
class ControlInput:
    a: float
    steer: float = 0.0


@dataclass(frozen=True)
class RoadGeometry:
    """Multi-lane road whose right edge follows a straight-arc-straight path.

    The right edge starts at the origin heading along +x. Between arc length 0
    and ``arc_length`` it bends with constant ``curvature`` (positive turns
    left); outside that stretch it is straight. Lateral offsets ``d`` are
    measured leftwards from the right edge, so lane 1 (rightmost) is centred
    at ``lane_width / 2``.
    """

    lanes: int = 3
    lane_width: float = 5.0
    curvature: float = 0.0
    arc_length: float = math.inf

    def __post_init__(self):
        if self.lanes < 1 or self.lane_width <= 0:
            raise ValueError("need at least one lane of positive width")
        if self.curvature != 0.0 and not math.isfinite(self.arc_length):
            # a full circle has no unambiguous frenet frame
            object.__setattr__(self, "arc_length", abs(0.5 * math.pi / self.curvature))

    @property
    def width(self) -> float:
        return self.lanes * self.lane_width

    def lane_center(self, lane):
        """Lateral offset of the centre of a 1-based lane index."""
        return (np.asarray(lane, dtype=float) - 0.5) * self.lane_width

    def lane_of(self, d):
        """Nearest lane index for a lateral offset, clipped to the road."""
        lane = np.floor(np.asarray(d, dtype=float) / self.lane_width) + 1
        return np.clip(lane, 1, self.lanes).astype(int)

    def curvature_at(self, s):
        s = np.asarray(s, dtype=float)
        if self.curvature == 0.0:
            return np.zeros_like(s)
        return np.where((s >= 0) & (s <= self.arc_length), self.curvature, 0.0)

    def to_frenet(self, x, y):
        """Map global positions to (arc length along the edge, lateral offset)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        k = self.curvature
        if k == 0.0:
            return x, y
        r = 1.0 / k
        sign = math.copysign(1.0, r)
        theta = np.arctan2(sign * x, sign * (r - y))
        s_arc = theta / k
        d_arc = r - sign * np.hypot(x, r - y)
        # exit straight
        end_heading = k * self.arc_length
        ex, ey = r * math.sin(end_heading), r * (1 - math.cos(end_heading))
        tx, ty = math.cos(end_heading), math.sin(end_heading)
        s_out = self.arc_length + (x - ex) * tx + (y - ey) * ty
        d_out = -(x - ex) * ty + (y - ey) * tx
        before = s_arc < 0
        after = s_arc > self.arc_length
        s = np.where(before, x, np.where(after, s_out, s_arc))
        d = np.where(before, y, np.where(after, d_out, d_arc))
        return s, d


def road_heading(road: RoadGeometry, s):
    """Heading of the road centreline at arc length ``s`` (clamped to the arc)."""
    s = np.asarray(s, dtype=float)
    if road.curvature == 0.0:
        return np.zeros_like(s)
    return road.curvature * np.clip(s, 0.0, road.arc_length)


def _check_steer(steer):
    if np.any(np.abs(steer) > MAX_STEER + 1e-12):
        raise ValueError(f"steering angle exceeds 20 degrees: {np.max(np.abs(steer)):.4f} rad")


def step(state: VehicleState, control: ControlInput, geometry: VehicleGeometry = VehicleGeometry(),
         dt: float = 0.5) -> VehicleState:
    """Advance the kinematic bicycle model by one explicit Euler step.

    Position and heading use the pre-update speed and slip angle. Speed is
    clamped at zero so braking never reverses the vehicle.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_steer(control.steer)
    x, y, v, phi, slip = state.x, state.y, state.v, state.phi, state.slip
    course = phi + slip
    return VehicleState(
        x + v * np.cos(course) * dt,
        y + v * np.sin(course) * dt,
        np.maximum(0.0, v + control.a * dt),
        phi + v / geometry.l_r * np.sin(slip) * dt,
        slip + np.arctan(geometry.rear_ratio * np.tan(control.steer)) * dt,
    )


def steer_for_slip_rate(rate, geometry: VehicleGeometry = VehicleGeometry()):
    """Front steering angle whose slip-angle update equals ``rate`` (rad/s)."""
    rate = np.clip(rate, -0.5 * math.pi + 1e-9, 0.5 * math.pi - 1e-9)
    return np.arctan(np.tan(rate) / geometry.rear_ratio)


def lane_change_steering(state: VehicleState, target_lane, road: RoadGeometry,
                         geometry: VehicleGeometry = VehicleGeometry(), dt: float = CONTROL_DT):
    """Steering command that moves the vehicle to the centre of ``target_lane``.

    Away from the target centre the command is a lateral-position feedback
    whose magnitude is limited to the 0.9 degree lane-change steering. Within
    ``CENTERED_TOL`` of the centre the lane-centering law takes over: it drives
    the slip angle to -(phi - phi_r)/2 plus the slip needed to follow the road
    curvature, inverting the slip update for the steering angle and clamping
    at 20 degrees.
    """
    s, d = road.to_frenet(state.x, state.y)
    v = np.asarray(state.v, dtype=float)
    phi_r = road_heading(road, s)
    # curvature of the path parallel to the edge at this offset
    kappa = road.curvature_at(s)
    kappa = kappa / (1.0 - kappa * d)
    l_r = geometry.l_r
    err = d - road.lane_center(target_lane)
    # euler steps move along a chord, so compare against the mid-step road heading
    phi_r = phi_r + 0.5 * kappa * v * dt

    # centering: aim at the heading the vehicle will have when the slip lands
    phi_next = state.phi + v / l_r * np.sin(state.slip) * dt
    slip_road = np.arcsin(np.clip(l_r * kappa, -1.0, 1.0))
    slip_cmd = slip_road - 0.5 * (phi_next - phi_r)
    centering = steer_for_slip_rate((slip_cmd - state.slip) / dt, geometry)

    # lateral error dynamics form a chain of three integrators driven by the
    # slip-angle rate; place a triple pole scaled to the available authority
    v_safe = np.maximum(v, 1.0)
    gain = v_safe * v_safe / l_r
    max_rate = math.atan(geometry.rear_ratio * math.tan(LANE_CHANGE_STEER))
    pole = APPROACH_POLE * np.cbrt(gain * max_rate / road.lane_width)
    lat_speed = v * np.sin(state.phi + state.slip - phi_r)
    lat_accel = gain * (np.sin(state.slip) - l_r * kappa)
    # beyond one lane the linear law winds up against the steering limit
    far = np.clip(err, -road.lane_width, road.lane_width)
    jerk = -(pole**3 * far + 3 * pole**2 * lat_speed + 3 * pole * lat_accel)
    approach = np.clip(steer_for_slip_rate(jerk / gain, geometry), -LANE_CHANGE_STEER, LANE_CHANGE_STEER)

    use_centering = (np.abs(err) < CENTERED_TOL) | (v < 1.0)
    steer = np.where(use_centering, centering, approach)
    if np.any(np.abs(steer) > MAX_STEER):
        log.debug("steering clamped to 20 degrees")
    steer = np.clip(steer, -MAX_STEER, MAX_STEER)
    return steer if np.ndim(steer) else float(steer)


SteeringPolicy = Callable[[VehicleState, int], "np.ndarray | float"]


def lane_keeping(road: RoadGeometry, target_lanes, geometry: VehicleGeometry = VehicleGeometry(),
                 dt: float = CONTROL_DT) -> SteeringPolicy:
    """Steering policy that tracks ``target_lanes[k]`` during decision step k.

    ``target_lanes`` is either a scalar lane, a length-T sequence, or an array
    shaped (batch, T) when rolling out a batch of vehicles.
    """
    targets = np.asarray(target_lanes)

    def policy(state, k):
        if targets.ndim == 0:
            lane = targets
        elif targets.ndim == 1:
            lane = targets[k]
        else:
            lane = targets[:, k]
        return lane_change_steering(state, lane, road, geometry, dt)

    return policy


@dataclass(frozen=True)
class Trajectory:
    """States at the decision grid; arrays shaped (T+1,) or (T+1, batch)."""

    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    slip: np.ndarray
    steer: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.x)

    def state(self, k: int) -> VehicleState:
        return VehicleState(self.x[k], self.y[k], self.v[k], self.phi[k], self.slip[k])


def rollout(state: VehicleState, accelerations, steering: SteeringPolicy | None = None,
            geometry: VehicleGeometry = VehicleGeometry(), dt: float = 0.5,
            substeps: int = 5) -> Trajectory:
    """Roll the bicycle model forward over a sequence of decision steps.

    ``accelerations`` has shape (T,) or (batch, T); each entry is held for one
    decision interval ``dt`` which is integrated in ``substeps`` equal Euler
    steps so the steering policy runs at ``dt / substeps``. The returned
    trajectory holds the T+1 states on the decision grid, starting with
    ``state`` itself.
    """
    acc = np.asarray(accelerations, dtype=float)
    batched = acc.ndim == 2
    horizon = acc.shape[-1]
    h = dt / substeps
    cur = state
    if batched:
        n = acc.shape[0]
        cur = VehicleState(*(np.broadcast_to(np.asarray(f, dtype=float), (n,)).copy()
                             for f in (state.x, state.y, state.v, state.phi, state.slip)))
    rows = [cur]
    steers = []
    for k in range(horizon):
        a_k = acc[:, k] if batched else acc[k]
        for _ in range(substeps):
            delta = 0.0 * a_k if steering is None else steering(cur, k)
            cur = step(cur, ControlInput(a_k, delta), geometry, h)
        steers.append(delta)
        rows.append(cur)
    stack = lambda name: np.array([getattr(r, name) for r in rows], dtype=float)
    return Trajectory(stack("x"), stack("y"), stack("v"), stack("phi"), stack("slip"),
                      np.array(steers, dtype=float))


def concat(first: Trajectory, second: Trajectory) -> Trajectory:
    """Join two trajectories that share the boundary state."""
    join = lambda a, b: np.concatenate([a, b[1:]])
    return Trajectory(join(first.x, second.x), join(first.y, second.y), join(first.v, second.v),
                      join(first.phi, second.phi), join(first.slip, second.slip),
                      np.concatenate([first.steer, second.steer]))


def lanes_visited(road: RoadGeometry, xs: Sequence[float], ys: Sequence[float]) -> list[int]:
    """Sequence of lanes occupied along a path with consecutive repeats removed."""
    _, d = road.to_frenet(np.asarray(xs), np.asarray(ys))
    out: list[int] = []
    for lane in road.lane_of(d):
        if not out or out[-1] != lane:
            out.append(int(lane))
    return out
