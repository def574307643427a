"""Driving cost terms and the lane-change / intersection game builders."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import shapely
import shapely.ops

from .dynamics import RoadGeometry, VehicleGeometry, VehicleState, lane_keeping, rollout
from .game_core import ContinuousStrategySpace, CostTerm, FiniteStrategySpace, StructuredGame

ACCELERATIONS = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
# lane choice offsets in strategy order: keep, left, right
LANE_CHOICES = (0, 1, -1)
LANE_NAMES = {0: "keep", 1: "left", -1: "right"}


@dataclass(frozen=True)
class CostParams:
    theta_speed: float = 1.0
    theta_2: float = 1.0
    theta_collision: float = 4.0
    gamma: float = 1000.0
    tanh_sharpness: float = 1000.0
    d_xc: float = 7.0
    d_yc: float = 4.5
    delta_reg: float = 0.01
    tie_noise: float = 1e-4

    def __post_init__(self):
        if min(self.theta_speed, self.theta_2, self.theta_collision, self.gamma, self.tie_noise) < 0:
            raise ValueError("weights must be non-negative")
        if self.d_xc <= 0 or self.d_yc <= 0 or self.delta_reg <= 0 or self.tanh_sharpness <= 0:
            raise ValueError("collision distances, regularizer and sharpness must be positive")


def speed_tracking_cost(v, v_d):
    """Sum over the last axis of the squared relative speed error."""
    if np.any(np.asarray(v_d) == 0):
        raise ValueError("desired speed must be nonzero")
    return np.sum(((np.asarray(v, dtype=float) - v_d) / v_d) ** 2, axis=-1)


def road_boundary_cost(lateral, width: float, gamma: float = 1000.0):
    """gamma times the number of samples strictly outside [0, width]."""
    lat = np.asarray(lateral, dtype=float)
    return gamma * np.sum((lat < 0) | (lat > width), axis=-1)


def tanh_collision_cost(lon_i, lat_i, lon_j, lat_j, sharpness: float = 1000.0, d_xc: float = 7.0,
                        d_yc: float = 4.5):
    """Smoothed box-overlap count between two sampled trajectories."""
    dx2 = (np.asarray(lon_i) - np.asarray(lon_j)) ** 2
    dy2 = (np.asarray(lat_i) - np.asarray(lat_j)) ** 2
    return np.sum((np.tanh(sharpness * (d_xc**2 - dx2)) + 1.0) * (np.tanh(sharpness * (d_yc**2 - dy2)) + 1.0),
                  axis=-1)


def inverse_distance_cost(x_i, y_i, x_j, y_j, delta_reg: float = 0.01, conflict: bool = True):
    """Sum of 1 / (squared distance + delta_reg); zero for non-conflicting pairs."""
    d2 = (np.asarray(x_i) - np.asarray(x_j)) ** 2 + (np.asarray(y_i) - np.asarray(y_j)) ** 2
    total = np.sum(1.0 / (d2 + delta_reg), axis=-1)
    return total if conflict else np.zeros_like(total)


# ---------------------------------------------------------------- lane change

@dataclass(frozen=True)
class LaneChangeAction:
    accel: float
    lane: int

    def __post_init__(self):
        if self.lane not in LANE_CHOICES:
            raise ValueError("lane choice must be -1 (right), 0 (keep) or 1 (left)")

    @property
    def label(self) -> str:
        return f"{self.accel:+g}/{LANE_NAMES[self.lane]}"


def lane_change_actions(accelerations=ACCELERATIONS) -> list[LaneChangeAction]:
    return [LaneChangeAction(float(a), l) for a in accelerations for l in LANE_CHOICES]


def lane_change_space(horizon: int, accelerations=ACCELERATIONS) -> FiniteStrategySpace:
    acts = lane_change_actions(accelerations)
    return FiniteStrategySpace.constant_actions([[a.accel, a.lane] for a in acts], horizon,
                                                tuple(a.label for a in acts))


@dataclass(frozen=True, eq=False)
class CandidatePlans:
    """Predicted trajectories of every candidate strategy of one vehicle."""

    space: FiniteStrategySpace
    lon: np.ndarray      # (K, T+1) road-aligned arc length
    lat: np.ndarray      # (K, T+1) lateral offset from the right edge
    speed: np.ndarray    # (K, T+1)
    target_lane: np.ndarray  # (K,)
    trajectory: object = field(repr=False, default=None)

    def index(self, rows) -> np.ndarray:
        """Candidate indices of strategy rows (only the first action is read)."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        accs, lookup = self._lookup
        a = np.clip(np.searchsorted(accs, rows[:, 0]), 0, len(accs) - 1)
        lane = rows[:, 1].astype(int) + 1
        if not (np.array_equal(accs[a], rows[:, 0]) and np.all((lane >= 0) & (lane <= 2))):
            raise ValueError("strategy is not one of the candidate plans")
        return lookup[a, lane]

    @cached_property
    def _lookup(self):
        accs = np.unique(self.space.strategies[:, 0])
        table = np.full((len(accs), 3), -1)
        for k, (a, lane) in enumerate(self.space.strategies[:, :2]):
            table[np.searchsorted(accs, a), int(lane) + 1] = k
        return accs, table


def plan_candidates(state: VehicleState, road: RoadGeometry, horizon: int = 8, dt: float = 0.5,
                    accelerations=ACCELERATIONS, geometry: VehicleGeometry = VehicleGeometry(),
                    substeps: int = 5) -> CandidatePlans:
    """Roll out every (acceleration, lane choice) pair held over the horizon."""
    space = lane_change_space(horizon, accelerations)
    acc = space.strategies[:, 0]
    _, d0 = road.to_frenet(state.x, state.y)
    target = road.lane_of(d0) + space.strategies[:, 1].astype(int)
    accel_seq = np.repeat(acc[:, None], horizon, axis=1)
    lanes_seq = np.repeat(target[:, None], horizon, axis=1)
    traj = rollout(state, accel_seq, lane_keeping(road, lanes_seq, geometry), geometry, dt, substeps)
    lon, lat = road.to_frenet(traj.x.T, traj.y.T)
    return CandidatePlans(space, np.asarray(lon), np.asarray(lat), traj.v.T.copy(), target, traj)


def build_lane_change_game(states: Sequence[VehicleState], road: RoadGeometry, desired_speeds: Sequence[float],
                           params: CostParams = CostParams(), horizon: int = 8, dt: float = 0.5,
                           accelerations=ACCELERATIONS, plans: Sequence[CandidatePlans] | None = None,
                           t: float = 0.0) -> StructuredGame:
    """Finite game: every vehicle picks an acceleration and a lane for the horizon.

    Costs are summed over the T predicted samples after the current one.
    """
    n = len(states)
    if n < 1 or len(desired_speeds) != n:
        raise ValueError("need at least one vehicle and one desired speed per vehicle")
    if plans is None:
        plans = [plan_candidates(s, road, horizon, dt, accelerations) for s in states]
    terms: list[list[CostTerm]] = [[] for _ in range(n)]
    for i, (plan, v_d) in enumerate(zip(plans, desired_speeds)):
        terms[i].append(CostTerm(i, lambda u, p=plan, v_d=v_d: speed_tracking_cost(p.speed[p.index(u), 1:], v_d),
                                 params.theta_speed, name="speed"))
        terms[i].append(CostTerm(i, lambda u, p=plan: road_boundary_cost(p.lat[p.index(u), 1:], road.width,
                                                                         params.gamma),
                                 params.theta_2, name="road"))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue

            def collision(u, w, a=plans[i], b=plans[j]):
                ia, ib = a.index(u), b.index(w)
                return tanh_collision_cost(a.lon[ia, 1:], a.lat[ia, 1:], b.lon[ib, 1:], b.lat[ib, 1:],
                                           params.tanh_sharpness, params.d_xc, params.d_yc)

            terms[i].append(CostTerm(i, collision, params.theta_collision, j, f"collision{min(i, j)}-{max(i, j)}"))
    state = {"kind": "lane_change", "states": tuple(states), "road": road, "desired_speeds": tuple(desired_speeds),
             "plans": tuple(plans)}
    return StructuredGame(tuple(p.space for p in plans), terms, state, horizon, dt, t)


# ---------------------------------------------------------------- intersection

@dataclass(frozen=True, eq=False)
class Route:
    """Centre-line polyline followed by one vehicle, parameterized by arc length."""

    points: np.ndarray
    name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a route needs at least two 2-D points")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 0):
            raise ValueError("route has a zero-length segment")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def position(self, s):
        """Points at arc length ``s``; beyond either end the end segment is extended."""
        s = np.asarray(s, dtype=float)
        cum, pts = self._cum, self.points
        x = np.interp(s, cum, pts[:, 0])
        y = np.interp(s, cum, pts[:, 1])
        if np.any(s < 0) or np.any(s > cum[-1]):
            head, tail = self._end_directions
            before = np.minimum(s, 0.0)
            after = np.maximum(s - cum[-1], 0.0)
            x = x + before * head[0] + after * tail[0]
            y = y + before * head[1] + after * tail[1]
        return x, y

    @cached_property
    def _end_directions(self):
        d = np.diff(self.points, axis=0)
        d = d / np.hypot(d[:, 0], d[:, 1])[:, None]
        return d[0], d[-1]

    def heading(self, s):
        s = np.asarray(s, dtype=float)
        k = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._cum) - 2)
        d = self.points[k + 1] - self.points[k]
        return np.arctan2(d[..., 1], d[..., 0])

    def project(self, x: float, y: float) -> float:
        return float(shapely.LineString(self.points).project(shapely.Point(x, y)))

    def line(self):
        return shapely.LineString(self.points)


def straight_route(start, end, name: str = "") -> Route:
    return Route(np.array([start, end], dtype=float), name)


def turn_route(entry_start, arc_center, radius: float, start_angle: float, sweep: float, exit_length: float,
               name: str = "", arc_points: int = 24) -> Route:
    """Straight approach, circular arc, straight exit."""
    ang = start_angle + np.linspace(0.0, sweep, arc_points + 1)
    arc = np.column_stack([arc_center[0] + radius * np.cos(ang), arc_center[1] + radius * np.sin(ang)])
    end_dir = np.array([-np.sin(ang[-1]), np.cos(ang[-1])]) * math.copysign(1.0, sweep)
    exit_pt = arc[-1] + exit_length * end_dir
    return Route(np.vstack([np.asarray(entry_start, dtype=float)[None], arc, exit_pt[None]]), name)


@dataclass(frozen=True, eq=False)
class ConflictMap:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.array_equal(m, m.T) or np.any(np.diag(m)):
            raise ValueError("conflict map must be square, symmetric, with a false diagonal")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __call__(self, i: int, j: int) -> bool:
        return bool(self.matrix[i, j])


def intersection_region(half_width: float = 5.0, center=(0.0, 0.0)):
    cx, cy = center
    return shapely.box(cx - half_width, cy - half_width, cx + half_width, cy + half_width)


def build_conflict_map(routes: Sequence[Route], region=None, progress: Sequence[float] | None = None,
                       tail: float = 3.5) -> ConflictMap:
    """Pairs whose route polylines meet inside ``region`` (default: 10 m square at the origin).

    With ``progress`` (current arc length per vehicle) only the part of each
    route still ahead counts, starting ``tail`` metres behind the vehicle so a
    vehicle keeps its conflicts until its rear has left the region.
    """
    region = intersection_region() if region is None else region
    lines = [r.line() for r in routes]
    if progress is not None:
        lines = [shapely.ops.substring(l, min(max(s - tail, 0.0), r.length), r.length)
                 for l, r, s in zip(lines, routes, progress)]
    clipped = [l.intersection(region) for l in lines]
    n = len(routes)
    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i):
            hit = not clipped[i].is_empty and not clipped[j].is_empty and clipped[i].intersects(clipped[j])
            m[i, j] = m[j, i] = hit
    return ConflictMap(m)


@dataclass(frozen=True)
class RouteState:
    """A vehicle constrained to a route: arc length (m) and speed (m/s)."""

    s: float
    v: float


def longitudinal_rollout(s0: float, v0: float, accelerations, dt: float = 0.5, substeps: int = 5):
    """Arc length and speed at the decision grid for batched acceleration plans.

    ``accelerations`` is (B, T); each value is held for ``dt`` and integrated
    in ``substeps`` Euler steps with speed clamped at zero, matching the
    longitudinal part of the bicycle model. Returns two (B, T+1) arrays.
    """
    acc = np.atleast_2d(np.asarray(accelerations, dtype=float))
    b, horizon = acc.shape
    h = dt / substeps
    m = horizon * substeps
    if np.all(acc == acc[:, :1]):
        # a constant plan never leaves zero speed once it reaches it, so the
        # clamped Euler speeds have a closed form
        v_fine = np.maximum(0.0, v0 + acc[:, :1] * (h * np.arange(m + 1)))
    else:
        a_fine = np.repeat(acc, substeps, axis=1)
        v_fine = np.empty((b, m + 1))
        v_fine[:, 0] = v0
        v = np.full(b, float(v0))
        for k in range(m):
            v = np.maximum(0.0, v + a_fine[:, k] * h)
            v_fine[:, k + 1] = v
    s_fine = np.empty_like(v_fine)
    s_fine[:, 0] = s0
    np.cumsum(v_fine[:, :-1] * h, axis=1, out=s_fine[:, 1:])
    s_fine[:, 1:] += s0
    return s_fine[:, ::substeps], v_fine[:, ::substeps]


def _expand_plan(u, horizon: int) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return np.repeat(u[:, :1], horizon, axis=1) if u.shape[1] == 1 else u


def build_intersection_game(states: Sequence[RouteState], routes: Sequence[Route], desired_speeds: Sequence[float],
                            params: CostParams = CostParams(), horizon: int = 8, dt: float = 0.5,
                            tie_noise: Sequence[float] | None = None, conflicts: ConflictMap | None = None,
                            accelerations: Sequence[float] | None = None, bounds=(-3.0, 3.0),
                            t: float = 0.0) -> StructuredGame:
    """Acceleration game at an intersection.

    By default each vehicle holds one acceleration from ``bounds`` over the
    horizon (a 1-D box); passing ``accelerations`` gives the finite variant.
    ``tie_noise[i]`` scales a small self term proportional to the mean
    planned acceleration, which makes otherwise symmetric vehicles prefer
    different equilibria. Vehicles without a conflict partner skip it.
    """
    n = len(states)
    if n < 1 or len(routes) != n or len(desired_speeds) != n:
        raise ValueError("need one route and one desired speed per vehicle")
    if conflicts is None:
        conflicts = build_conflict_map(routes, progress=[st.s for st in states])
    noise = np.zeros(n) if tie_noise is None else np.asarray(tie_noise, dtype=float)
    if accelerations is None:
        space = ContinuousStrategySpace([bounds[0]], [bounds[1]])
    else:
        space = FiniteStrategySpace(np.asarray(accelerations, dtype=float).reshape(-1, 1))
    spaces = tuple(space for _ in range(n))
    scale = max(abs(bounds[0]), abs(bounds[1]), 1e-12)

    # every term of one evaluation receives the same strategy array, so the
    # last prediction per vehicle is reused while that array is alive
    last: dict = {}

    def predict(i, u):
        hit = last.get(i)
        if hit is not None and hit[0] is u:
            return hit[1]
        s, v = longitudinal_rollout(states[i].s, states[i].v, _expand_plan(u, horizon), dt)
        x, y = routes[i].position(s[:, 1:])
        out = (x, y, v[:, 1:])
        last[i] = (u, out)
        return out

    terms: list[list[CostTerm]] = [[] for _ in range(n)]
    for i in range(n):
        terms[i].append(CostTerm(i, lambda u, i=i: speed_tracking_cost(predict(i, u)[2], desired_speeds[i]),
                                 params.theta_speed, name="speed"))
        if any(conflicts(i, j) for j in range(n) if j != i):
            terms[i].append(CostTerm(i, lambda u, i=i: noise[i] * np.mean(_expand_plan(u, horizon), axis=1) / scale,
                                     1.0, name="tie"))
        for j in range(n):
            if j == i or not conflicts(i, j):
                continue

            def proximity(u, w, i=i, j=j):
                xi, yi, _ = predict(i, u)
                xj, yj, _ = predict(j, w)
                return inverse_distance_cost(xi, yi, xj, yj, params.delta_reg)

            terms[i].append(CostTerm(i, proximity, params.theta_2, j, f"proximity{min(i, j)}-{max(i, j)}"))
    state = {"kind": "intersection", "states": tuple(states), "routes": tuple(routes),
             "desired_speeds": tuple(desired_speeds), "conflicts": conflicts}
    return StructuredGame(spaces, terms, state, horizon, dt, t)
