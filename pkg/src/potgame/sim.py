"""Receding-horizon closed-loop simulation of lane-change and intersection traffic."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import shapely

from .costs import (ACCELERATIONS, CostParams, Route, RouteState, build_intersection_game,
                    build_lane_change_game, longitudinal_rollout, plan_candidates)
from .dynamics import (ControlInput, RoadGeometry, VehicleGeometry, VehicleState, lane_change_steering, step)
from .game_core import assemble_potential
from .optimize import OptimizerConfig
from .solvers import BRConfig, best_response_dynamics, potential_optimization

log = logging.getLogger(__name__)

POLICIES = ("nash", "constant", "random", "ttc")
SOLVERS = ("potential", "brd")


@dataclass(frozen=True)
class SurroundingPolicy:
    kind: str = "nash"
    safe_distance: float = 15.0
    accel: float = 2.0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown surrounding policy {self.kind!r}; choose from {POLICIES}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to replay one episode.

    Lane-change episodes use ``initial`` as a tuple of :class:`VehicleState`
    on ``road``; intersection episodes use :class:`RouteState` along
    ``routes``. Vehicle 0 is the ego vehicle.
    """

    kind: str
    initial: tuple
    desired_speeds: tuple
    road: RoadGeometry | None = None
    routes: tuple = ()
    game: str = "finite"
    solver: str = "potential"
    policy: SurroundingPolicy = SurroundingPolicy()
    params: CostParams = CostParams()
    horizon: int = 8
    dt: float = 0.5
    duration: float = 12.0
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()
    br: BRConfig = BRConfig(epsilon=1e-3)
    accelerations: tuple = ACCELERATIONS
    substeps: int = 5

    def __post_init__(self):
        if self.kind not in ("lane_change", "intersection"):
            raise ValueError("scenario kind must be lane_change or intersection")
        if self.game not in ("finite", "continuous"):
            raise ValueError("game kind must be finite or continuous")
        if self.kind == "lane_change" and self.game != "finite":
            raise ValueError("lane-change games are finite")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if len(self.initial) < 1 or len(self.desired_speeds) != len(self.initial):
            raise ValueError("need one desired speed per vehicle")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9 or steps < 1:
            raise ValueError("duration must be a positive multiple of dt")
        if self.kind == "lane_change" and self.road is None:
            raise ValueError("lane-change scenarios need a road")
        if self.kind == "intersection" and len(self.routes) != len(self.initial):
            raise ValueError("intersection scenarios need one route per vehicle")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def n_agents(self) -> int:
        return len(self.initial)


@dataclass(frozen=True)
class CollisionEvent:
    """Onset of a collision between ``pair``.

    ``speed_difference`` is the gap between scalar speeds and feeds the
    metrics; ``relative_speed`` is the magnitude of the velocity difference,
    kept for crossings where the two disagree.
    """

    step: int
    pair: tuple
    relative_speed: float
    speed_difference: float
    ego_speed: float | None


@dataclass
class SimTrace:
    """Per-step history of one episode.

    ``states`` is (K+1, N, 5) with columns x, y, v, heading, slip; ``actions``
    is (K, N, 2) with the applied acceleration and the lane target (lane
    change) or zero (intersection).
    """

    config: ScenarioConfig = field(repr=False)
    states: np.ndarray
    actions: np.ndarray
    ego_plans: list
    solve_times: np.ndarray
    potentials: np.ndarray
    events: list
    aborted: bool = False
    diagnostic: str = ""

    @property
    def ego_collided(self) -> bool:
        return any(0 in e.pair for e in self.events)

    @property
    def first_collision_step(self) -> int | None:
        return min((e.step for e in self.events), default=None)


# ---------------------------------------------------------------- collisions

def detect_collision(lon, lat, d_xc: float = 7.0, d_yc: float = 4.5) -> list[tuple]:
    """Pairs whose road-aligned offsets satisfy |dlon| < d_xc and |dlat| < d_yc."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    hits = (np.abs(lon[:, None] - lon[None, :]) < d_xc) & (np.abs(lat[:, None] - lat[None, :]) < d_yc)
    return [(int(j), int(i)) for i, j in zip(*np.nonzero(np.tril(hits, -1)))]


def detect_collision_headings(x, y, heading, d_xc: float = 7.0, d_yc: float = 4.5) -> list[tuple]:
    """Pairs inside the collision box in the heading frames of both vehicles.

    Used where no common road frame exists; for perpendicular vehicles the
    test reduces to a d_yc by d_yc square.
    """
    x, y, heading = (np.asarray(a, dtype=float) for a in (x, y, heading))
    dx = x[None, :] - x[:, None]
    dy = y[None, :] - y[:, None]
    c, s = np.cos(heading)[:, None], np.sin(heading)[:, None]
    lon = np.abs(c * dx + s * dy)
    lat = np.abs(-s * dx + c * dy)
    inside = (lon < d_xc) & (lat < d_yc)
    hits = inside & inside.T
    return [(int(j), int(i)) for i, j in zip(*np.nonzero(np.tril(hits, -1)))]


def _velocity(row) -> np.ndarray:
    course = row[3] + row[4]
    return row[2] * np.array([math.cos(course), math.sin(course)])


# ---------------------------------------------------------------- time to collision

def conflict_point(route_i: Route, route_j: Route):
    """Arc lengths along both routes of their first crossing, or None."""
    inter = route_i.line().intersection(route_j.line())
    if inter.is_empty:
        return None
    pts = [inter] if inter.geom_type == "Point" else list(getattr(inter, "geoms", [inter]))
    best = None
    for g in pts:
        p = g if g.geom_type == "Point" else shapely.Point(g.coords[0])
        si, sj = route_i.project(p.x, p.y), route_j.project(p.x, p.y)
        if best is None or si < best[0]:
            best = (si, sj)
    return best


def ttc(distance_to_conflict: float, speed: float) -> float:
    """Time to reach the conflict point; infinite if stopped or already past it."""
    if speed <= 0 or distance_to_conflict < 0:
        return math.inf
    return distance_to_conflict / speed


def ttc_actions(states: Sequence[RouteState], routes: Sequence[Route], agents: Sequence[int],
                policy: SurroundingPolicy, crossings: dict) -> dict:
    """Brake/accelerate decisions of the time-to-collision heuristic.

    A vehicle reacts to every other vehicle closer than the safe distance
    whose route crosses its own; it brakes if its own time to the conflict
    point is not shorter than the other's, and accelerates otherwise. Any
    brake decision wins.
    """
    out = {}
    pos = [routes[k].position(st.s) for k in range(len(states)) for st in [states[k]]]
    for i in agents:
        a = 0.0
        for j in range(len(states)):
            if j == i:
                continue
            cp = crossings.get((i, j))
            if cp is None:
                continue
            if math.hypot(pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]) >= policy.safe_distance:
                continue
            t_i = ttc(cp[0] - states[i].s, states[i].v)
            t_j = ttc(cp[1] - states[j].s, states[j].v)
            if math.isinf(t_i) and math.isinf(t_j):
                continue
            if t_i >= t_j:
                a = -policy.accel
                break
            a = policy.accel
        out[i] = a
    return out


# ---------------------------------------------------------------- episodes

def _solve(game, cfg: ScenarioConfig, warm):
    pot = assemble_potential(game, check=False)
    if cfg.solver == "potential":
        return potential_optimization(game, cfg.optimizer, pot, initial=warm, certify=False)
    return best_response_dynamics(game, None, cfg.br, pot)


def _decision_seed(cfg: ScenarioConfig, k: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, 1, k]).generate_state(1)[0])


def run_episode(cfg: ScenarioConfig) -> SimTrace:
    """Simulate one episode; deterministic given the configuration."""
    if cfg.kind == "lane_change":
        return _run_lane_change(cfg)
    return _run_intersection(cfg)


def _empty_trace(cfg, n):
    k = cfg.n_steps
    return SimTrace(cfg, np.full((k + 1, n, 5), np.nan), np.full((k, n, 2), np.nan), [], np.full(k, np.nan),
                    np.full(k, np.nan), [])


def _record_events(trace: SimTrace, k: int, pairs, states_row, active: set):
    for pair in pairs:
        if pair in active:
            continue
        active.add(pair)
        i, j = pair
        rel = float(np.linalg.norm(_velocity(states_row[i]) - _velocity(states_row[j])))
        diff = abs(float(states_row[i][2] - states_row[j][2]))
        ego = float(states_row[0][2]) if 0 in pair else None
        trace.events.append(CollisionEvent(k, pair, rel, diff, ego))
    active.intersection_update(pairs)


def _run_lane_change(cfg: ScenarioConfig) -> SimTrace:
    n = cfg.n_agents
    road = cfg.road
    geometry = VehicleGeometry()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    trace = _empty_trace(cfg, n)
    states = list(cfg.initial)
    trace.states[0] = [s.as_array() for s in states]
    active: set = set()
    _record_events(trace, 0, _lane_collisions(states, road, cfg.params), trace.states[0], active)
    h = cfg.dt / cfg.substeps
    for k in range(cfg.n_steps):
        t0 = time.perf_counter()
        try:
            plans = [plan_candidates(s, road, cfg.horizon, cfg.dt, cfg.accelerations) for s in states]
            game = build_lane_change_game(states, road, cfg.desired_speeds, cfg.params, cfg.horizon, cfg.dt,
                                          cfg.accelerations, plans, t=k * cfg.dt)
            cfg_k = cfg if cfg.solver == "brd" else _with_seed(cfg, _decision_seed(cfg, k))
            result = _solve(game, cfg_k, None)
        except Exception as exc:  # solver failure aborts, never silently drops
            trace.aborted, trace.diagnostic = True, f"step {k}: {type(exc).__name__}: {exc}"
            log.warning("episode aborted: %s", trace.diagnostic)
            return trace
        trace.solve_times[k] = time.perf_counter() - t0
        trace.potentials[k] = result.potential_value
        trace.ego_plans.append(result.profile[0].copy())
        controls = []
        for i, s in enumerate(states):
            if i == 0 or cfg.policy.kind == "nash":
                idx = plans[i].index(result.profile[i])[0]
                controls.append((plans[i].space.strategies[idx, 0], int(plans[i].target_lane[idx])))
            elif cfg.policy.kind == "random":
                idx = int(rng.integers(plans[i].space.size))
                controls.append((plans[i].space.strategies[idx, 0], int(plans[i].target_lane[idx])))
            elif cfg.policy.kind == "ttc":
                controls.append((_lane_ttc_accel(i, states, road, cfg.policy), None))
            else:
                controls.append((0.0, None))
        new_states = []
        for s, (a, lane) in zip(states, controls):
            for _ in range(cfg.substeps):
                delta = 0.0 if lane is None else lane_change_steering(s, lane, road, geometry)
                s = step(s, ControlInput(a, delta), geometry, h)
            new_states.append(VehicleState.from_array(s.as_array()))
        states = new_states
        trace.actions[k] = [(a, 0.0 if lane is None else lane) for a, lane in controls]
        trace.states[k + 1] = [s.as_array() for s in states]
        _record_events(trace, k + 1, _lane_collisions(states, road, cfg.params), trace.states[k + 1], active)
    return trace


def _with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(cfg, optimizer=cfg.optimizer.with_seed(seed))


def _lane_collisions(states, road, params):
    lon, lat = road.to_frenet([s.x for s in states], [s.y for s in states])
    return detect_collision(lon, lat, params.d_xc, params.d_yc)


def _lane_ttc_accel(i, states, road, policy):
    lon, lat = road.to_frenet([s.x for s in states], [s.y for s in states])
    lane = road.lane_of(lat)
    for j in range(len(states)):
        if j != i and lane[j] == lane[i] and 0 < lon[j] - lon[i] < policy.safe_distance:
            if states[i].v > states[j].v:
                return -policy.accel
    return 0.0


def route_vehicle_state(route: Route, rs: RouteState) -> np.ndarray:
    x, y = route.position(rs.s)
    return np.array([float(x), float(y), rs.v, float(route.heading(rs.s)), 0.0])


def _intersection_collisions(rows, params):
    return detect_collision_headings(rows[:, 0], rows[:, 1], rows[:, 3], params.d_xc, params.d_yc)


def _run_intersection(cfg: ScenarioConfig) -> SimTrace:
    n = cfg.n_agents
    routes = cfg.routes
    seeds = np.random.SeedSequence([cfg.seed, 3]).spawn(2)
    noise = np.random.default_rng(seeds[0]).uniform(0.0, cfg.params.tie_noise, n)
    rng = np.random.default_rng(seeds[1])
    finite_accels = cfg.accelerations if cfg.game == "finite" else None
    crossings = {}
    if cfg.policy.kind == "ttc":
        for i in range(n):
            for j in range(n):
                if i != j:
                    cp = conflict_point(routes[i], routes[j])
                    if cp is not None:
                        crossings[(i, j)] = cp
    trace = _empty_trace(cfg, n)
    states = list(cfg.initial)
    trace.states[0] = [route_vehicle_state(r, s) for r, s in zip(routes, states)]
    active: set = set()
    _record_events(trace, 0, _intersection_collisions(trace.states[0], cfg.params), trace.states[0], active)
    warm = None
    for k in range(cfg.n_steps):
        t0 = time.perf_counter()
        try:
            game = build_intersection_game(states, routes, cfg.desired_speeds, cfg.params, cfg.horizon, cfg.dt,
                                           noise, None, finite_accels, t=k * cfg.dt)
            cfg_k = _with_seed(cfg, _decision_seed(cfg, k))
            result = _solve(game, cfg_k, warm if cfg.game == "continuous" else None)
        except Exception as exc:
            trace.aborted, trace.diagnostic = True, f"step {k}: {type(exc).__name__}: {exc}"
            log.warning("episode aborted: %s", trace.diagnostic)
            return trace
        trace.solve_times[k] = time.perf_counter() - t0
        trace.potentials[k] = result.potential_value
        trace.ego_plans.append(result.profile[0].copy())
        warm = result.profile
        accel = [float(result.profile[0][0])]
        ttc_acc = ttc_actions(states, routes, range(1, n), cfg.policy, crossings) if cfg.policy.kind == "ttc" else {}
        for i in range(1, n):
            if cfg.policy.kind == "nash":
                accel.append(float(result.profile[i][0]))
            elif cfg.policy.kind == "random":
                if finite_accels is None:
                    accel.append(float(rng.uniform(-3.0, 3.0)))
                else:
                    accel.append(float(finite_accels[int(rng.integers(len(finite_accels)))]))
            elif cfg.policy.kind == "ttc":
                accel.append(ttc_acc[i])
            else:
                accel.append(0.0)
        new_states = []
        for s, a in zip(states, accel):
            sk, vk = longitudinal_rollout(s.s, s.v, [[a]], cfg.dt, cfg.substeps)
            new_states.append(RouteState(float(sk[0, 1]), float(vk[0, 1])))
        states = new_states
        trace.actions[k] = [(a, 0.0) for a in accel]
        trace.states[k + 1] = [route_vehicle_state(r, s) for r, s in zip(routes, states)]
        _record_events(trace, k + 1, _intersection_collisions(trace.states[k + 1], cfg.params),
                       trace.states[k + 1], active)
    return trace


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    episodes: int
    aborted: int
    collisions: int
    collision_rate: float
    avg_ego_speed: float
    avg_relative_collision_speed: float | None
    max_relative_collision_speed: float | None
    avg_ego_collision_speed: float | None
    max_ego_collision_speed: float | None
    avg_compute_time: float | None
    max_compute_time: float | None


def compute_metrics(traces: Sequence[SimTrace]) -> Metrics:
    """Aggregate ego safety, speed and timing statistics.

    Aborted episodes are counted but excluded from every other statistic.
    """
    if not traces:
        raise ValueError("need at least one trace")
    done = [t for t in traces if not t.aborted]
    aborted = len(traces) - len(done)
    collided = sum(t.ego_collided for t in done)
    speeds = np.concatenate([t.states[:, 0, 2] for t in done]) if done else np.array([])
    ego_events = [e for t in done for e in t.events if 0 in e.pair]
    rel = [e.speed_difference for e in ego_events]
    ego_v = [e.ego_speed for e in ego_events]
    times = np.concatenate([t.solve_times for t in done]) if done else np.array([])
    stat = lambda xs, f: float(f(xs)) if len(xs) else None
    return Metrics(
        episodes=len(traces), aborted=aborted, collisions=collided,
        collision_rate=collided / len(done) if done else float("nan"),
        avg_ego_speed=float(np.mean(speeds)) if len(speeds) else float("nan"),
        avg_relative_collision_speed=stat(rel, np.mean), max_relative_collision_speed=stat(rel, np.max),
        avg_ego_collision_speed=stat(ego_v, np.mean), max_ego_collision_speed=stat(ego_v, np.max),
        avg_compute_time=stat(times, np.mean), max_compute_time=stat(times, np.max))


# ---------------------------------------------------------------- trace export

TRACE_FIELDS = ("step", "t", "states", "actions", "ego_plan", "solve_time", "potential", "events")


def trace_records(trace: SimTrace, include_timing: bool = True):
    """Line records of a trace, one per state sample, in ``TRACE_FIELDS`` order."""
    cfg = trace.config
    k_max = len(trace.states)
    for k in range(k_max):
        if np.all(np.isnan(trace.states[k])):
            break
        has_decision = k < len(trace.ego_plans)
        rec = {
            "step": k,
            "t": round(k * cfg.dt, 9),
            "states": [[float(v) for v in row] for row in trace.states[k]],
            "actions": [[float(v) for v in row] for row in trace.actions[k]] if has_decision else None,
            "ego_plan": [float(v) for v in trace.ego_plans[k]] if has_decision else None,
            "solve_time": float(trace.solve_times[k]) if has_decision and include_timing else None,
            "potential": float(trace.potentials[k]) if has_decision else None,
            "events": [{"pair": list(e.pair), "relative_speed": e.relative_speed,
                        "speed_difference": e.speed_difference, "ego_speed": e.ego_speed}
                       for e in trace.events if e.step == k],
        }
        yield {f: rec[f] for f in TRACE_FIELDS}
    if trace.aborted:
        yield {"aborted": True, "diagnostic": trace.diagnostic}


def write_trace(trace: SimTrace, path, include_timing: bool = True) -> None:
    with open(path, "w") as fh:
        for rec in trace_records(trace, include_timing):
            fh.write(json.dumps(rec) + "\n")
