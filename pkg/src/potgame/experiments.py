"""Monte-Carlo experiments: randomized scenarios, parallel episodes, result tables."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .costs import CostParams
from .optimize import OptimizerConfig
from .scenarios import INTERSECTION_PARAMS, intersection_config, lane_change_config
from .sim import (POLICIES, SOLVERS, Metrics, ScenarioConfig, SimTrace, SurroundingPolicy, compute_metrics,
                  detect_collision, detect_collision_headings, route_vehicle_state, run_episode)
from .solvers import BRConfig

# potential minimization per decision: ten starts as in the reference study,
# each a small evolutionary population followed by a short pattern search
SIM_OPTIMIZER = OptimizerConfig(restarts=10, population=10, generations=15, polish_iters=30, polish_tol=1e-4)
# best-response dynamics: three starts per inner one-dimensional search
SIM_BR = BRConfig(max_sweeps=50, epsilon=1e-3,
                  inner=OptimizerConfig(restarts=3, population=6, generations=10, polish_iters=25, polish_tol=1e-4))

# spawn ranges (m) measured from the edge of the conflict region
EGO_SPAWN = (40.0, 80.0)
OTHER_SPAWN = (20.0, 80.0)
SPEED_SPREAD = 1.0
MAX_ATTEMPTS = 1000

COLUMNS = ("policy", "collision_rate", "avg_ego_speed", "avg_rel_collision_speed", "max_rel_collision_speed",
           "avg_ego_collision_speed", "max_ego_collision_speed", "avg_compute_time", "max_compute_time",
           "game", "solver", "episodes", "collisions", "aborted")
_METRIC_FIELDS = {
    "collision_rate": "collision_rate", "avg_ego_speed": "avg_ego_speed",
    "avg_rel_collision_speed": "avg_relative_collision_speed",
    "max_rel_collision_speed": "max_relative_collision_speed",
    "avg_ego_collision_speed": "avg_ego_collision_speed", "max_ego_collision_speed": "max_ego_collision_speed",
    "avg_compute_time": "avg_compute_time", "max_compute_time": "max_compute_time",
    "episodes": "episodes", "collisions": "collisions", "aborted": "aborted",
}
FORMATS = ("table", "csv", "json-lines")


class ScenarioGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Cell:
    game: str
    solver: str
    policy: str

    def __post_init__(self):
        if self.game not in ("finite", "continuous"):
            raise ValueError(f"unknown game kind {self.game!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str = "intersection"
    cells: tuple = (Cell("continuous", "potential", "nash"),)
    episodes: int = 200
    seed: int = 0
    out: str | None = None
    jobs: int = 1
    params: CostParams | None = None
    duration: float | None = None

    def __post_init__(self):
        if self.scenario not in ("intersection", "lane_change"):
            raise ValueError("scenario must be intersection or lane_change")
        if self.episodes < 1:
            raise ValueError("episode count must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if not self.cells:
            raise ValueError("at least one cell required")
        if self.scenario == "lane_change" and any(c.game != "finite" for c in self.cells):
            raise ValueError("lane-change experiments use finite games")


def episode_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _initially_clear(cfg: ScenarioConfig) -> bool:
    p = cfg.params
    if cfg.kind == "intersection":
        rows = np.array([route_vehicle_state(r, s) for r, s in zip(cfg.routes, cfg.initial)])
        return not detect_collision_headings(rows[:, 0], rows[:, 1], rows[:, 3], p.d_xc, p.d_yc)
    lon, lat = cfg.road.to_frenet([s.x for s in cfg.initial], [s.y for s in cfg.initial])
    return not detect_collision(lon, lat, p.d_xc, p.d_yc)


def _sample_intersection(rng, cell: Cell, seed: int, params, duration) -> ScenarioConfig:
    n = 5
    dist = np.concatenate([[rng.uniform(*EGO_SPAWN)], rng.uniform(*OTHER_SPAWN, n - 1)])
    speeds = 5.0 + rng.uniform(-SPEED_SPREAD, SPEED_SPREAD, n)
    kw = {} if duration is None else {"duration": duration}
    return intersection_config(dist, speeds, game=cell.game, solver=cell.solver,
                               policy=SurroundingPolicy(cell.policy), params=params or INTERSECTION_PARAMS,
                               seed=seed, optimizer=SIM_OPTIMIZER, br=SIM_BR, **kw)


def _sample_lane_change(rng, cell: Cell, seed: int, params, duration) -> ScenarioConfig:
    vehicles = [(0.0, int(rng.integers(1, 4)), 27.0)]
    for _ in range(4):
        vehicles.append((float(rng.uniform(-60, 80)), int(rng.integers(1, 4)), float(rng.uniform(22, 30))))
    desired = [27.0] + [v for _, _, v in vehicles[1:]]
    kw = {} if duration is None else {"duration": duration}
    return lane_change_config(vehicles, desired, solver=cell.solver, policy=SurroundingPolicy(cell.policy),
                              params=params or CostParams(), seed=seed, **kw)


def generate_scenarios(spec: ExperimentSpec, cell: Cell | None = None) -> list[ScenarioConfig]:
    """One configuration per episode, drawn from the episode's own seed.

    Placements that start inside a collision box are redrawn; the same
    master seed yields the same placements for every cell.
    """
    cell = cell or spec.cells[0]
    sampler = _sample_intersection if spec.scenario == "intersection" else _sample_lane_change
    out = []
    for index in range(spec.episodes):
        seed = episode_seed(spec.seed, index)
        rng = np.random.default_rng(seed)
        for _ in range(MAX_ATTEMPTS):
            cfg = sampler(rng, cell, seed, spec.params, spec.duration)
            if _initially_clear(cfg):
                out.append(cfg)
                break
        else:
            raise ScenarioGenerationError(
                f"episode {index} (seed {seed}): no collision-free placement in {MAX_ATTEMPTS} attempts")
    return out


@dataclass(frozen=True)
class ResultRow:
    cell: Cell
    metrics: Metrics


@dataclass(frozen=True)
class ResultTable:
    rows: tuple
    metadata: dict = field(default_factory=dict)

    def row(self, game: str, solver: str, policy: str) -> Metrics:
        for r in self.rows:
            if r.cell == Cell(game, solver, policy):
                return r.metrics
        raise KeyError((game, solver, policy))


def build_id() -> str:
    try:
        return f"artifact-{version('artifact')}"
    except PackageNotFoundError:
        return "artifact-dev"


def run_cell(spec: ExperimentSpec, cell: Cell, executor=None) -> list[SimTrace]:
    configs = generate_scenarios(spec, cell)
    if executor is None:
        return [run_episode(c) for c in configs]
    # map preserves submission order, so the reduction is ordered by episode
    return list(executor.map(run_episode, configs, chunksize=max(1, len(configs) // (8 * spec.jobs))))


def run_experiment(spec: ExperimentSpec, keep_traces: bool = False):
    """Run every cell of ``spec`` and aggregate one metrics row per cell.

    With ``out`` set, the table is written next to it in all three formats.
    Returns the table, plus the traces per cell when ``keep_traces``.
    """
    rows, traces = [], {}
    executor = ProcessPoolExecutor(spec.jobs) if spec.jobs > 1 else None
    try:
        for cell in spec.cells:
            tr = run_cell(spec, cell, executor)
            rows.append(ResultRow(cell, compute_metrics(tr)))
            if keep_traces:
                traces[cell] = tr
    finally:
        if executor is not None:
            executor.shutdown()
    meta = {"scenario": spec.scenario, "seed": spec.seed, "episodes": spec.episodes, "build": build_id()}
    table = ResultTable(tuple(rows), meta)
    if spec.out:
        base = Path(spec.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        for fmt, suffix in (("table", ".txt"), ("csv", ".csv"), ("json-lines", ".jsonl")):
            emit_table(table, fmt, base.with_suffix(suffix))
    return (table, traces) if keep_traces else table


def abort_fraction(table: ResultTable) -> float:
    total = sum(r.metrics.episodes for r in table.rows)
    return sum(r.metrics.aborted for r in table.rows) / total if total else 0.0


# ---------------------------------------------------------------- table output

def _row_values(row: ResultRow) -> dict:
    vals = {"policy": row.cell.policy, "game": row.cell.game, "solver": row.cell.solver}
    for col, attr in _METRIC_FIELDS.items():
        vals[col] = getattr(row.metrics, attr)
    return vals


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "N/A"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def format_table(table: ResultTable, fmt: str = "table") -> str:
    """Render the table as aligned text, csv, or json lines (metadata first)."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")
    values = [_row_values(r) for r in table.rows]
    if fmt == "json-lines":
        lines = [json.dumps({"metadata": table.metadata})]
        for v in values:
            lines.append(json.dumps({c: ("N/A" if v[c] is None else v[c]) for c in COLUMNS}))
        return "\n".join(lines) + "\n"
    cells = [[_fmt(v[c]) for c in COLUMNS] for v in values]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(cells)
        return buf.getvalue()
    widths = [max(len(c), *(len(r[k]) for r in cells)) if cells else len(c) for k, c in enumerate(COLUMNS)]
    line = lambda items: "  ".join(s.rjust(w) if k else s.ljust(w) for k, (s, w) in enumerate(zip(items, widths)))
    meta = " ".join(f"{k}={v}" for k, v in table.metadata.items())
    out = [f"# {meta}", line(COLUMNS), line(["-" * w for w in widths])]
    out += [line(r) for r in cells]
    return "\n".join(out) + "\n"


def emit_table(table: ResultTable, fmt: str, path) -> Path:
    path = Path(path)
    path.write_text(format_table(table, fmt))
    return path


def parse_table(text: str) -> ResultTable:
    """Inverse of the json-lines format."""
    lines = [json.loads(l) for l in text.splitlines() if l.strip()]
    meta = lines[0].get("metadata", {}) if lines else {}
    rows = []
    for rec in lines[1:]:
        vals = {c: (None if rec[c] == "N/A" else rec[c]) for c in COLUMNS}
        m = Metrics(
            episodes=vals["episodes"], aborted=vals["aborted"], collisions=vals["collisions"],
            collision_rate=vals["collision_rate"], avg_ego_speed=vals["avg_ego_speed"],
            avg_relative_collision_speed=vals["avg_rel_collision_speed"],
            max_relative_collision_speed=vals["max_rel_collision_speed"],
            avg_ego_collision_speed=vals["avg_ego_collision_speed"],
            max_ego_collision_speed=vals["max_ego_collision_speed"],
            avg_compute_time=vals["avg_compute_time"], max_compute_time=vals["max_compute_time"])
        rows.append(ResultRow(Cell(vals["game"], vals["solver"], vals["policy"]), m))
    return ResultTable(tuple(rows), meta)


def read_table(path) -> ResultTable:
    return parse_table(Path(path).read_text())
