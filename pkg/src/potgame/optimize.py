"""Derivative-free global minimization over boxes and finite candidate sets.

The continuous search runs several independent differential-evolution
populations side by side (one per restart, all evaluated in a single batched
call per generation), then polishes each restart's best point with a
coordinate pattern search. Everything is driven by one seeded generator, so
the result is a deterministic function of the seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .game_core import ContinuousStrategySpace, FiniteStrategySpace

Objective = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 10
    population: int = 16
    generations: int = 25
    mutation: float = 0.7
    crossover: float = 0.9
    seed: int = 0
    polish_iters: int = 60
    polish_tol: float = 1e-7
    # finite joint spaces up to this size are searched exhaustively
    exhaustive_cap: int = 10**7

    def __post_init__(self):
        if self.restarts < 1 or self.population < 1 or self.generations < 0:
            raise ValueError("optimizer budget must be positive")
        if self.population < 4 and self.generations > 0:
            raise ValueError("differential evolution needs a population of at least 4")
        if not (0 < self.mutation <= 2 and 0 <= self.crossover <= 1):
            raise ValueError("mutation in (0, 2] and crossover in [0, 1] required")

    def with_seed(self, seed: int) -> "OptimizerConfig":
        return OptimizerConfig(self.restarts, self.population, self.generations, self.mutation,
                               self.crossover, seed, self.polish_iters, self.polish_tol, self.exhaustive_cap)


class OptimizationError(RuntimeError):
    pass


def _safe(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.where(np.isfinite(v), v, np.inf)


def minimize_finite(objective: Objective, space: FiniteStrategySpace) -> tuple[int, float]:
    """Exhaustive argmin over the candidate rows; ties go to the lowest index."""
    values = _safe(objective(space.strategies))
    k = int(np.argmin(values))
    if not np.isfinite(values[k]):
        raise OptimizationError(f"objective non-finite at all {space.size} candidates")
    return k, float(values[k])


def _pattern_search(objective, x, fx, lo, hi, cfg: OptimizerConfig):
    """Batched compass search: x is (R, d), each row polished independently.

    Every iteration probes both directions of every coordinate in one
    objective call and takes the best improving move; rows that cannot
    improve halve their step.
    """
    r, d = x.shape
    span = hi - lo
    step = np.tile(0.1 * span, (r, 1))
    eye = np.eye(d)
    for _ in range(cfg.polish_iters):
        if not np.any(step > cfg.polish_tol * np.maximum(span, 1e-12)):
            break
        moves = np.concatenate([eye, -eye])[None, :, :] * np.tile(step, (1, 2)).reshape(r, 2, d).repeat(d, 1)
        trial = np.clip(x[:, None, :] + moves, lo, hi)
        ft = _safe(objective(trial.reshape(-1, d))).reshape(r, 2 * d)
        k = np.argmin(ft, axis=1)
        best = ft[np.arange(r), k]
        improved = best < fx
        x = np.where(improved[:, None], trial[np.arange(r), k], x)
        fx = np.where(improved, best, fx)
        step = np.where(improved[:, None], step, 0.5 * step)
    return x, fx


def minimize_box(objective: Objective, lower, upper, config: OptimizerConfig = OptimizerConfig(),
                 initial=None) -> tuple[np.ndarray, float]:
    """Best point found in the box [lower, upper] and its value.

    ``initial`` (one point or several rows) is injected into the first
    restart's population, which makes warm starts never worse than the given
    point. The returned point always lies inside the box.
    """
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    d = lo.size
    rng = np.random.default_rng(config.seed)
    r, p = config.restarts, config.population
    pop = lo + (hi - lo) * rng.random((r, p, d))
    # the box centre and the point nearest the origin are cheap, sensible probes
    pop[0, 0] = 0.5 * (lo + hi)
    if p > 1:
        pop[0, 1] = np.clip(0.0, lo, hi)
    if initial is not None:
        init = np.clip(np.atleast_2d(np.asarray(initial, dtype=float)), lo, hi)[: p]
        pop[0, p - len(init):] = init
    fit = _safe(objective(pop.reshape(-1, d))).reshape(r, p)
    seen_finite = bool(np.any(np.isfinite(fit)))

    rows = np.arange(p)
    for _ in range(config.generations):
        # rand/1/bin with three distinct partners per member
        picks = np.argsort(rng.random((r, p, p)) + (rows[None, :, None] == rows[None, None, :]), axis=2)[:, :, :3]
        a = np.take_along_axis(pop, picks[:, :, 0:1].repeat(d, 2), 1)
        b = np.take_along_axis(pop, picks[:, :, 1:2].repeat(d, 2), 1)
        c = np.take_along_axis(pop, picks[:, :, 2:3].repeat(d, 2), 1)
        mutant = a + config.mutation * (b - c)
        cross = rng.random((r, p, d)) < config.crossover
        cross[np.arange(r)[:, None], rows[None, :], rng.integers(d, size=(r, p))] = True
        trial = np.where(cross, mutant, pop)
        # reflect out-of-box coordinates back between the parent and the bound
        trial = np.where(trial < lo, lo + rng.random((r, p, d)) * (pop - lo), trial)
        trial = np.where(trial > hi, hi - rng.random((r, p, d)) * (hi - pop), trial)
        ft = _safe(objective(trial.reshape(-1, d))).reshape(r, p)
        seen_finite |= bool(np.any(np.isfinite(ft)))
        better = ft <= fit
        pop = np.where(better[:, :, None], trial, pop)
        fit = np.where(better, ft, fit)

    if not seen_finite:
        raise OptimizationError(f"objective non-finite at every probe ({r * p * (config.generations + 1)} points)")
    best = np.argmin(fit, axis=1)
    x = pop[np.arange(r), best]
    fx = fit[np.arange(r), best]
    if config.polish_iters > 0:
        x, fx = _pattern_search(objective, x, fx, lo, hi, config)
    k = int(np.argmin(fx))
    if not np.isfinite(fx[k]):
        raise OptimizationError("objective non-finite at every surviving point")
    return np.clip(x[k], lo, hi), float(fx[k])


def global_minimize(objective: Objective, space, config: OptimizerConfig = OptimizerConfig(),
                    initial=None) -> tuple[np.ndarray, float]:
    """Minimize a batched objective over a strategy space.

    Finite spaces are enumerated (lowest index wins ties); boxes use
    :func:`minimize_box`.
    """
    if isinstance(space, FiniteStrategySpace):
        k, val = minimize_finite(objective, space)
        return space.strategies[k].copy(), val
    if isinstance(space, ContinuousStrategySpace):
        return minimize_box(objective, space.lower, space.upper, config, initial)
    raise TypeError(f"unsupported space {type(space).__name__}")
