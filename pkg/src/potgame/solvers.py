"""Nash-equilibrium seeking: best-response dynamics and potential minimization."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .game_core import (DEFAULT_ENUMERATION_CAP, EnumerationCapError,
                        PotentialFunction, StrategyProfile, StructuredGame, _joint_grid_chunks,
                        assemble_potential)
from .optimize import OptimizerConfig, global_minimize, minimize_box

NASH_ATOL = 1e-9


@dataclass(frozen=True)
class BRConfig:
    max_sweeps: int = 100
    epsilon: float = 0.0
    inner: OptimizerConfig = OptimizerConfig(restarts=3)

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")


@dataclass(frozen=True)
class NECertificate:
    best_alternatives: tuple
    improvements: tuple
    epsilon: float
    method: str
    passes: bool
    failing_agents: tuple = ()


@dataclass(frozen=True)
class NEResult:
    profile: StrategyProfile
    converged: bool
    sweeps_used: int
    potential_value: float | None
    certificate: NECertificate | None
    wall_time: float
    potential_trace: tuple = field(default=(), repr=False)


def _fixed_others(profile: StrategyProfile, agent: int, rows: np.ndarray) -> list:
    b = len(rows)
    out = [np.broadcast_to(u, (b, u.size)) for u in profile.strategies]
    out[agent] = rows
    return out


def agent_objective(game: StructuredGame, agent: int, profile: StrategyProfile):
    """Batched cost of ``agent`` as a function of its own strategy only."""
    return lambda rows: game.cost_batch(agent, _fixed_others(profile, agent, np.atleast_2d(rows)))


def best_response(game: StructuredGame, agent: int, profile: StrategyProfile,
                  config: OptimizerConfig = OptimizerConfig(restarts=3)) -> np.ndarray:
    """Cost-minimizing strategy of ``agent`` against the others in ``profile``.

    Finite spaces are enumerated and ties go to the lowest strategy index.
    Continuous spaces use the global optimizer warm-started at the agent's
    current strategy.
    """
    game.validate(profile)
    strategy, _ = global_minimize(agent_objective(game, agent, profile), game.spaces[agent], config,
                                  initial=profile[agent])
    return strategy


def check_nash(game: StructuredGame, profile: StrategyProfile, epsilon: float = 0.0, method: str | None = None,
               config: OptimizerConfig = OptimizerConfig(restarts=3), atol: float = NASH_ATOL) -> NECertificate:
    """Largest unilateral improvement each agent can find against ``profile``.

    ``exhaustive`` enumerates every alternative (finite games only);
    ``sampled-multistart`` runs the global optimizer per agent and is only a
    heuristic certificate.
    """
    game.validate(profile)
    method = method or ("exhaustive" if game.is_finite else "sampled-multistart")
    if method == "exhaustive" and not game.is_finite:
        raise ValueError("exhaustive Nash check needs finite strategy spaces")
    if method not in ("exhaustive", "sampled-multistart"):
        raise ValueError(f"unknown method {method!r}")
    alts, gains, failing = [], [], []
    for i, space in enumerate(game.spaces):
        obj = agent_objective(game, i, profile)
        current = float(obj(profile[i])[0])
        if method == "exhaustive":
            values = obj(space.strategies)
            k = int(np.argmin(values))
            alt, best = space.strategies[k], float(values[k])
        elif space.is_finite:
            rng = np.random.default_rng(config.seed)
            n = min(space.size, config.restarts * config.population)
            pick = np.sort(rng.choice(space.size, size=n, replace=False))
            values = obj(space.strategies[pick])
            k = int(np.argmin(values))
            alt, best = space.strategies[pick[k]], float(values[k])
        else:
            alt, best = global_minimize(obj, space, config, initial=profile[i])
        gain = max(0.0, current - best)
        alts.append(np.array(alt))
        gains.append(gain)
        if gain > epsilon + atol * max(1.0, abs(current)):
            failing.append(i)
    return NECertificate(tuple(alts), tuple(gains), epsilon, method, not failing, tuple(failing))


def best_response_dynamics(game: StructuredGame, initial: StrategyProfile | None = None,
                           config: BRConfig = BRConfig(), potential: PotentialFunction | None = None) -> NEResult:
    """Round-robin best responses in agent order until no agent wants to move.

    An agent switches only if its cost drops by more than ``config.epsilon``.
    The loop stops as soon as N consecutive updates (counting the agent that
    moved last, which now plays a best response) leave the profile unchanged;
    those checks double as the equilibrium certificate.
    """
    if not game.is_finite and config.epsilon <= 0:
        raise ValueError("continuous games need epsilon > 0")
    start = time.perf_counter()
    potential = potential or assemble_potential(game, check=False)
    profile = initial if initial is not None else game.neutral_profile()
    game.validate(profile)
    trace = [potential(profile)]
    method = "exhaustive" if game.is_finite else "sampled-multistart"
    inner = config.inner
    n = game.n_agents
    alts = [profile[j] for j in range(n)]
    gains = [0.0] * n
    stable = 0
    for sweep in range(1, config.max_sweeps + 1):
        for j, space in enumerate(game.spaces):
            obj = agent_objective(game, j, profile)
            current = float(obj(profile[j])[0])
            cand, best = global_minimize(obj, space, inner.with_seed(inner.seed + 7919 * sweep + j),
                                         initial=profile[j])
            gain = current - best
            if gain > config.epsilon + NASH_ATOL * 1e-3 * max(1.0, abs(current)):
                profile = profile.replace(j, cand)
                trace.append(potential(profile))
                alts[j], gains[j] = cand, 0.0
                stable = 1
            else:
                alts[j], gains[j] = cand, max(0.0, gain)
                stable += 1
            if stable >= n:
                cert = NECertificate(tuple(alts), tuple(gains), config.epsilon, method, True, ())
                return NEResult(profile, True, sweep, trace[-1], cert, time.perf_counter() - start, tuple(trace))
    cert = check_nash(game, profile, config.epsilon, method, inner)
    return NEResult(profile, False, config.max_sweeps, trace[-1], cert, time.perf_counter() - start, tuple(trace))


def _finite_argmin(game: StructuredGame, potential: PotentialFunction, cap: int) -> tuple:
    size = game.joint_size()
    if size > cap:
        raise EnumerationCapError(f"joint space has {size} profiles, cap is {cap}")
    if potential.components:
        values = potential.tensor(cap)
        flat = int(np.argmin(values))
        return np.unravel_index(flat, values.shape), float(values.flat[flat])
    best_val, best_flat = math.inf, 0
    for start, rows in _joint_grid_chunks(game):
        v = potential.batch(rows)
        k = int(np.argmin(v))
        if v[k] < best_val:
            best_val, best_flat = float(v[k]), start + k
    return np.unravel_index(best_flat, [s.size for s in game.spaces]), best_val


def _finite_coordinate_search(game: StructuredGame, potential: PotentialFunction, config: OptimizerConfig,
                              initial: StrategyProfile | None) -> tuple:
    """Multi-start coordinate descent on F over strategy indices."""
    rng = np.random.default_rng(config.seed)
    sizes = [s.size for s in game.spaces]
    starts = [rng.integers(0, sizes) for _ in range(config.restarts)]
    if initial is not None:
        starts[0] = np.array([s.index_of(u) for s, u in zip(game.spaces, initial.strategies)])
    best_idx, best_val = None, math.inf
    for idx in starts:
        idx = np.array(idx)
        val = math.inf
        for _ in range(100):
            moved = False
            for i, s in enumerate(game.spaces):
                rows = [np.broadcast_to(sp.strategies[k], (s.size, sp.dim)) for sp, k in zip(game.spaces, idx)]
                rows[i] = s.strategies
                v = potential.batch(rows)
                k = int(np.argmin(v))
                if v[k] < val - 1e-15 * max(1.0, abs(val)) and k != idx[i]:
                    moved = True
                idx[i], val = k, float(v[k])
            if not moved:
                break
        if val < best_val:
            best_idx, best_val = tuple(idx), val
    return best_idx, best_val


def potential_optimization(game: StructuredGame, config: OptimizerConfig = OptimizerConfig(),
                           potential: PotentialFunction | None = None, initial: StrategyProfile | None = None,
                           certify: bool = True, epsilon: float | None = None) -> NEResult:
    """Minimize the potential over the joint strategy space.

    Finite games are enumerated when the joint space fits ``exhaustive_cap``
    and otherwise searched by multi-start coordinate descent. Continuous games
    minimize over the product box. With ``certify`` the result carries a
    Nash certificate (exhaustive for finite, sampled for continuous) and
    ``converged`` reports whether it passes; without it ``converged`` only
    means the optimizer finished.
    """
    start = time.perf_counter()
    potential = potential or assemble_potential(game, check=False)
    if game.is_finite:
        eps = 0.0 if epsilon is None else epsilon
        if game.joint_size() <= config.exhaustive_cap:
            idx, value = _finite_argmin(game, potential, config.exhaustive_cap)
        else:
            idx, value = _finite_coordinate_search(game, potential, config, initial)
        profile = game.profile_from_indices(idx)
    else:
        eps = 1e-3 if epsilon is None else epsilon
        dims = [s.dim for s in game.spaces]
        cuts = np.cumsum(dims)[:-1]
        lo = np.concatenate([s.lower for s in game.spaces])
        hi = np.concatenate([s.upper for s in game.spaces])
        objective = lambda x: potential.batch(np.split(np.atleast_2d(x), cuts, axis=1))
        x0 = None if initial is None else np.concatenate(initial.strategies)
        x, value = minimize_box(objective, lo, hi, config, initial=x0)
        profile = StrategyProfile(tuple(np.split(x, cuts)), game.t)
    cert = None
    if certify:
        cert = check_nash(game, profile, eps, None, OptimizerConfig(restarts=3, seed=config.seed))
    converged = cert.passes if cert is not None else True
    return NEResult(profile, converged, 0, value, cert, time.perf_counter() - start, (value,))


def pure_nash_set(cost_tensors, atol: float = NASH_ATOL) -> set:
    """Index tuples where no agent can lower its own cost tensor by deviating.

    ``cost_tensors[i]`` is agent i's cost over the joint index grid; pass the
    potential N times to get the equilibria of the identical-interest game.
    """
    ok = None
    for i, c in enumerate(cost_tensors):
        c = np.asarray(c, dtype=float)
        best = np.min(c, axis=i, keepdims=True)
        here = c <= best + atol * np.maximum(1.0, np.abs(best))
        ok = here if ok is None else ok & here
    return {tuple(int(k) for k in idx) for idx in np.argwhere(ok)}


def brute_force_nash(game: StructuredGame, cap: int = DEFAULT_ENUMERATION_CAP) -> set:
    if not game.is_finite:
        raise ValueError("brute-force enumeration needs finite strategy spaces")
    if game.joint_size() > cap:
        raise EnumerationCapError(f"joint space has {game.joint_size()} profiles, cap is {cap}")
    return pure_nash_set([game.cost_tensor(i) for i in range(game.n_agents)])
