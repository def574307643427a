"""Games with structured costs and their exact potential functions.

A structured game gives every agent a list of cost terms. A *self* term
depends only on the agent's own strategy; a *pairwise* term couples the agent
with one partner and must be mirrored, with the same weight, in the partner's
list. Evaluators are batched: a self evaluator maps an array of strategies
shaped (B, d_i) to B costs, a pairwise evaluator maps (B, d_i) and (B, d_j)
to B costs. Evaluators close over whatever global state they need (initial
vehicle states, roads, ...); the game keeps a reference to that state so that
a game value is a pure function of its construction arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_ENUMERATION_CAP = 10**6
EXACT_TOL = 1e-9


class EnumerationCapError(ValueError):
    """Raised when an exhaustive check would visit too many joint profiles."""


class AsymmetricPairError(ValueError):
    """Raised when a pairwise term differs from its mirrored partner term."""


@dataclass(frozen=True, eq=False)
class FiniteStrategySpace:
    """A finite list of candidate strategies, one row per strategy."""

    strategies: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        s = np.asarray(self.strategies, dtype=float)
        if s.ndim == 1:
            s = s.reshape(-1, 1)
        if s.ndim != 2 or s.shape[0] == 0:
            raise ValueError("a finite strategy space needs at least one strategy")
        if len(np.unique(s, axis=0)) != len(s):
            raise ValueError("duplicate strategies in finite strategy space")
        s.setflags(write=False)
        object.__setattr__(self, "strategies", s)
        if self.labels is not None and len(self.labels) != len(s):
            raise ValueError("one label per strategy required")

    is_finite = True

    @property
    def size(self) -> int:
        return self.strategies.shape[0]

    @property
    def dim(self) -> int:
        return self.strategies.shape[1]

    def __len__(self):
        return self.size

    def __getitem__(self, k: int) -> np.ndarray:
        return self.strategies[k]

    def index_of(self, strategy) -> int:
        hits = np.flatnonzero(np.all(self.strategies == np.asarray(strategy, dtype=float), axis=1))
        if len(hits) == 0:
            raise ValueError("strategy not in space")
        return int(hits[0])

    def contains(self, strategy) -> bool:
        strategy = np.asarray(strategy, dtype=float)
        if strategy.shape != (self.dim,):
            return False
        return bool(np.any(np.all(self.strategies == strategy, axis=1)))

    @classmethod
    def constant_actions(cls, actions, horizon: int, labels=None) -> "FiniteStrategySpace":
        """Strategies that repeat one action over the whole horizon.

        ``actions`` is shaped (K, m); each strategy row is the action tiled
        ``horizon`` times, giving dimension ``m * horizon``.
        """
        a = np.asarray(actions, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        return cls(np.tile(a, (1, horizon)), labels)


@dataclass(frozen=True, eq=False)
class ContinuousStrategySpace:
    """Axis-aligned box of strategies."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("bounds must be nonempty vectors of equal length")
        if not np.all(np.isfinite(lo) & np.isfinite(hi)) or np.any(lo > hi):
            raise ValueError("need finite bounds with lower <= upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    is_finite = False

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, strategy) -> bool:
        strategy = np.asarray(strategy, dtype=float)
        return strategy.shape == (self.dim,) and bool(np.all((strategy >= self.lower) & (strategy <= self.upper)))

    def clip(self, points):
        return np.clip(points, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    @property
    def neutral(self) -> np.ndarray:
        """Point of the box closest to the origin."""
        return np.clip(np.zeros(self.dim), self.lower, self.upper)


StrategySpace = FiniteStrategySpace | ContinuousStrategySpace


@dataclass(frozen=True, eq=False)
class StrategyProfile:
    """One strategy per agent, planned at time ``t``."""

    strategies: tuple
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "strategies",
                           tuple(np.atleast_1d(np.asarray(s, dtype=float)) for s in self.strategies))

    def __len__(self):
        return len(self.strategies)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.strategies[i]

    def replace(self, agent: int, strategy) -> "StrategyProfile":
        s = list(self.strategies)
        s[agent] = strategy
        return StrategyProfile(tuple(s), self.t)

    def __eq__(self, other):
        if not isinstance(other, StrategyProfile) or len(self) != len(other):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.strategies, other.strategies))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CostTerm:
    """A weighted cost term owned by ``agent``.

    With ``other`` unset the term is a self term and ``evaluator`` takes the
    agent's strategies only; otherwise it is pairwise and ``evaluator`` takes
    the agent's and the partner's strategies, in that order.
    """

    agent: int
    evaluator: Callable[..., np.ndarray]
    weight: float = 1.0
    other: int | None = None
    name: str = "term"

    @property
    def is_pairwise(self) -> bool:
        return self.other is not None

    def __call__(self, own, partner=None) -> np.ndarray:
        if self.is_pairwise:
            return self.weight * np.asarray(self.evaluator(own, partner), dtype=float)
        return self.weight * np.asarray(self.evaluator(own), dtype=float)


@dataclass(frozen=True, eq=False)
class StructuredGame:
    """An N-player game whose costs are sums of self and pairwise terms."""

    spaces: tuple
    terms: tuple
    state: Any = None
    horizon: int = 1
    dt: float = 0.5
    t: float = 0.0

    def __post_init__(self):
        spaces = tuple(self.spaces)
        terms = tuple(tuple(ts) for ts in self.terms)
        object.__setattr__(self, "spaces", spaces)
        object.__setattr__(self, "terms", terms)
        n = len(spaces)
        if n < 1:
            raise ValueError("a game needs at least one agent")
        if len(terms) != n:
            raise ValueError("one term list per agent required")
        if len({s.is_finite for s in spaces}) != 1:
            raise ValueError("all strategy spaces must be of the same kind")
        for i, ts in enumerate(terms):
            for term in ts:
                if term.agent != i:
                    raise ValueError(f"term {term.name!r} filed under agent {i} but owned by {term.agent}")
                if term.is_pairwise:
                    j = term.other
                    if not (0 <= j < n) or j == i:
                        raise ValueError(f"term {term.name!r} of agent {i} has invalid partner {j}")
                    if not any(p.other == i and p.name == term.name for p in terms[j]):
                        raise ValueError(f"pairwise term {term.name!r} ({i},{j}) has no partner term in agent {j}")

    @property
    def n_agents(self) -> int:
        return len(self.spaces)

    @property
    def is_finite(self) -> bool:
        return self.spaces[0].is_finite

    def joint_size(self) -> int:
        if not self.is_finite:
            return math.inf
        return math.prod(s.size for s in self.spaces)

    def validate(self, profile: StrategyProfile) -> None:
        if len(profile) != self.n_agents:
            raise ValueError(f"profile has {len(profile)} strategies, game has {self.n_agents} agents")
        for i, (space, u) in enumerate(zip(self.spaces, profile.strategies)):
            if u.shape != (space.dim,):
                raise ValueError(f"agent {i}: strategy has shape {u.shape}, expected ({space.dim},)")
            if not space.contains(u):
                raise ValueError(f"agent {i}: strategy outside its strategy space")

    def neutral_profile(self) -> StrategyProfile:
        """Every agent's zero action, or its closest admissible strategy."""
        out = []
        for space in self.spaces:
            if space.is_finite:
                out.append(space.strategies[int(np.argmin(np.linalg.norm(space.strategies, axis=1)))])
            else:
                out.append(space.neutral)
        return StrategyProfile(tuple(out), self.t)

    def profile_from_indices(self, idx: Sequence[int]) -> StrategyProfile:
        return StrategyProfile(tuple(s.strategies[k] for s, k in zip(self.spaces, idx)), self.t)

    def cost_batch(self, agent: int, strategies: Sequence[np.ndarray]) -> np.ndarray:
        """Costs of ``agent`` for a batch of joint strategies, each (B, d_i)."""
        own = strategies[agent]
        total = np.zeros(len(own))
        for term in self.terms[agent]:
            total = total + (term(own, strategies[term.other]) if term.is_pairwise else term(own))
        return total

    # term tables for finite games: self -> (K_i,), pairwise -> (K_i, K_j)
    @cached_property
    def _tables(self) -> tuple:
        if not self.is_finite:
            raise ValueError("term tables exist only for finite games")
        out = []
        for i, ts in enumerate(self.terms):
            rows = []
            si = self.spaces[i].strategies
            for term in ts:
                if term.is_pairwise:
                    sj = self.spaces[term.other].strategies
                    a = np.repeat(si, len(sj), axis=0)
                    b = np.tile(sj, (len(si), 1))
                    rows.append(term(a, b).reshape(len(si), len(sj)))
                else:
                    rows.append(term(si))
            out.append(tuple(rows))
        return tuple(out)

    def term_table(self, agent: int, k: int) -> np.ndarray:
        return self._tables[agent][k]

    def cost_tensor(self, agent: int) -> np.ndarray:
        """Full cost array of ``agent`` indexed by every agent's strategy index."""
        total = np.zeros([s.size for s in self.spaces])
        for k, term in enumerate(self.terms[agent]):
            total = total + _broadcast_table(self, agent, term, self._tables[agent][k])
        return total


def _broadcast_table(game: StructuredGame, agent: int, term: CostTerm, table: np.ndarray) -> np.ndarray:
    """Reshape a term table so it broadcasts over the joint index grid."""
    sh = [1] * game.n_agents
    sh[agent] = game.spaces[agent].size
    if term.is_pairwise:
        sh[term.other] = game.spaces[term.other].size
        if term.other < agent:
            table = table.T
    return table.reshape(sh)


def evaluate_cost(game: StructuredGame, agent: int, profile: StrategyProfile) -> float:
    """Weighted sum of ``agent``'s self and pairwise terms at ``profile``."""
    if not 0 <= agent < game.n_agents:
        raise ValueError(f"no agent {agent}")
    if len(profile) != game.n_agents:
        raise ValueError(f"profile has {len(profile)} strategies, game has {game.n_agents} agents")
    for i, (space, u) in enumerate(zip(game.spaces, profile.strategies)):
        if u.shape != (space.dim,):
            raise ValueError(f"agent {i}: strategy has shape {u.shape}, expected ({space.dim},)")
    rows = [u.reshape(1, -1) for u in profile.strategies]
    return float(game.cost_batch(agent, rows)[0])


@dataclass(frozen=True, eq=False)
class PotentialFunction:
    """A scalar function of the joint strategy attached to ``game``.

    ``evaluator`` maps a list of per-agent strategy batches to B values.
    ``components`` lists the (weighted) terms it sums, when it was assembled
    from the game; finite games then get a fast tensor form.
    """

    game: StructuredGame
    evaluator: Callable[[Sequence[np.ndarray]], np.ndarray]
    components: tuple = ()

    def __call__(self, profile: StrategyProfile) -> float:
        return float(self.batch([u.reshape(1, -1) for u in profile.strategies])[0])

    def batch(self, strategies: Sequence[np.ndarray]) -> np.ndarray:
        return np.asarray(self.evaluator(strategies), dtype=float)

    def tensor(self, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
        """Values over the whole joint space of a finite game, by strategy index."""
        game = self.game
        size = game.joint_size()
        if size > cap:
            raise EnumerationCapError(f"joint space has {size} profiles, cap is {cap}")
        if self.components:
            total = np.zeros([s.size for s in game.spaces])
            for (i, k) in self.components:
                total = total + _broadcast_table(game, i, game.terms[i][k], game.term_table(i, k))
            return total
        return _evaluate_on_grid(game, self.batch)


def _joint_grid_chunks(game: StructuredGame, chunk: int = 200_000):
    sizes = [s.size for s in game.spaces]
    total = math.prod(sizes)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.unravel_index(flat, sizes)
        yield start, [s.strategies[k] for s, k in zip(game.spaces, idx)]


def _evaluate_on_grid(game: StructuredGame, fn) -> np.ndarray:
    out = np.empty(game.joint_size())
    for start, rows in _joint_grid_chunks(game):
        out[start:start + len(rows[0])] = fn(rows)
    return out.reshape([s.size for s in game.spaces])


def _partner_index(game: StructuredGame, i: int, term: CostTerm) -> int:
    for k, p in enumerate(game.terms[term.other]):
        if p.other == i and p.name == term.name:
            return k
    raise ValueError(f"pairwise term {term.name!r} ({i},{term.other}) has no partner")


def _check_pair_symmetry(game: StructuredGame, i: int, term: CostTerm, partner: CostTerm,
                         rng: np.random.Generator, samples: int, exhaustive: bool, tol: float) -> None:
    j = term.other
    si, sj = game.spaces[i], game.spaces[j]
    if exhaustive and si.is_finite:
        a = np.repeat(si.strategies, sj.size, axis=0)
        b = np.tile(sj.strategies, (si.size, 1))
    elif si.is_finite:
        a = si.strategies[rng.integers(si.size, size=samples)]
        b = sj.strategies[rng.integers(sj.size, size=samples)]
    else:
        a, b = si.sample(rng, samples), sj.sample(rng, samples)
    mine = term(a, b)
    theirs = partner(b, a)
    gap = np.abs(mine - theirs)
    scale = np.maximum(1.0, np.abs(mine))
    if np.any(gap > tol * scale):
        raise AsymmetricPairError(
            f"pairwise term {term.name!r} between agents {i} and {j} is not symmetric "
            f"(max gap {np.max(gap):.3g})")


def assemble_potential(game: StructuredGame, symmetry_samples: int = 64, exhaustive: bool = False,
                       seed: int = 0, check: bool = True, tol: float = EXACT_TOL) -> PotentialFunction:
    """Sum every self term once and every pairwise term once (owner index > partner).

    With ``check`` set, partner terms must carry equal weights and agree on
    ``symmetry_samples`` random strategy pairs (or all pairs of a finite game
    when ``exhaustive``); violations raise :class:`AsymmetricPairError`.
    """
    rng = np.random.default_rng(seed)
    components = []
    for i, ts in enumerate(game.terms):
        for k, term in enumerate(ts):
            if not term.is_pairwise:
                components.append((i, k))
                continue
            if check:
                partner = game.terms[term.other][_partner_index(game, i, term)]
                if not math.isclose(term.weight, partner.weight, rel_tol=0, abs_tol=0):
                    raise AsymmetricPairError(
                        f"pairwise term {term.name!r} between agents {i} and {term.other} has "
                        f"weights {term.weight} and {partner.weight}")
                if i > term.other:
                    _check_pair_symmetry(game, i, term, partner, rng, symmetry_samples, exhaustive, tol)
            if term.other < i:
                components.append((i, k))
    components = tuple(components)

    def evaluator(strategies):
        total = np.zeros(len(strategies[0]))
        for i, k in components:
            term = game.terms[i][k]
            own = strategies[i]
            total = total + (term(own, strategies[term.other]) if term.is_pairwise else term(own))
        return total

    return PotentialFunction(game, evaluator, components)


@dataclass(frozen=True)
class FinitePotentialReport:
    holds: bool
    worst_violation: float
    profiles_checked: int
    worst_agent: int | None = None


def verify_finite_potential(game: StructuredGame, potential: PotentialFunction,
                            cap: int = DEFAULT_ENUMERATION_CAP, tol: float = EXACT_TOL) -> FinitePotentialReport:
    """Exhaustively check that every unilateral deviation changes V_i and F equally.

    V_i - F must not depend on agent i's own strategy; the violation for agent i
    is the largest spread of V_i - F along i's axis over all opponent profiles.
    """
    if not game.is_finite:
        raise ValueError("exhaustive potential check needs finite strategy spaces")
    size = game.joint_size()
    if size > cap:
        raise EnumerationCapError(f"joint space has {size} profiles, cap is {cap}")
    f = _evaluate_on_grid(game, potential.batch)
    worst, worst_agent = 0.0, None
    for i in range(game.n_agents):
        diff = _evaluate_on_grid(game, lambda rows, i=i: game.cost_batch(i, rows)) - f
        spread = float(np.max(np.ptp(diff, axis=i))) if diff.shape[i] > 1 else 0.0
        if not math.isfinite(spread):
            spread = math.inf
        if spread > worst or worst_agent is None:
            worst, worst_agent = spread, i
    return FinitePotentialReport(worst <= tol, worst, size, worst_agent)


@dataclass(frozen=True)
class ContinuousPotentialReport:
    max_rel_grad_error: float
    samples_used: int
    samples_skipped: int
    holds: bool


def verify_continuous_potential(game: StructuredGame, potential: PotentialFunction, samples: int = 100,
                                h: float = 1e-4, seed: int = 0, tol: float = 1e-4) -> ContinuousPotentialReport:
    """Compare central-difference gradients of V_i and F in u_i at random interior points.

    The relative error of one component is |dV_i - dF| / max(1, |dV_i|).
    Samples where any evaluation is non-finite are skipped and counted.
    """
    if game.is_finite:
        raise ValueError("gradient check needs continuous strategy spaces")
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    n = game.n_agents
    points = []
    for space in game.spaces:
        lo = space.lower + np.minimum(h, 0.5 * (space.upper - space.lower))
        hi = space.upper - np.minimum(h, 0.5 * (space.upper - space.lower))
        points.append(lo + (hi - lo) * rng.random((samples, space.dim)))

    err = np.zeros(samples)
    bad = np.zeros(samples, dtype=bool)
    for i in range(n):
        for c in range(game.spaces[i].dim):
            plus = [p.copy() for p in points]
            minus = [p.copy() for p in points]
            plus[i][:, c] += h
            minus[i][:, c] -= h
            # inf - inf marks a sample to skip, so the NaN is expected
            with np.errstate(invalid="ignore"):
                dv = (game.cost_batch(i, plus) - game.cost_batch(i, minus)) / (2 * h)
                df = (potential.batch(plus) - potential.batch(minus)) / (2 * h)
            finite = np.isfinite(dv) & np.isfinite(df)
            bad |= ~finite
            rel = np.where(finite, np.abs(dv - df) / np.maximum(1.0, np.abs(dv)), 0.0)
            err = np.maximum(err, rel)
    used = int(np.sum(~bad))
    if used == 0:
        raise ValueError(f"all {samples} samples hit non-finite costs; cannot check gradients")
    worst = float(np.max(err[~bad]))
    return ContinuousPotentialReport(worst, used, int(np.sum(bad)), worst <= tol)
