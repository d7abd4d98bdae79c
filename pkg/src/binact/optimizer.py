"""Switch-vector search: exhaustive low-switch enumeration, a widespread
genetic algorithm, and a local refinement genetic algorithm.

All searches accept a batch cost (an object with ``evaluate(B)`` mapping a
(k, m) array of candidate switch vectors to k non-negative costs, or a bare
callable).  Lower cost is better.  Ties are broken toward fewer switching
actuators, then the lexicographically smallest vector, so every search is
deterministic given its seed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from binact.core import BudgetError, ContractError, split_rng

_FITNESS_DELTA = 1e-9
_EVAL_CHUNK = 65536


@dataclass(frozen=True)
class GAParams:
    """Genetic-algorithm tuning knobs.

    The crossover exchanges fixed-length bit segments between two parents,
    each bit position independently seeding a swap; mutation flips single
    bits; parents are drawn by roulette-wheel selection on inverse cost.
    """

    wide_population: int = 200
    wide_generations: int = 5
    local_population: int = 20
    local_generations: int = 50
    crossover_segment_bits: int = 5
    crossover_base_prob: float = 0.1
    mutation_prob: float = 0.025
    seed_min_switches: int = 4
    selection: str = "roulette-wheel"

    def __post_init__(self):
        for name in ("wide_population", "local_population"):
            if getattr(self, name) < 2:
                raise ContractError(f"{name} must be >= 2")
        for name in ("wide_generations", "local_generations"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        for name in ("crossover_base_prob", "mutation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must be in [0, 1]")
        if self.crossover_segment_bits < 1:
            raise ContractError("crossover_segment_bits must be >= 1")
        if self.seed_min_switches < 0:
            raise ContractError("seed_min_switches must be >= 0")
        if self.selection != "roulette-wheel":
            raise ContractError(f"unsupported selection {self.selection!r}")


@dataclass(frozen=True)
class SearchResult:
    best_b: np.ndarray
    best_cost: float
    evaluations: int
    source: str


def _evaluate(cost, B: np.ndarray) -> np.ndarray:
    fn = cost.evaluate if hasattr(cost, "evaluate") else cost
    out = np.asarray(fn(B), dtype=np.float64)
    if out.shape != (B.shape[0],):
        raise ContractError(f"cost returned shape {out.shape} for {B.shape[0]} candidates")
    return out


def _candidate_key(cost_value: float, b: np.ndarray) -> tuple:
    return (cost_value, int(b.sum()), tuple(int(v) for v in b))


def _best_of_batch(B: np.ndarray, costs: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimum-cost candidate with (s_n, lexicographic) tie-breaking."""
    best = float(np.min(costs))
    tied = np.flatnonzero(costs == best)
    if tied.size == 1:
        return best, B[tied[0]].copy()
    rows = B[tied]
    s_n = rows.sum(axis=1)
    rows = rows[s_n == s_n.min()]
    winner = min(tuple(int(v) for v in row) for row in rows)
    return best, np.array(winner, dtype=np.uint8)


def _allowed_indices(m: int, excluded) -> np.ndarray:
    excluded = frozenset(int(k) for k in excluded)
    for k in excluded:
        if not 0 <= k < m:
            raise ContractError(f"excluded actuator {k} out of range for m={m}")
    return np.array([k for k in range(m) if k not in excluded], dtype=int)


def exhaustive_low_switch(
    cost,
    m: int,
    max_switches: int = 3,
    excluded=(),
    eval_cap: int = 1_000_000,
) -> SearchResult:
    """Evaluate every switch vector with at most ``max_switches`` active bits.

    The candidate count is the binomial sum over 0..max_switches of the
    non-excluded actuators; exceeding ``eval_cap`` raises a budget error
    before any evaluation happens.
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    if max_switches > m:
        raise ContractError("max_switches cannot exceed m")
    allowed = _allowed_indices(m, excluded)
    depth = min(max_switches, allowed.size)
    total = sum(comb(allowed.size, j) for j in range(depth + 1))
    if total > eval_cap:
        raise BudgetError(
            f"exhaustive search needs {total} evaluations, above the cap {eval_cap}"
        )

    incumbent_key = None
    incumbent = (np.zeros(m, dtype=np.uint8), np.inf)
    evaluations = 0
    block = []
    for j in range(depth + 1):
        for combo in itertools.combinations(allowed.tolist(), j):
            row = np.zeros(m, dtype=np.uint8)
            row[list(combo)] = 1
            block.append(row)
            if len(block) == _EVAL_CHUNK:
                B = np.array(block)
                c, b = _best_of_batch(B, _evaluate(cost, B))
                evaluations += len(block)
                key = _candidate_key(c, b)
                if incumbent_key is None or key < incumbent_key:
                    incumbent_key, incumbent = key, (b, c)
                block = []
    if block:
        B = np.array(block)
        c, b = _best_of_batch(B, _evaluate(cost, B))
        evaluations += len(block)
        key = _candidate_key(c, b)
        if incumbent_key is None or key < incumbent_key:
            incumbent_key, incumbent = key, (b, c)
    return SearchResult(incumbent[0], incumbent[1], evaluations, "exhaustive")


def brute_force_search(cost, m: int, excluded=()) -> SearchResult:
    """Oracle: evaluate all 2^m candidates (over non-excluded actuators)."""
    allowed = _allowed_indices(m, excluded)
    if allowed.size > 24:
        raise BudgetError(f"brute force over {allowed.size} free actuators is not sensible")
    total = 1 << allowed.size
    incumbent_key = None
    incumbent = (np.zeros(m, dtype=np.uint8), np.inf)
    evaluations = 0
    for start in range(0, total, _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, total)
        codes = np.arange(start, stop, dtype=np.int64)
        bits = (codes[:, np.newaxis] >> np.arange(allowed.size)) & 1
        B = np.zeros((codes.size, m), dtype=np.uint8)
        B[:, allowed] = bits.astype(np.uint8)
        c, b = _best_of_batch(B, _evaluate(cost, B))
        evaluations += codes.size
        key = _candidate_key(c, b)
        if incumbent_key is None or key < incumbent_key:
            incumbent_key, incumbent = key, (b, c)
    return SearchResult(incumbent[0], incumbent[1], evaluations, "brute_force")


def _random_member(
    m: int, allowed: np.ndarray, s_min: int, rng: np.random.Generator
) -> np.ndarray:
    """Random seed vector with at least ``s_min`` switching actuators."""
    member = np.zeros(m, dtype=np.uint8)
    member[allowed] = rng.integers(0, 2, size=allowed.size, dtype=np.uint8)
    deficit = s_min - int(member.sum())
    if deficit > 0:
        zeros = allowed[member[allowed] == 0]
        member[rng.choice(zeros, size=deficit, replace=False)] = 1
    return member


def _crossover(
    a: np.ndarray, b: np.ndarray, params: GAParams, rng: np.random.Generator
) -> np.ndarray:
    """Segment-swap crossover: each bit seeds a fixed-length swap, clipped at
    the vector end; overlapping swaps apply left to right."""
    a = a.copy()
    b = b.copy()
    m = a.size
    bases = np.flatnonzero(rng.random(m) < params.crossover_base_prob)
    for i in bases:
        j = min(i + params.crossover_segment_bits, m)
        a[i:j], b[i:j] = b[i:j].copy(), a[i:j].copy()
    return a


def ga_search(
    cost,
    m: int,
    population: int,
    generations: int,
    params: GAParams,
    rng: np.random.Generator,
    excluded=(),
    injected=(),
    source: str = "wide_ga",
    progress: list | None = None,
) -> SearchResult:
    """Genetic search over switch vectors.

    Roulette-wheel selection on fitness 1/(cost + delta), segment crossover,
    per-bit mutation, elitism of one (the best-ever candidate survives every
    generation unchanged, so the best-ever cost is non-increasing).  When a
    list is passed as ``progress`` the best-ever cost is appended once per
    generation.
    """
    if population < 2:
        raise ContractError("population must be >= 2")
    if generations < 1:
        raise ContractError("generations must be >= 1")
    allowed = _allowed_indices(m, excluded)
    if allowed.size == 0:
        b0 = np.zeros(m, dtype=np.uint8)
        return SearchResult(b0, float(_evaluate(cost, b0[np.newaxis])[0]), 1, source)
    allowed_mask = np.zeros(m, dtype=bool)
    allowed_mask[allowed] = True
    s_min = min(params.seed_min_switches, allowed.size)

    pop = np.empty((population, m), dtype=np.uint8)
    seeded = 0
    for b in injected:
        if seeded == population:
            break
        b = np.asarray(b, dtype=np.uint8)
        if np.any(b[~allowed_mask]):
            raise ContractError("injected member uses an excluded actuator")
        pop[seeded] = b
        seeded += 1
    for i in range(seeded, population):
        pop[i] = _random_member(m, allowed, s_min, rng)

    best_key = None
    best = (np.zeros(m, dtype=np.uint8), np.inf)
    evaluations = 0
    for gen in range(generations):
        costs = _evaluate(cost, pop)
        evaluations += population
        c, b = _best_of_batch(pop, costs)
        key = _candidate_key(c, b)
        if best_key is None or key < best_key:
            best_key, best = key, (b, c)
        if progress is not None:
            progress.append(best[1])
        if gen == generations - 1:
            break
        fitness = 1.0 / (costs + _FITNESS_DELTA)
        probs = fitness / fitness.sum()
        nxt = np.empty_like(pop)
        nxt[0] = best[0]  # elitism of 1
        for i in range(1, population):
            pa, pb = rng.choice(population, size=2, p=probs)
            child = _crossover(pop[pa], pop[pb], params, rng)
            flips = (rng.random(m) < params.mutation_prob) & allowed_mask
            child ^= flips.astype(np.uint8)
            nxt[i] = child
        pop = nxt
    return SearchResult(best[0], best[1], evaluations, source)


def combined_search_detailed(
    cost,
    m: int,
    params: GAParams | None = None,
    rng: np.random.Generator | None = None,
    excluded=(),
    max_switches: int = 3,
    eval_cap: int = 1_000_000,
) -> tuple[SearchResult, dict[str, SearchResult]]:
    """Full pipeline with per-stage results (for benchmarking)."""
    if params is None:
        params = GAParams()
    if rng is None:
        rng = np.random.default_rng()
    rng_wide, rng_local = split_rng(rng, 2)

    exhaustive = exhaustive_low_switch(cost, m, max_switches, excluded, eval_cap)
    wide = ga_search(
        cost, m, params.wide_population, params.wide_generations, params,
        rng_wide, excluded, source="wide_ga",
    )
    local = ga_search(
        cost, m, params.local_population, params.local_generations, params,
        rng_local, excluded,
        injected=(exhaustive.best_b, wide.best_b),
        source="local_ga",
    )

    stages = {"exhaustive": exhaustive, "wide_ga": wide, "local_ga": local}
    winner = min(
        stages.values(),
        key=lambda r: _candidate_key(r.best_cost, r.best_b),
    )
    total = sum(r.evaluations for r in stages.values())
    result = SearchResult(winner.best_b.copy(), winner.best_cost, total, winner.source)
    return result, stages


def combined_search(
    cost,
    m: int,
    params: GAParams | None = None,
    rng: np.random.Generator | None = None,
    excluded=(),
    max_switches: int = 3,
    eval_cap: int = 1_000_000,
) -> SearchResult:
    """Exhaustive low-switch enumeration plus a widespread genetic algorithm,
    refined by a local genetic algorithm seeded with both winners.

    Never returns a result worse than the exhaustive stage (injection plus
    elitism keep the incumbent alive).
    """
    result, _ = combined_search_detailed(
        cost, m, params, rng, excluded, max_switches, eval_cap
    )
    return result
