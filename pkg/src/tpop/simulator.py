"""Agent-based Monte-Carlo engine."""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import analytics
from .protocol import Verdict, build_tree, verify
from .types import Agent, Attributes, Environment, Position, ThetaParams

log = logging.getLogger(__name__)


class PopulationIndex:
    """A population snapshot with fixed-radius lookups at real and claimed positions.

    Dishonest agents are indexed twice: at their real position (where
    non-coerced observers see them) and at their claimed one (where coerced
    observers see them).
    """

    def __init__(
        self,
        real: np.ndarray,
        claimed: np.ndarray,
        honest: np.ndarray,
        coerced: np.ndarray,
        r: float,
    ):
        self.real = np.asarray(real, dtype=float)
        self.claimed = np.asarray(claimed, dtype=float)
        self.honest = np.asarray(honest, dtype=bool)
        self.coerced = np.asarray(coerced, dtype=bool)
        self.r = float(r)
        self._r2 = self.r * self.r
        self._honest_ids = np.flatnonzero(self.honest)
        self._dishonest_ids = np.flatnonzero(~self.honest)
        self._real_tree = cKDTree(self.real)
        self._honest_tree = cKDTree(self.real[self._honest_ids]) if len(self._honest_ids) else None
        self._fake_tree = (
            cKDTree(self.claimed[self._dishonest_ids]) if len(self._dishonest_ids) else None
        )
        self._cache: dict[tuple[int, bool], tuple[np.ndarray, np.ndarray]] = {}
        self._agents: Optional[list[Agent]] = None

    def __len__(self):
        return len(self.real)

    @property
    def agents(self) -> list[Agent]:
        if self._agents is None:
            self._agents = [self.agent(i) for i in range(len(self))]
        return self._agents

    def agent(self, i: int) -> Agent:
        return Agent(
            i,
            Attributes(bool(self.honest[i]), bool(self.coerced[i])),
            Position(*map(float, self.real[i])),
            Position(*map(float, self.claimed[i])),
        )

    @classmethod
    def from_agents(cls, agents: Sequence[Agent], r: float) -> "PopulationIndex":
        if [a.id for a in agents] != list(range(len(agents))):
            raise ValueError("agent ids must be 0..N-1 in order")
        pop = cls(
            [(a.real_position.x, a.real_position.y) for a in agents],
            [(a.claimed_position.x, a.claimed_position.y) for a in agents],
            [a.honest for a in agents],
            [a.coerced for a in agents],
            r,
        )
        pop._agents = list(agents)
        return pop

    def neighbours(self, agent_id: int, at_claimed: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Agents perceived by ``agent_id`` placed at its claimed (or real) position.

        Returns their ids and, per id, whether it is perceived at its claimed
        position. Non-coerced observers see everyone where they really are;
        coerced observers see dishonest agents where they claim to be.
        """
        key = (agent_id, at_claimed or bool(self.honest[agent_id]))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        centre = self.claimed[agent_id] if key[1] else self.real[agent_id]
        if not self.coerced[agent_id]:
            ids = np.asarray(self._real_tree.query_ball_point(centre, self.r), dtype=np.intp)
            flags = self.honest[ids]
        else:
            parts = []
            if self._honest_tree is not None:
                parts.append(self._honest_ids[self._honest_tree.query_ball_point(centre, self.r)])
            if self._fake_tree is not None:
                parts.append(self._dishonest_ids[self._fake_tree.query_ball_point(centre, self.r)])
            ids = np.concatenate(parts).astype(np.intp) if parts else np.empty(0, np.intp)
            ids.sort()
            flags = np.ones(len(ids), dtype=bool)
        keep = ids != agent_id
        out = (ids[keep], flags[keep])
        self._cache[key] = out
        return out

    def approves(
        self, child_id: int, child_at_claimed: bool, parent_id: int, parent_at_claimed: bool
    ) -> bool:
        """Whether a child attests to its parent.

        Attestations are about committed positions: both agents must be
        placed at their claimed positions, each must perceive the other there,
        and they must be within range of sight of each other.
        """
        honest, coerced = self.honest, self.coerced
        child_at_claimed = child_at_claimed or honest[child_id]
        parent_at_claimed = parent_at_claimed or honest[parent_id]
        if not (child_at_claimed and parent_at_claimed):
            return False
        if not (honest[parent_id] or coerced[child_id]):
            return False
        if not (honest[child_id] or coerced[parent_id]):
            return False
        d = self.claimed[child_id] - self.claimed[parent_id]
        return float(d[0] * d[0] + d[1] * d[1]) <= self._r2


def generate_population(
    env: Environment, p_h: float, p_c: float, rng: np.random.Generator
) -> PopulationIndex:
    """Uniformly scattered agents with independent honesty and coercion draws."""
    n = env.agent_count
    size = np.array([env.width, env.height])
    real = rng.random((n, 2)) * size
    honest = rng.random(n) < p_h
    coerced = rng.random(n) < p_c
    claimed = real.copy()
    liars = np.flatnonzero(~honest)
    claimed[liars] = rng.random((len(liars), 2)) * size
    same = liars[np.all(claimed[liars] == real[liars], axis=1)]
    while len(same):
        claimed[same] = rng.random((len(same), 2)) * size
        same = same[np.all(claimed[same] == real[same], axis=1)]
    return PopulationIndex(real, claimed, honest, coerced, env.range_of_sight)


def perceived_neighbours(
    observer: Agent | int, population: PopulationIndex, r: Optional[float] = None,
    at_claimed: bool = True,
) -> list[tuple[Agent, Position]]:
    """Agents ``observer`` sees from its claimed (or real) position, with where it sees them."""
    if r is not None and r != population.r:
        raise ValueError("population was indexed for a different range of sight")
    oid = observer.id if isinstance(observer, Agent) else int(observer)
    ids, flags = population.neighbours(oid, at_claimed)
    out = []
    for i, f in zip(ids, flags):
        a = population.agents[int(i)]
        out.append((a, a.claimed_position if f else a.real_position))
    return out


def run_prover(
    prover: Agent | int,
    population: PopulationIndex,
    theta: ThetaParams,
    rng: np.random.Generator,
) -> tuple[Verdict, int]:
    tree = build_tree(prover, population, theta, rng)
    verdict = verify(tree, theta)
    return verdict, verdict.surviving_edges


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, honest: bool, accepted: bool) -> None:
        if honest:
            if accepted:
                self.tp += 1
            else:
                self.fn += 1
        elif accepted:
            self.fp += 1
        else:
            self.tn += 1

    def __iadd__(self, other: "ConfusionCounts"):
        self.tp += other.tp
        self.tn += other.tn
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def runs(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    # Percentages are exact rationals; None when the class is absent.
    @property
    def tp_pct(self) -> Optional[Fraction]:
        n = self.tp + self.fn
        return Fraction(100 * self.tp, n) if n else None

    @property
    def fn_pct(self) -> Optional[Fraction]:
        n = self.tp + self.fn
        return Fraction(100 * self.fn, n) if n else None

    @property
    def tn_pct(self) -> Optional[Fraction]:
        n = self.tn + self.fp
        return Fraction(100 * self.tn, n) if n else None

    @property
    def fp_pct(self) -> Optional[Fraction]:
        n = self.tn + self.fp
        return Fraction(100 * self.fp, n) if n else None


SWEEP_COLUMNS = (
    "p_h", "p_c", "tp", "tn", "fp", "fn", "tp_pct", "tn_pct", "fp_pct", "fn_pct", "runs",
)


@dataclass
class SweepResult:
    p_h: np.ndarray
    p_c: np.ndarray
    counts: dict[tuple[int, int], ConfusionCounts]
    metadata: dict = field(default_factory=dict)

    def cell(self, p_h: float, p_c: float) -> ConfusionCounts:
        i = int(np.argmin(np.abs(self.p_h - p_h)))
        j = int(np.argmin(np.abs(self.p_c - p_c)))
        return self.counts[i, j]

    def rows(self) -> Iterable[dict]:
        for i, ph in enumerate(self.p_h):
            for j, pc in enumerate(self.p_c):
                c = self.counts[i, j]
                yield {
                    "p_h": float(ph),
                    "p_c": float(pc),
                    "tp": c.tp,
                    "tn": c.tn,
                    "fp": c.fp,
                    "fn": c.fn,
                    "tp_pct": c.tp_pct,
                    "tn_pct": c.tn_pct,
                    "fp_pct": c.fp_pct,
                    "fn_pct": c.fn_pct,
                    "runs": c.runs,
                }

    def percent_grid(self, metric: str) -> np.ndarray:
        out = np.full((len(self.p_h), len(self.p_c)), np.nan)
        for (i, j), c in self.counts.items():
            v = getattr(c, f"{metric}_pct")
            if v is not None:
                out[i, j] = float(v)
        return out

    @property
    def total_runs(self) -> int:
        return sum(c.runs for c in self.counts.values())


def cell_rng(seed: int, *indices: int) -> np.random.Generator:
    """Independent stream for one work unit, insensitive to scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, *indices]))


def _sweep_unit(args) -> tuple[int, int, int, int, int, int]:
    env, theta, p_h, p_c, seed, i, j, rep = args
    rng = cell_rng(seed, i, j, rep)
    pop = generate_population(env, p_h, p_c, rng)
    counts = ConfusionCounts()
    for a in range(len(pop)):
        tree = build_tree(a, pop, theta, rng)
        counts.add(bool(pop.honest[a]), verify(tree, theta).truthful)
    return i, j, counts.tp, counts.tn, counts.fp, counts.fn


def _map(fn, units: list, jobs: int):
    if jobs <= 1 or len(units) <= 1:
        return map(fn, units)
    pool = ProcessPoolExecutor(max_workers=jobs)
    chunk = max(1, len(units) // (jobs * 8))
    try:
        return list(pool.map(fn, units, chunksize=chunk))
    finally:
        pool.shutdown()


def default_jobs() -> int:
    import os

    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def sweep(
    env: Environment,
    theta: ThetaParams,
    grid_step: float = 0.1,
    runs_per_agent: int = 5,
    seed: int = 0,
    jobs: int = 1,
    p_h_values: Optional[Sequence[float]] = None,
    p_c_values: Optional[Sequence[float]] = None,
) -> SweepResult:
    """Run every agent as prover ``runs_per_agent`` times at each grid cell.

    A fresh population is drawn for every repetition.
    """
    grid = analytics.grid_values(grid_step)
    ph_values = np.asarray(p_h_values if p_h_values is not None else grid, dtype=float)
    pc_values = np.asarray(p_c_values if p_c_values is not None else grid, dtype=float)
    units = [
        (env, theta, float(ph), float(pc), seed, i, j, rep)
        for i, ph in enumerate(ph_values)
        for j, pc in enumerate(pc_values)
        for rep in range(runs_per_agent)
    ]
    log.info("sweep: %d work units, %d prover runs", len(units), len(units) * env.agent_count)
    counts = {
        (i, j): ConfusionCounts() for i in range(len(ph_values)) for j in range(len(pc_values))
    }
    for i, j, tp, tn, fp, fn in _map(_sweep_unit, units, jobs):
        counts[i, j] += ConfusionCounts(tp, tn, fp, fn)
    meta = {
        "environment": {
            "width": env.width,
            "height": env.height,
            "agents": env.agent_count,
            "r": env.range_of_sight,
        },
        "theta": str(theta),
        "grid_step": grid_step,
        "runs_per_agent": runs_per_agent,
        "seed": seed,
        "population": "regenerated per repetition",
    }
    return SweepResult(ph_values, pc_values, counts, meta)


@dataclass
class EdgeHistogram:
    counts: dict[int, int]

    @property
    def runs(self) -> int:
        return sum(self.counts.values())

    @property
    def mean(self) -> float:
        return sum(k * v for k, v in self.counts.items()) / self.runs


def _edge_unit(args) -> Counter:
    env, theta, p_h, p_c, seed, rep = args
    rng = cell_rng(seed, rep)
    pop = generate_population(env, p_h, p_c, rng)
    hist = Counter()
    for a in range(len(pop)):
        tree = build_tree(a, pop, theta, rng)
        hist[verify(tree, theta).confirmed_edges] += 1
    return hist


def edge_histogram(
    env: Environment,
    theta: ThetaParams,
    p_h: float,
    p_c: float,
    runs: int = 1,
    seed: int = 0,
    jobs: int = 1,
) -> EdgeHistogram:
    """Distribution of confirmed edges per tree; each run draws a population
    and lets every agent prove once."""
    units = [(env, theta, p_h, p_c, seed, rep) for rep in range(runs)]
    total = Counter()
    for h in _map(_edge_unit, units, jobs):
        total.update(h)
    return EdgeHistogram(dict(sorted(total.items())))


def _uniqueness_unit(args) -> int:
    theta, n_agents, r, trees, seed = args
    rng = cell_rng(seed, n_agents)
    pts = rng.random((n_agents, 2))
    kd = cKDTree(pts)
    cache: dict[int, np.ndarray] = {}

    def nbrs(i):
        hit = cache.get(i)
        if hit is None:
            hit = np.asarray(kd.query_ball_point(pts[i], r), dtype=np.intp)
            hit = hit[hit != i]
            cache[i] = hit
        return hit

    distinct = 0
    for _ in range(trees):
        nodes = [int(rng.integers(n_agents))]
        frontier = nodes[:]
        ok = True
        for w in theta.branching:
            nxt = []
            for p in frontier:
                cand = nbrs(p)
                if len(cand) == 0:
                    ok = False
                    break
                # with replacement, as in the uniqueness derivation
                nxt.extend(int(c) for c in cand[rng.integers(len(cand), size=w)])
            if not ok:
                break
            nodes.extend(nxt)
            frontier = nxt
        if ok and len(set(nodes)) == len(nodes):
            distinct += 1
    return distinct


def estimate_uniqueness(
    theta: ThetaParams, n_agents: int, r: float, trees: int = 10000, seed: int = 0
) -> float:
    """Fraction of random trees on the unit square made of distinct agents."""
    return _uniqueness_unit((theta, n_agents, r, trees, seed)) / trees


@dataclass
class UniquenessPoint:
    n_agents: int
    fraction_unique: float
    theory: float


def uniqueness_experiment(
    n_values: Sequence[int],
    r: float = 0.1,
    trees_per_n: int = 10000,
    seed: int = 0,
    jobs: int = 1,
    theta: Optional[ThetaParams] = None,
) -> list[UniquenessPoint]:
    """Empirical vs approximate probability that a random tree has distinct nodes."""
    theta = theta or ThetaParams(1.0, 2, (2, 2))
    units = [(theta, int(n), r, trees_per_n, seed) for n in n_values]
    out = []
    for n, hits in zip(n_values, _map(_uniqueness_unit, units, jobs)):
        k_mean = math.pi * n * r * r
        try:
            theory = analytics.uniqueness_probability(theta, k_mean, r)
        except analytics.UnsupportedShapeError:
            theory = math.nan
        out.append(UniquenessPoint(int(n), hits / trees_per_n, theory))
    return out
