"""FLOP-constrained evolutionary search over per-slot group counts.

Each iteration keeps the top-K candidates, breeds ``num_crossover`` children
by uniform crossover, mutates those children into ``num_mutation`` more,
and replaces the population with children and mutants. The best candidate
seen at any point is returned.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from groupbnn.architecture import ConfigurationError, NetworkConfig, flops, slot_choices

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

Genome = tuple[int, ...]

log = logging.getLogger(__name__)


class InfeasibleBudgetError(ConfigurationError):
    pass


@dataclass
class SearchConfig:
    population_size: int = 50
    top_k: int = 10
    num_crossover: int = 25
    num_mutation: int = 25
    max_iterations: int = 20
    flop_budget: float = math.inf
    mutation_prob: float = 0.1
    max_retries: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.num_crossover + self.num_mutation != self.population_size:
            raise ConfigurationError(
                f"num_crossover + num_mutation ({self.num_crossover} + {self.num_mutation}) "
                f"must equal population_size ({self.population_size})"
            )
        if not 2 <= self.top_k <= self.population_size:
            raise ConfigurationError("top_k must lie in [2, population_size]")
        if not 0 <= self.mutation_prob <= 1:
            raise ConfigurationError("mutation_prob must lie in [0, 1]")
        if self.max_iterations < 0 or self.max_retries < 1:
            raise ConfigurationError("max_iterations must be >= 0 and max_retries >= 1")


@dataclass
class Candidate:
    genome: Genome
    flops: float
    fitness: float | None = None

    def rank_key(self):
        # higher fitness, then fewer FLOPs, then lexicographic genome
        return (-self.fitness, self.flops, self.genome)


class SearchSpace:
    """Per-slot choices, a FLOP function and the budget every genome must meet."""

    def __init__(self, choices: Sequence[Sequence[int]], flops_fn: Callable[[Genome], float],
                 budget: float = math.inf):
        self.choices = [sorted(int(c) for c in slot) for slot in choices]
        if not self.choices or any(not c for c in self.choices):
            raise ConfigurationError("every slot needs at least one choice")
        self.flops_fn = flops_fn
        self.budget = float(budget)
        self._flops_cache: dict[Genome, float] = {}

    @classmethod
    def for_network(cls, config: NetworkConfig, budget: float = math.inf) -> "SearchSpace":
        return cls(slot_choices(config), lambda g: flops(config, g), budget)

    def __len__(self):
        return len(self.choices)

    def flops(self, genome: Genome) -> float:
        genome = tuple(genome)
        if genome not in self._flops_cache:
            self._flops_cache[genome] = float(self.flops_fn(genome))
        return self._flops_cache[genome]

    def feasible(self, genome: Genome) -> bool:
        return self.flops(genome) <= self.budget

    def cheapest(self) -> Genome:
        """Largest group count in every slot: the lowest-FLOP genome."""
        return tuple(c[-1] for c in self.choices)

    def check_budget(self):
        floor = self.flops(self.cheapest())
        if floor > self.budget:
            raise InfeasibleBudgetError(
                f"FLOP budget {self.budget:.6g} is below the cheapest genome ({floor:.6g})"
            )

    def validate(self, genome) -> Genome:
        genome = tuple(int(g) for g in genome)
        if len(genome) != len(self.choices):
            raise ConfigurationError(f"genome has {len(genome)} slots, space has {len(self.choices)}")
        for i, (g, c) in enumerate(zip(genome, self.choices)):
            if g not in c:
                raise ConfigurationError(f"slot {i}: {g} is not one of {c}")
        return genome

    def candidate(self, genome) -> Candidate:
        genome = self.validate(genome)
        cost = self.flops(genome)
        if cost > self.budget:
            raise InfeasibleBudgetError(f"genome {genome} needs {cost:.6g} FLOPs > budget {self.budget:.6g}")
        return Candidate(genome, cost)

    def random_genome(self, rng: np.random.Generator) -> Genome:
        return tuple(c[rng.integers(len(c))] for c in self.choices)

    def repair(self, genome: Genome, rng: np.random.Generator) -> Genome:
        """Raise random slots to their next larger choice until the budget is met."""
        genome = list(genome)
        while not self.feasible(tuple(genome)):
            open_slots = [i for i, g in enumerate(genome) if g != self.choices[i][-1]]
            i = open_slots[rng.integers(len(open_slots))]
            c = self.choices[i]
            genome[i] = c[c.index(genome[i]) + 1]
        return tuple(genome)


def sample_candidates(space: SearchSpace, cfg: SearchConfig, rng: np.random.Generator,
                      max_rejections: int = 1000, distinct_tries: int = 20) -> list[Candidate]:
    """Uniform feasible genomes by rejection sampling, distinct where possible.

    If rejection keeps failing (a very tight budget) the last draw is
    repaired by raising group counts, which always terminates at the
    cheapest genome.
    """
    space.check_budget()
    seen: set[Genome] = set()
    out = []
    for _ in range(cfg.population_size):
        genome = None
        for _ in range(distinct_tries):
            for _ in range(max_rejections):
                genome = space.random_genome(rng)
                if space.feasible(genome):
                    break
            else:
                genome = space.repair(genome, rng)
            if genome not in seen:
                break
        seen.add(genome)
        out.append(space.candidate(genome))
    return out


def select_topk(pop: Sequence[Candidate], k: int) -> list[Candidate]:
    if k > len(pop):
        raise ValueError(f"cannot select {k} from a population of {len(pop)}")
    if any(c.fitness is None for c in pop):
        raise ValueError("all candidates must be evaluated before selection")
    return sorted(pop, key=Candidate.rank_key)[:k]


def crossover(parents: Sequence[Candidate], n: int, space: SearchSpace, rng: np.random.Generator,
              max_retries: int = 100) -> list[Genome]:
    """Uniform crossover of random parent pairs; over-budget children are redrawn."""
    if len(parents) < 2:
        raise ValueError("crossover needs at least two parents")
    children = []
    for _ in range(n):
        i, j = rng.choice(len(parents), size=2, replace=False)
        a, b = parents[i], parents[j]
        child = None
        for _ in range(max_retries):
            pick_a = rng.random(len(a.genome)) < 0.5
            trial = tuple(int(x) if m else int(y) for x, y, m in zip(a.genome, b.genome, pick_a))
            if space.feasible(trial):
                child = trial
                break
        if child is None:
            fitter = min((a, b), key=lambda c: c.rank_key() if c.fitness is not None
                         else (math.inf, c.flops, c.genome))
            child = fitter.genome
        children.append(child)
    return children


def mutation(genomes: Sequence[Genome], n: int, space: SearchSpace, rng: np.random.Generator,
             prob: float = 0.1, max_retries: int = 100) -> list[Genome]:
    """Copy a random input genome and redraw each slot with probability ``prob``."""
    if not genomes:
        raise ValueError("mutation needs at least one input genome")
    out = []
    for _ in range(n):
        src = tuple(genomes[rng.integers(len(genomes))])
        child = src
        for _ in range(max_retries):
            redraw = rng.random(len(src)) < prob
            trial = tuple(
                int(c[rng.integers(len(c))]) if r else g
                for g, c, r in zip(src, space.choices, redraw)
            )
            if space.feasible(trial):
                child = trial
                break
        out.append(child)
    return out


@dataclass
class IterationRecord:
    iteration: int
    best_fitness: float
    mean_fitness: float
    best_genome: Genome
    best_flops: float


@dataclass
class SearchResult:
    best: Candidate
    history: list[IterationRecord]
    evaluated: dict[Genome, float] = field(default_factory=dict)


def evolve(space: SearchSpace, cfg: SearchConfig, fitness_fn: Callable[[Genome], float],
           workers: int = 1) -> SearchResult:
    """Run the search; iteration 0 is the evaluated initial sample.

    Fitness is assumed deterministic per genome, so repeated genomes are
    scored once. ``workers > 1`` evaluates new genomes on a thread pool;
    results do not depend on the worker count.
    """
    rng = np.random.default_rng(cfg.seed)
    space.check_budget()
    cache: dict[Genome, float] = {}

    def evaluate(pop):
        pending = list(dict.fromkeys(c.genome for c in pop if c.genome not in cache))
        for g in pending:
            assert space.feasible(g), f"genome {g} exceeds the budget"
        if workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                scores = list(ex.map(fitness_fn, pending))
        else:
            scores = [fitness_fn(g) for g in pending]
        cache.update((g, float(s)) for g, s in zip(pending, scores))
        for c in pop:
            c.fitness = cache[c.genome]

    pop = sample_candidates(space, cfg, rng)
    evaluate(pop)
    best = select_topk(pop, 1)[0]
    history = [IterationRecord(0, best.fitness, float(np.mean([c.fitness for c in pop])),
                               best.genome, best.flops)]
    for it in range(1, cfg.max_iterations + 1):
        distinct = list({c.genome: c for c in pop}.values())
        top = select_topk(distinct, min(cfg.top_k, len(distinct))) if len(distinct) >= 2 \
            else select_topk(pop, cfg.top_k)
        children = crossover(top, cfg.num_crossover, space, rng, cfg.max_retries)
        mutants = mutation(children, cfg.num_mutation, space, rng, cfg.mutation_prob,
                           cfg.max_retries)
        pop = [space.candidate(g) for g in children + mutants]
        evaluate(pop)
        leader = select_topk(pop, 1)[0]
        if leader.rank_key() < best.rank_key():
            best = leader
        history.append(IterationRecord(it, best.fitness, float(np.mean([c.fitness for c in pop])),
                                       best.genome, best.flops))
        log.info("search iteration %d: best %.4f mean %.4f (%d genomes scored)", it, best.fitness,
                 history[-1].mean_fitness, len(cache))
    return SearchResult(best, history, cache)


# --- files ---------------------------------------------------------------------------------

HISTORY_FIELDS = ("iteration", "best_fitness", "mean_fitness", "best_genome", "best_flops")


def write_history_csv(path, history: Sequence[IterationRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([rec.iteration, repr(rec.best_fitness), repr(rec.mean_fitness),
                             "-".join(map(str, rec.best_genome)), repr(rec.best_flops)])


def read_history_csv(path) -> list[IterationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [IterationRecord(int(r["iteration"]), float(r["best_fitness"]), float(r["mean_fitness"]),
                            tuple(int(g) for g in r["best_genome"].split("-")),
                            float(r["best_flops"])) for r in rows]


def write_genome(path, genome: Genome, *, flops: float | None = None,
                 fitness: float | None = None):
    """TOML file with a ``[groups]`` table mapping slot index to group count."""
    lines = ["# group count per searchable slot"]
    if flops is not None:
        lines.append(f"flops = {float(flops)!r}")
    if fitness is not None:
        lines.append(f"fitness = {float(fitness)!r}")
    lines.append("")
    lines.append("[groups]")
    lines.extend(f"{i} = {int(g)}" for i, g in enumerate(genome))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_genome(path) -> Genome:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    unknown = set(doc) - {"groups", "flops", "fitness"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    table = doc.get("groups")
    if not isinstance(table, dict) or not table:
        raise ConfigurationError(f"{path}: missing [groups] table")
    try:
        items = sorted((int(k), int(v)) for k, v in table.items())
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: slot indices and group counts must be integers") from exc
    if [k for k, _ in items] != list(range(len(items))):
        raise ConfigurationError(f"{path}: slot indices must run 0..{len(items) - 1}")
    return tuple(v for _, v in items)
