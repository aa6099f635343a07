"""Genetic search over input-variable subsets.

A genome is a bit mask over the ladder's variables. Its fitness is the
negated best test-set MSE of a network trained on just those inputs, with a
training seed derived from the mask, so fitness is a pure function of the
mask and can be memoized or computed in worker processes. The blind split
is never touched here.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError
from .example_gen import SplitDataset
from .neural_net import TrainConfig, TrainReport, train
from .seeding import derive_seed


@dataclass(frozen=True)
class Genome:
    mask: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(bool(b) for b in self.mask))
        if not any(self.mask):
            raise DataError("genome must select at least one variable")

    @classmethod
    def from_bits(cls, bits: str) -> "Genome":
        if not bits or set(bits) - {"0", "1"}:
            raise DataError(f"mask must be a 0/1 string, got {bits!r}")
        return cls(tuple(c == "1" for c in bits))

    @classmethod
    def all_ones(cls, n: int) -> "Genome":
        return cls((True,) * n)

    @property
    def bits(self) -> str:
        return "".join("1" if b else "0" for b in self.mask)

    def select(self, variables: Sequence[str]) -> tuple[str, ...]:
        if len(variables) != len(self.mask):
            raise DataError(f"mask has {len(self.mask)} bits for {len(variables)} variables")
        return tuple(v for v, keep in zip(variables, self.mask) if keep)


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 12
    generations: int = 10
    tournament_size: int = 2
    crossover_rate: float = 0.9
    mutation_rate: Optional[float] = None  # None means 1/n per bit
    elitism_count: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population_size < 2:
            raise DataError("population_size must be at least 2")
        if self.generations < 1:
            raise DataError("generations must be at least 1")
        if not 0 <= self.elitism_count < self.population_size:
            raise DataError("elitism_count must be in [0, population_size)")
        if not 1 <= self.tournament_size <= self.population_size:
            raise DataError("tournament_size must be in [1, population_size]")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise DataError(f"{name} must be in [0, 1]")
        if self.workers < 1:
            raise DataError("workers must be positive")


@dataclass
class GAReport:
    best: Genome
    best_fitness: float
    best_history: list[float]
    mean_history: list[float]
    best_masks: list[str]
    fitness_cache: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["generation", "best_fitness", "mean_fitness", "best_mask"])
        for g, (b, m, mask) in enumerate(zip(self.best_history, self.mean_history, self.best_masks)):
            w.writerow([g, repr(b), repr(m), mask])
        return out.getvalue()


def genome_seed(nn_seed: int, genome: Genome) -> int:
    return derive_seed(nn_seed, "genome", genome.bits)


def train_genome(genome: Genome, split: SplitDataset, nn_cfg: TrainConfig) -> TrainReport:
    """Train on the genome's variables with the mask-derived seed."""
    names = genome.select(split.train.variables)
    return train(split.train, split.test, nn_cfg.with_seed(genome_seed(nn_cfg.seed, genome)), variables=names)


def fitness(genome: Genome, split: SplitDataset, nn_cfg: TrainConfig) -> float:
    return -train_genome(genome, split, nn_cfg).test_mse


def _repair(bits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if not bits.any():
        bits[int(rng.integers(len(bits)))] = True
    return bits


def _tournament(fits: Sequence[float], size: int, rng: np.random.Generator) -> int:
    entrants = rng.choice(len(fits), size=size, replace=False)
    # ties go to the lowest population index, for reproducibility
    return int(min(entrants, key=lambda i: (-fits[i], i)))


FitnessFn = Callable[[Genome], float]


def optimize_inputs(
    split: SplitDataset,
    ga: GAConfig = GAConfig(),
    nn_cfg: TrainConfig = TrainConfig(),
    initial: Sequence[Genome] | None = None,
    fitness_fn: FitnessFn | None = None,
) -> GAReport:
    """Evolve input masks; higher fitness is better.

    Each generation is evaluated, then the next one is built from
    ``elitism_count`` carried-over elites plus children made by tournament
    selection, uniform crossover and per-bit mutation. Masks are evaluated
    at most once. ``fitness_fn`` replaces network training (for tests);
    with ``ga.workers > 1`` training runs in a process pool, which does not
    change any result.
    """
    n = len(split.train.variables)
    if n < 1:
        raise DataError("no input variables to select from")
    rng = np.random.default_rng(ga.seed)
    mutation_rate = 1.0 / n if ga.mutation_rate is None else ga.mutation_rate

    if initial is not None:
        pop = [Genome(g.mask) for g in initial]
        if len(pop) != ga.population_size or any(len(g.mask) != n for g in pop):
            raise DataError("initial population does not match population_size / variable count")
    else:
        pop = [Genome(tuple(_repair(rng.random(n) < 0.5, rng))) for _ in range(ga.population_size)]

    cache: dict[str, float] = {}
    best_hist, mean_hist, best_masks = [], [], []
    best_genome, best_fit = None, -np.inf

    pool = ProcessPoolExecutor(ga.workers) if ga.workers > 1 and fitness_fn is None else None
    try:
        for gen in range(ga.generations):
            todo = sorted({g.bits for g in pop} - cache.keys())
            if fitness_fn is not None:
                values = [fitness_fn(Genome.from_bits(b)) for b in todo]
            elif pool is not None:
                values = list(pool.map(fitness, [Genome.from_bits(b) for b in todo], [split] * len(todo), [nn_cfg] * len(todo)))
            else:
                values = [fitness(Genome.from_bits(b), split, nn_cfg) for b in todo]
            cache.update(zip(todo, values))

            fits = [cache[g.bits] for g in pop]
            order = sorted(range(len(pop)), key=lambda i: (-fits[i], pop[i].bits))
            top = order[0]
            best_hist.append(fits[top])
            mean_hist.append(float(np.mean(fits)))
            best_masks.append(pop[top].bits)
            if fits[top] > best_fit:
                best_fit, best_genome = fits[top], pop[top]

            if gen == ga.generations - 1:
                break
            nxt = [pop[i] for i in order[: ga.elitism_count]]
            while len(nxt) < ga.population_size:
                a = np.array(pop[_tournament(fits, ga.tournament_size, rng)].mask)
                b = np.array(pop[_tournament(fits, ga.tournament_size, rng)].mask)
                if rng.random() < ga.crossover_rate:
                    child = np.where(rng.random(n) < 0.5, a, b)
                else:
                    child = a.copy()
                flips = rng.random(n) < mutation_rate
                child = _repair(child ^ flips, rng)
                nxt.append(Genome(tuple(child)))
            pop = nxt
    finally:
        if pool is not None:
            pool.shutdown()

    return GAReport(best_genome, best_fit, best_hist, mean_hist, best_masks, cache)
