import itertools

import numpy as np
import pytest

from edm.errors import DataError
from edm.example_gen import Dataset, ValueRange, generate_covering_set, split_dataset
from edm.genetic_opt import (
    GAConfig,
    Genome,
    fitness,
    genome_seed,
    optimize_inputs,
    train_genome,
)
from edm.neural_net import TrainConfig, train
from edm.rule_model import parse_ladder

NOISY = parse_ladder("variables: X, N\nclasses: 2\nrule R: X >= 0 ? class 1 : class 2\n")
FAST = TrainConfig(max_epochs=300, patience=40, seed=3)


@pytest.fixture(scope="module")
def noisy_split():
    ds = generate_covering_set(NOISY, [ValueRange("X", -1, 1), ValueRange("N", 0, 10)], k=4, seed=1, min_records=60)
    return split_dataset(ds, seed=2)


def _masks(n):
    return [Genome(bits) for bits in itertools.product((False, True), repeat=n) if any(bits)]


def _table_fitness(n, seed):
    """A random but fixed fitness per mask, for GA-only tests."""
    rng = np.random.default_rng(seed)
    table = {g.bits: float(v) for g, v in zip(_masks(n), -rng.random(2**n - 1))}
    return table, lambda g: table[g.bits]


class TestGenome:
    def test_zero_mask_rejected(self):
        with pytest.raises(DataError):
            Genome((False, False))
        with pytest.raises(DataError):
            Genome.from_bits("0x1")

    def test_bits_and_select(self):
        g = Genome.from_bits("101")
        assert g.bits == "101"
        assert g.select(("a", "b", "c")) == ("a", "c")
        with pytest.raises(DataError):
            g.select(("a", "b"))


class TestFitness:
    def test_all_ones_is_identity_restriction(self, noisy_split):
        g = Genome.all_ones(2)
        direct = train(noisy_split.train, noisy_split.test, FAST.with_seed(genome_seed(FAST.seed, g)))
        assert fitness(g, noisy_split, FAST) == -direct.test_mse

    def test_noise_only_is_worse(self, noisy_split):
        assert fitness(Genome.from_bits("01"), noisy_split, FAST) < fitness(Genome.all_ones(2), noisy_split, FAST)

    def test_repeatable(self, noisy_split):
        g = Genome.from_bits("10")
        assert fitness(g, noisy_split, FAST) == fitness(g, noisy_split, FAST)

    def test_restricted_network_inputs(self, noisy_split):
        assert train_genome(Genome.from_bits("10"), noisy_split, FAST).network.variables == ("X",)

    def test_seed_depends_on_mask(self):
        assert genome_seed(1, Genome.from_bits("10")) != genome_seed(1, Genome.from_bits("01"))
        assert genome_seed(1, Genome.from_bits("10")) == genome_seed(1, Genome.from_bits("10"))


class TestOptimize:
    def test_n2_matches_brute_force(self, noisy_split):
        brute = max(fitness(g, noisy_split, FAST) for g in _masks(2))
        hits = 0
        for seed in range(10):
            rep = optimize_inputs(noisy_split, GAConfig(population_size=4, generations=10, seed=seed), FAST)
            hits += rep.best_fitness == brute
        assert hits >= 9

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_small_n_oracle(self, noisy_split, n):
        hits = 0
        for seed in range(10):
            table, fn = _table_fitness(n, 100 + seed)
            split = _fake_split(noisy_split, n)
            rep = optimize_inputs(split, GAConfig(seed=seed), FAST, fitness_fn=fn)
            hits += rep.best_fitness == max(table.values())
        assert hits >= 9

    @pytest.mark.parametrize("seed", range(10))
    def test_best_non_decreasing(self, noisy_split, seed):
        _, fn = _table_fitness(4, seed)
        rep = optimize_inputs(_fake_split(noisy_split, 4), GAConfig(seed=seed, generations=15), FAST, fitness_fn=fn)
        assert all(b >= a for a, b in zip(rep.best_history, rep.best_history[1:]))
        assert rep.best_fitness == rep.best_history[-1]

    def test_no_variation_keeps_initial(self, noisy_split):
        init = [Genome.from_bits("10")] * 6
        calls = []

        def fn(g):
            calls.append(g.bits)
            return 0.0

        ga = GAConfig(population_size=6, generations=5, crossover_rate=0.0, mutation_rate=0.0, seed=1)
        rep = optimize_inputs(noisy_split, ga, FAST, initial=init, fitness_fn=fn)
        assert rep.best.bits == "10"
        assert set(rep.best_masks) == {"10"}
        assert calls == ["10"]

    def test_memoized(self, noisy_split):
        seen = []

        def pure(bits):
            return -bits.count("0") + 0.1 * bits.index("1")

        def fn(g):
            assert g.bits not in seen
            assert any(g.mask)
            seen.append(g.bits)
            return pure(g.bits)

        rep = optimize_inputs(_fake_split(noisy_split, 4), GAConfig(population_size=8, generations=8, seed=5), FAST,
                              fitness_fn=fn)
        assert set(rep.fitness_cache) == set(seen)
        assert all(rep.fitness_cache[b] == pure(b) for b in seen)

    def test_deterministic_and_report(self, noisy_split):
        ga = GAConfig(population_size=4, generations=3, seed=7)
        a = optimize_inputs(noisy_split, ga, FAST)
        b = optimize_inputs(noisy_split, ga, FAST)
        assert a.to_csv() == b.to_csv()
        lines = a.to_csv().splitlines()
        assert lines[0] == "generation,best_fitness,mean_fitness,best_mask"
        assert len(lines) == 4 and lines[1].startswith("0,")

    def test_parallel_matches_sequential(self, noisy_split):
        seq = optimize_inputs(noisy_split, GAConfig(population_size=4, generations=3, seed=7), FAST)
        par = optimize_inputs(noisy_split, GAConfig(population_size=4, generations=3, seed=7, workers=2), FAST)
        assert seq.to_csv() == par.to_csv()
        assert seq.fitness_cache == par.fitness_cache

    def test_blind_untouched(self, noisy_split):
        # any access to the blind part would raise on None
        poisoned = type(noisy_split)(noisy_split.train, noisy_split.test, None)
        rep = optimize_inputs(poisoned, GAConfig(population_size=4, generations=2, seed=0), FAST)
        assert rep.best is not None

    def test_config_validation(self):
        for bad in (dict(population_size=1), dict(elitism_count=12), dict(tournament_size=20),
                    dict(crossover_rate=1.5), dict(mutation_rate=-0.1), dict(generations=0)):
            with pytest.raises(DataError):
                GAConfig(**bad)


def _fake_split(split, n):
    """A split whose ladder has n variables; only the variable count matters with a fitness_fn."""
    names = ", ".join(f"V{i}" for i in range(n))
    ladder = parse_ladder(f"variables: {names}\nclasses: 2\nrule R: V0 >= 0 ? class 1 : class 2\n")
    return type(split)(Dataset(ladder, [], "train"), Dataset(ladder, [], "test"), Dataset(ladder, [], "blind"))
