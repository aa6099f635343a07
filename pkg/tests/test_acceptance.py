"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line, listed together in the terminal
summary. Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""

import itertools
import random
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from edm.cli import PipelineConfig, run_edm
from edm.errors import ClassMapError
from edm.example_gen import (
    LabeledRecord,
    ValueRange,
    coverage_report,
    generate_covering_set,
    parse_ranges,
    split_dataset,
)
from edm.formula_census import (
    EXCEL_CLASS_COUNTS,
    FormulaRecord,
    census,
    extract_function_calls,
    load_class_map,
    partial_excel_map,
    read_formulas_csv,
)
from edm.genetic_opt import GAConfig, Genome, fitness, optimize_inputs
from edm.neural_net import NormalizationParams, Network, TrainConfig, backprop_gradient, forward, init_network
from edm.rule_model import classify, credit_risk_ladder, parse_ladder

DATA = Path(__file__).parent / "data"
SEEDS = (42, 43, 44, 45, 46)


def _fixture_ranges():
    return parse_ranges(resources.files("edm").joinpath("data").joinpath("credit_risk_ranges.csv").read_text())


@pytest.fixture(scope="module")
def fixture_runs(tmp_path_factory):
    """Default pipeline on the fixture for each master seed, with wall time."""
    runs = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"run{seed}")
        t0 = time.perf_counter()
        run = run_edm(PipelineConfig(seed=seed, out=str(out)))
        runs[seed] = (run, time.perf_counter() - t0, out)
    return runs


def test_criterion_1_blind_replication(fixture_runs, verdict):
    misses = {s: r.summary.misclassifications for s, (r, _, _) in fixture_runs.items()}
    sizes = {len(r.split.blind) for r, _, _ in fixture_runs.values()}
    records = {len(r.dataset) for r, _, _ in fixture_runs.values()}
    slowest = max(t for _, t, _ in fixture_runs.values())
    zero = sum(m == 0 for m in misses.values())
    ok = (sizes == {25} and min(records) >= 125 and zero >= 4 and max(misses.values()) <= 1 and slowest < 60)
    verdict(1, ok, f"blind misclassifications per seed {misses} (need 0 in >=4/5, <=1 in all); "
                   f"blind size {sorted(sizes)}; slowest run {slowest:.1f}s")
    assert sizes == {25} and min(records) >= 125
    assert slowest < 60
    assert zero >= 4 and max(misses.values()) <= 1


def test_criterion_2_excluded(verdict):
    verdict(2, "EXCLUDED", "human-subject error-rate comparison needs study participants; covered by 1 and 3-8")
    pytest.skip("requires human participants")


def test_criterion_3_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, pairs = 0.0, 120
    for _ in range(pairs):
        sizes = (int(rng.integers(1, 7)), *map(int, rng.integers(1, 9, int(rng.integers(1, 3)))), 1)
        names = tuple(f"v{i}" for i in range(sizes[0]))
        norm = NormalizationParams(names, (0.0,) * sizes[0], (1.0,) * sizes[0], int(rng.integers(2, 5)))
        net = init_network(sizes, norm, 1.5, rng)
        rec = LabeledRecord({v: float(rng.random()) for v in names}, int(rng.integers(1, norm.num_classes + 1)), 0)
        g = backprop_gradient(net, rec).flat()
        fd = _central_differences(net, rec, 1e-5)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-7)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 5
    verdict(3, ok, f"max relative error {worst:.2e} over {pairs} pairs (need < 1e-4) in {elapsed:.2f}s (need < 5s)")
    assert worst < 1e-4 and elapsed < 5


def _central_differences(net, rec, h):
    flat = [np.array(a) for pair in zip(net.weights, net.biases) for a in pair]
    target = net.norm.target(rec.label)
    out = []
    for p in flat:
        for idx in np.ndindex(p.shape):
            old = p[idx]
            vals = []
            for v in (old + h, old - h):
                p[idx] = v
                n = Network(net.layer_sizes, flat[0::2], flat[1::2], net.norm)
                vals.append((forward(n, rec.values) - target) ** 2)
            p[idx] = old
            out.append((vals[0] - vals[1]) / (2 * h))
    return np.array(out)


def test_criterion_4_label_soundness(verdict):
    ladder, ranges = credit_risk_ladder(), _fixture_ranges()
    total = bad = 0
    seed = 0
    while total < 10_000:
        ds = generate_covering_set(ladder, ranges, k=4, seed=seed, min_records=500)
        total += len(ds)
        bad += sum(r.label != classify(ladder, r.values) for r in ds.records)
        seed += 1
    verdict(4, bad == 0, f"{total - bad}/{total} generated labels equal the oracle (need 100% over >= 10000)")
    assert bad == 0 and total >= 10_000


def test_criterion_5_coverage_floor(verdict):
    ladder, ranges = credit_risk_ladder(), _fixture_ranges()
    rep = coverage_report(generate_covering_set(ladder, ranges, k=4, seed=0), ladder)
    short = rep.below(4)
    counts = [(e.rule, e.condition_index, e.satisfy_count, e.violate_count) for e in rep.entries]
    ok = len(rep.entries) == 5 and not short
    verdict(5, ok, f"{len(rep.entries)} conditions, (rule, cond, satisfy, violate) = {counts}; below 4/4: {len(short)}")
    assert len(rep.entries) == 5 and not short


def test_criterion_6_ga_properties(verdict):
    # monotone best fitness, on real training over the fixture and on synthetic fitness tables
    ladder, ranges = credit_risk_ladder(), _fixture_ranges()
    split = split_dataset(generate_covering_set(ladder, ranges, k=4, seed=1, min_records=125), seed=1)
    quick = TrainConfig(max_epochs=200, patience=30, seed=2)
    histories = [optimize_inputs(split, GAConfig(population_size=6, generations=4, seed=s), quick).best_history
                 for s in range(3)]
    for s in range(20):
        rng = np.random.default_rng(s)
        table = {"".join(b): float(v) for b, v in zip(itertools.product("01", repeat=5), rng.normal(size=32))}
        fn = lambda g: table[g.bits]
        histories.append(optimize_inputs(_width_split(5), GAConfig(seed=s, generations=12), quick, fitness_fn=fn).best_history)
    monotone = all(all(b >= a for a, b in zip(h, h[1:])) for h in histories)

    # n = 2: GA best equals the exhaustive optimum over the three valid masks
    noisy = parse_ladder("variables: X, N\nclasses: 2\nrule R: X >= 0 ? class 1 : class 2\n")
    hits = 0
    for s in range(10):
        ds = generate_covering_set(noisy, [ValueRange("X", -1, 1), ValueRange("N", 0, 10)], k=4, seed=s, min_records=60)
        sp = split_dataset(ds, seed=s)
        cfg = TrainConfig(max_epochs=300, patience=40, seed=s)
        brute = max(fitness(Genome(m), sp, cfg) for m in ((True, False), (False, True), (True, True)))
        hits += optimize_inputs(sp, GAConfig(population_size=4, generations=10, seed=s), cfg).best_fitness == brute
    ok = monotone and hits >= 9
    verdict(6, ok, f"best-fitness non-decreasing in {len(histories)} runs: {monotone}; "
                   f"n=2 GA equals brute force in {hits}/10 seeds (need >= 9)")
    assert monotone and hits >= 9


def _width_split(n):
    from edm.example_gen import Dataset, SplitDataset

    names = ", ".join(f"V{i}" for i in range(n))
    lad = parse_ladder(f"variables: {names}\nclasses: 2\nrule R: V0 >= 0 ? class 1 : class 2\n")
    return SplitDataset(Dataset(lad, [], "train"), Dataset(lad, [], "test"), None)


def test_criterion_7_census(verdict):
    cmap = partial_excel_map()
    recs = read_formulas_csv((DATA / "census_corpus.csv").read_text())
    golden = census(recs, cmap).to_csv() == (DATA / "census_golden.csv").read_text()
    shape = len(recs) >= 20 and len({r.workbook_id for r in recs}) >= 5

    rng = random.Random(7)
    pieces = ["SUM(A1)", "if(B2,1,0)", "FOO(1)", '"MAX("', "'S (1)'!A1", "A1:B3", "Sheet2!C4", "1.5", 'TEXT(1,"(")']
    conserved = True
    for _ in range(300):
        corpus = [FormulaRecord(f"w{rng.randrange(8)}", "=" + "+".join(rng.choices(pieces, k=rng.randrange(1, 7))))
                  for _ in range(rng.randrange(1, 25))]
        rep = census(corpus, cmap)
        expected = sum(len(extract_function_calls(r.formula)) for r in corpus)
        conserved &= sum(rep.occurrences.values()) == rep.total_calls == expected

    full = {cls: [f"K{c}N{i}" for i in range(n)] for c, (cls, n) in enumerate(EXCEL_CLASS_COUNTS.items())}
    text = lambda m: "".join(f"{cls},{name}\n" for cls, names in m.items() for name in names)
    accepts = sum(load_class_map(text(full), strict=True).counts().values()) == 343
    rejects = 0
    perturbations = 0
    for cls in full:
        for change in ("drop", "add"):
            m = {k: list(v) for k, v in full.items()}
            m[cls] = m[cls][:-1] if change == "drop" else m[cls] + [f"EXTRA_{len(m[cls])}_{cls[:2]}"]
            perturbations += 1
            try:
                load_class_map(text(m), strict=True)
            except ClassMapError:
                rejects += 1
    ok = golden and shape and conserved and accepts and rejects == perturbations
    verdict(7, ok, f"golden corpus exact: {golden} ({len(recs)} formulas); conservation on 300 random corpora: "
                   f"{conserved}; strict accepts 343: {accepts}; rejects {rejects}/{perturbations} perturbations")
    assert ok


def test_criterion_8_determinism(fixture_runs, tmp_path, verdict):
    seed = SEEDS[0]
    _, _, first = fixture_runs[seed]
    again = tmp_path / "again"
    run_edm(PipelineConfig(seed=seed, out=str(again)))
    a = {p.name: p.read_bytes() for p in sorted(first.iterdir())}
    b = {p.name: p.read_bytes() for p in sorted(again.iterdir())}
    ok = a == b and len(a) >= 10
    verdict(8, ok, f"two run-edm runs with seed {seed}: {len(a)} artifacts, byte-identical: {a == b}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-rA"]))
