"""Labeled example generation from a ladder, coverage accounting and splitting.

Generation is MC/DC-flavoured: for every rule and every condition of that
rule we want records that reach the rule with the condition true, and records
that reach it with the condition false while its sibling conditions hold, so
each condition is shown to flip the rule's outcome on its own.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError
from .rule_model import (
    Condition,
    DecisionLadder,
    Record,
    classify,
    eval_condition,
    format_number,
    read_records_csv,
    walk,
)

REJECTION_BUDGET = 10_000
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)

# Offsets from the threshold (in units of delta) that give each outcome.
_BOUNDARY_OFFSETS = {
    ("<=", True): (0, -1), ("<=", False): (1,),
    ("<", True): (-1,), ("<", False): (0, 1),
    (">=", True): (0, 1), (">=", False): (-1,),
    (">", True): (1,), (">", False): (0, -1),
    ("==", True): (0,), ("==", False): (1, -1),
    ("!=", True): (1, -1), ("!=", False): (0,),
}


@dataclass(frozen=True)
class ValueRange:
    variable: str
    low: float
    high: float
    integer_valued: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise DataError(f"range for {self.variable!r} must be finite")
        if not self.low < self.high:
            raise DataError(f"range for {self.variable!r} needs low < high")
        if self.integer_valued and math.ceil(self.low) > math.floor(self.high):
            raise DataError(f"integer range for {self.variable!r} contains no integer")

    @property
    def delta(self) -> float:
        d = max(1.0, 0.01 * (self.high - self.low))
        return float(round(d)) if self.integer_valued else d

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high and (not self.integer_valued or float(x).is_integer())

    def draw(self, rng: np.random.Generator) -> float:
        return self.draw_between(self.low, self.high, rng)

    def draw_between(self, lo: float, hi: float, rng: np.random.Generator) -> Optional[float]:
        lo, hi = max(lo, self.low), min(hi, self.high)
        if self.integer_valued:
            lo, hi = math.ceil(lo), math.floor(hi)
            if lo > hi:
                return None
            return float(rng.integers(lo, hi + 1))
        if lo > hi:
            return None
        return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class LabeledRecord:
    values: Mapping[str, float]
    label: int
    uid: int


@dataclass
class Dataset:
    """Ordered labeled records for one ladder.

    ``origin`` tags where the records came from (``full``, ``train``,
    ``test`` or ``blind``) so that blind data can be kept out of training.
    """

    ladder: DecisionLadder
    records: list[LabeledRecord]
    origin: str = "full"
    uncoverable: frozenset = frozenset()

    def __len__(self):
        return len(self.records)

    @property
    def variables(self) -> tuple[str, ...]:
        return self.ladder.variable_names

    def labels(self) -> list[int]:
        return [r.label for r in self.records]

    def matrix(self, variables: Sequence[str] | None = None) -> np.ndarray:
        names = self.variables if variables is None else variables
        return np.array([[r.values[v] for v in names] for r in self.records], dtype=float).reshape(
            len(self.records), len(names)
        )


@dataclass
class SplitDataset:
    train: Dataset
    test: Dataset
    blind: Dataset


@dataclass(frozen=True)
class CoverageEntry:
    rule: str
    condition_index: int
    satisfy_count: int
    violate_count: int
    uncoverable: bool


@dataclass
class CoverageReport:
    entries: list[CoverageEntry] = field(default_factory=list)

    def below(self, k: int) -> list[CoverageEntry]:
        return [e for e in self.entries if not e.uncoverable and (e.satisfy_count < k or e.violate_count < k)]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["rule", "condition_index", "satisfy_count", "violate_count", "uncoverable"])
        for e in self.entries:
            w.writerow([e.rule, e.condition_index, e.satisfy_count, e.violate_count, str(e.uncoverable).lower()])
        return out.getvalue()


# -- ranges -------------------------------------------------------------------


def parse_ranges(text: str) -> list[ValueRange]:
    """Read ``variable,low,high,integer`` rows (a header row is optional)."""
    out = []
    for rowno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or row[0].strip().startswith("#") or all(not c.strip() for c in row):
            continue
        cells = [c.strip() for c in row]
        if rowno == 1 and cells[0].lower() == "variable":
            continue
        if len(cells) not in (3, 4):
            raise DataError(f"ranges row {rowno}: expected variable,low,high,integer")
        try:
            low, high = float(cells[1]), float(cells[2])
        except ValueError:
            raise DataError(f"ranges row {rowno}: bounds must be numbers") from None
        flag = cells[3].lower() if len(cells) == 4 else "false"
        if flag not in ("true", "false", "1", "0", "yes", "no"):
            raise DataError(f"ranges row {rowno}: integer flag must be true/false")
        out.append(ValueRange(cells[0], low, high, flag in ("true", "1", "yes")))
    return out


def format_ranges(ranges: Iterable[ValueRange]) -> str:
    lines = ["variable,low,high,integer"]
    lines += [f"{r.variable},{format_number(r.low)},{format_number(r.high)},{str(r.integer_valued).lower()}" for r in ranges]
    return "\n".join(lines) + "\n"


def _range_map(ladder: DecisionLadder, ranges: Sequence[ValueRange]) -> dict[str, ValueRange]:
    by_name = {}
    for r in ranges:
        if r.variable in by_name:
            raise DataError(f"duplicate range for {r.variable!r}")
        by_name[r.variable] = r
    missing = [v for v in ladder.variable_names if v not in by_name]
    if missing:
        raise DataError(f"no range for variable(s) {', '.join(missing)}")
    return by_name


# -- generation ---------------------------------------------------------------


def _region(cond: Condition, want: bool, t: float) -> list[tuple[float, float]]:
    """Closed hulls of the lhs values giving ``want``; open ends are rechecked by the caller."""
    inf = math.inf
    sat = {
        "<=": [(-inf, t)], "<": [(-inf, t)], ">=": [(t, inf)], ">": [(t, inf)],
        "==": [(t, t)], "!=": [(-inf, t), (t, inf)],
    }
    vio = {
        "<=": [(t, inf)], "<": [(t, inf)], ">=": [(-inf, t)], ">": [(-inf, t)],
        "==": [(-inf, t), (t, inf)], "!=": [(t, t)],
    }
    return (sat if want else vio)[cond.op]


def _draw_outcome(cond: Condition, want: bool, rec: dict, rng, rng_map) -> Optional[float]:
    """A value for ``cond.lhs`` giving the wanted outcome, uniform over the legal part of its range."""
    vr = rng_map[cond.lhs]
    t = cond.threshold(rec)
    for _ in range(8):
        pieces = [p for p in _region(cond, want, t) if not (p[1] < vr.low or p[0] > vr.high)]
        if not pieces:
            return None
        lo, hi = pieces[int(rng.integers(len(pieces)))] if len(pieces) > 1 else pieces[0]
        x = vr.draw_between(lo, hi, rng)
        if x is not None:
            trial = dict(rec)
            trial[cond.lhs] = x
            if eval_condition(cond, trial) == want:
                return x
    return None


def _case_value(cond: Condition, want: bool, j: int, rec: dict, rng, rng_map) -> Optional[float]:
    """j-th value for a case: boundary-style picks first, then uniform fill."""
    vr = rng_map[cond.lhs]
    offsets = _BOUNDARY_OFFSETS[(cond.op, want)]
    if j < len(offsets):
        t = cond.threshold(rec)
        x = t + offsets[j] * vr.delta
        if vr.integer_valued:
            # round toward the side that keeps the wanted outcome when t is fractional
            candidates = sorted({math.floor(x), math.ceil(x)}, key=lambda c: abs(c - x))
        else:
            candidates = [x]
        for c in candidates:
            c = float(c)
            if vr.contains(c):
                trial = dict(rec)
                trial[cond.lhs] = c
                if eval_condition(cond, trial) == want:
                    return c
    return _draw_outcome(cond, want, rec, rng, rng_map)


def _reaches(ladder: DecisionLadder, rec: Record, rule_index: int) -> Optional[tuple[bool, ...]]:
    for i, results in walk(ladder, rec):
        if i == rule_index:
            return results
    return None


def _case_key(rule_index: int, cond_index: int, want: bool) -> tuple[int, int, bool]:
    return (rule_index, cond_index, want)


def _case_record(ladder, ri, ci, want, j, rng, rng_map) -> Optional[dict[str, float]]:
    rule = ladder.rules[ri]
    cond = rule.conditions[ci]
    names = ladder.variable_names
    for _ in range(REJECTION_BUDGET):
        cand = {v: rng_map[v].draw(rng) for v in names}
        x = _case_value(cond, want, j, cand, rng, rng_map)
        if x is None:
            continue
        cand[cond.lhs] = x
        # repair sibling conditions whose lhs is free to move
        for oi, other in enumerate(rule.conditions):
            if oi == ci or other.lhs in cond.variables or eval_condition(other, cand):
                continue
            y = _draw_outcome(other, True, cand, rng, rng_map)
            if y is not None:
                cand[other.lhs] = y
        results = _reaches(ladder, cand, ri)
        if results is None or results[ci] != want:
            continue
        if all(r for oi, r in enumerate(results) if oi != ci):
            return cand
    return None


def generate_covering_set(
    ladder: DecisionLadder,
    ranges: Sequence[ValueRange],
    k: int = 4,
    seed: int = 0,
    min_records: int = 0,
) -> Dataset:
    """Generate a labeled dataset that covers every condition both ways.

    For each rule r, condition c and outcome (satisfied / violated) the result
    holds at least ``k`` records that reach r with c at that outcome and every
    other condition of r satisfied. The first picks per case sit on or one
    delta beside the threshold; later ones are uniform over the case's region.
    Cases that cannot be hit within the rejection budget are recorded in
    ``Dataset.uncoverable``.

    When the covering pass yields fewer than ``min_records`` records, the set
    is topped up with records drawn uniformly from the ranges. Every record is
    labeled by the oracle.
    """
    if k < 1:
        raise DataError("k must be at least 1")
    if min_records < 0:
        raise DataError("min_records must be non-negative")
    rng_map = _range_map(ladder, ranges)
    rng = np.random.default_rng(seed)
    cases = [
        (ri, ci, want)
        for ri, rule in enumerate(ladder.rules)
        for ci in range(len(rule.conditions))
        for want in (True, False)
    ]
    values: list[dict[str, float]] = []
    uncoverable = set()
    for case in cases:
        got = 0
        for j in range(k):
            rec = _case_record(ladder, *case, j, rng, rng_map)
            if rec is None:
                break
            values.append(rec)
            got += 1
        if got < k:
            uncoverable.add(_case_key(*case))

    names = ladder.variable_names
    while len(values) < min_records:
        values.append({v: rng_map[v].draw(rng) for v in names})

    records = [LabeledRecord(v, classify(ladder, v), i) for i, v in enumerate(values)]
    return Dataset(ladder, records, "full", frozenset(uncoverable))


def label_records(ladder: DecisionLadder, records: Sequence[Record], origin: str = "full") -> Dataset:
    """Wrap plain records as a dataset labeled by the oracle."""
    out = [LabeledRecord(dict(r), classify(ladder, r), i) for i, r in enumerate(records)]
    return Dataset(ladder, out, origin)


def coverage_report(dataset: Dataset, ladder: DecisionLadder) -> CoverageReport:
    """Replay every record and count, per reached rule condition, MC/DC hits.

    A record counts as satisfying (violating) condition c of rule r when it
    reaches r, c is true (false), and every other condition of r is true.
    """
    counts = {}
    for ri, rule in enumerate(ladder.rules):
        for ci in range(len(rule.conditions)):
            counts[(ri, ci)] = [0, 0]
    for rec in dataset.records:
        for ri, results in walk(ladder, rec.values):
            for ci, res in enumerate(results):
                if all(r for oi, r in enumerate(results) if oi != ci):
                    counts[(ri, ci)][0 if res else 1] += 1
    entries = []
    for (ri, ci), (s, v) in counts.items():
        flagged = _case_key(ri, ci, True) in dataset.uncoverable or _case_key(ri, ci, False) in dataset.uncoverable
        entries.append(CoverageEntry(ladder.rules[ri].name, ci, s, v, flagged))
    return CoverageReport(entries)


# -- splitting ----------------------------------------------------------------


def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    sizes = [0] + [math.floor(n * f + 1e-9) for f in fractions[1:]]
    sizes[0] = n - sum(sizes)
    return sizes


def split_dataset(dataset: Dataset, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> SplitDataset:
    """Stratified, seeded train/test/blind partition.

    Split totals are ``floor(n * f)`` for test and blind with the remainder in
    train. Within each split the slots are shared out across classes in
    proportion to class size (largest remainder, lowest class first), and
    every class present gets at least one record in every split. Records keep
    their identity, so the three parts partition the source exactly.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not f > 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    by_class: dict[int, list[LabeledRecord]] = {}
    for rec in dataset.records:
        by_class.setdefault(rec.label, []).append(rec)
    classes = sorted(by_class)
    small = [c for c in classes if len(by_class[c]) < 3]
    if small:
        raise DataError(f"class(es) {small} have fewer than 3 records; cannot populate every split")

    rng = np.random.default_rng(seed)
    n = len(dataset)
    totals = _split_sizes(n, fractions)
    alloc = {c: [0, 0, 0] for c in classes}
    for s in (1, 2):
        quota = {c: len(by_class[c]) * fractions[s] for c in classes}
        for c in classes:
            alloc[c][s] = max(1, math.floor(quota[c] + 1e-9))
        room = lambda c: len(by_class[c]) - 1 - alloc[c][1] - alloc[c][2]
        while sum(alloc[c][s] for c in classes) > totals[s]:
            over = [c for c in classes if alloc[c][s] > 1]
            if not over:
                raise DataError("dataset too small to give every split one record per class")
            c = max(over, key=lambda c: (alloc[c][s] - quota[c], -c))
            alloc[c][s] -= 1
        while sum(alloc[c][s] for c in classes) < totals[s]:
            under = [c for c in classes if room(c) > 0]
            if not under:
                raise DataError("dataset too small for the requested fractions")
            c = max(under, key=lambda c: (quota[c] - alloc[c][s], -c))
            alloc[c][s] += 1
        if any(room(c) < 0 for c in classes):
            raise DataError("dataset too small to give every split one record per class")
    parts: list[list[LabeledRecord]] = [[], [], []]
    for c in classes:
        recs = list(by_class[c])
        perm = rng.permutation(len(recs))
        recs = [recs[i] for i in perm]
        n_test, n_blind = alloc[c][1], alloc[c][2]
        parts[1].extend(recs[:n_test])
        parts[2].extend(recs[n_test:n_test + n_blind])
        parts[0].extend(recs[n_test + n_blind:])
    for p in parts:
        p.sort(key=lambda r: r.uid)
    names = ("train", "test", "blind")
    ds = [Dataset(dataset.ladder, p, name, dataset.uncoverable) for p, name in zip(parts, names)]
    return SplitDataset(*ds)


# -- CSV ----------------------------------------------------------------------


def dataset_to_csv(dataset: Dataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    names = dataset.variables
    w.writerow(list(names) + ["class"])
    for rec in dataset.records:
        w.writerow([format_number(rec.values[v]) for v in names] + [str(rec.label)])
    return out.getvalue()


def dataset_from_csv(text: str, ladder: DecisionLadder, origin: str = "full", check_labels: bool = True) -> Dataset:
    """Read a dataset CSV. With ``check_labels`` every label must match the oracle."""
    records, labels = read_records_csv(text, ladder.variable_names)
    if labels is None:
        raise DataError("dataset CSV needs a 'class' column")
    out = []
    for i, (rec, label) in enumerate(zip(records, labels)):
        if not 1 <= label <= ladder.num_classes:
            raise DataError(f"row {i + 2}: class {label} out of range 1..{ladder.num_classes}")
        if check_labels and classify(ladder, rec) != label:
            raise DataError(f"row {i + 2}: label {label} disagrees with the ladder ({classify(ladder, rec)})")
        out.append(LabeledRecord(rec, label, i))
    return Dataset(ladder, out, origin)
