"""Blind testing of a trained network against oracle labels."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

from .errors import DataError
from .example_gen import Dataset
from .neural_net import Network, forward


@dataclass(frozen=True)
class BlindResult:
    index: int
    raw_output: float
    class_units: float
    predicted: int
    actual: int

    @property
    def within_band(self) -> bool:
        return abs(self.class_units - self.actual) < 0.5


@dataclass
class EvalSummary:
    n_blind: int
    misclassifications: int
    accuracy: float
    mse: float
    confusion: list[list[int]]  # confusion[actual - 1][predicted - 1]

    def to_text(self) -> str:
        k = len(self.confusion)
        lines = [
            f"blind records:      {self.n_blind}",
            f"misclassifications: {self.misclassifications}",
            f"accuracy:           {self.accuracy:.4f}",
            f"blind MSE:          {self.mse:.6g}",
            "confusion (rows actual, columns predicted):",
            "       " + " ".join(f"{j:>5}" for j in range(1, k + 1)),
        ]
        for i, row in enumerate(self.confusion, start=1):
            lines.append(f"  {i:>3}  " + " ".join(f"{c:>5}" for c in row))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = [
            "key,value",
            f"n_blind,{self.n_blind}",
            f"misclassifications,{self.misclassifications}",
            f"accuracy,{self.accuracy!r}",
            f"blind_mse,{self.mse!r}",
        ]
        for i, row in enumerate(self.confusion, start=1):
            for j, c in enumerate(row, start=1):
                lines.append(f"confusion_{i}_{j},{c}")
        return "\n".join(lines) + "\n"


def to_class_units(output: float, num_classes: int) -> float:
    return 1.0 + output * (num_classes - 1)


def round_to_class(x: float, num_classes: int) -> int:
    """Nearest class, halves rounding up, clamped to 1..num_classes."""
    if not math.isfinite(x):
        raise DataError(f"cannot round non-finite value {x!r} to a class")
    if num_classes < 2:
        raise DataError("need at least two classes")
    return min(max(math.floor(x + 0.5), 1), num_classes)


def blind_test(net: Network, blind: Dataset, require_blind: bool = True) -> tuple[list[BlindResult], EvalSummary]:
    if require_blind and blind.origin != "blind":
        raise DataError(f"blind_test needs the blind split, got a {blind.origin!r} dataset")
    if not len(blind):
        raise DataError("blind set is empty")
    missing = [v for v in net.variables if v not in blind.variables]
    if missing:
        raise DataError(f"network inputs {missing} are not ladder variables")
    k = blind.ladder.num_classes
    if net.norm.num_classes != k:
        raise DataError(f"network trained for {net.norm.num_classes} classes, ladder has {k}")
    results = []
    sq = 0.0
    for i, rec in enumerate(blind.records):
        out = forward(net, rec.values)
        cu = to_class_units(out, k)
        results.append(BlindResult(i, out, cu, round_to_class(cu, k), rec.label))
        sq += (out - net.norm.target(rec.label)) ** 2
    return results, summarize(results, k, sq / len(results))


def summarize(results: Sequence[BlindResult], num_classes: int, mse: float) -> EvalSummary:
    if not results:
        raise DataError("no blind results to summarize")
    confusion = [[0] * num_classes for _ in range(num_classes)]
    for r in results:
        confusion[r.actual - 1][r.predicted - 1] += 1
    wrong = sum(r.predicted != r.actual for r in results)
    n = len(results)
    return EvalSummary(n, wrong, 1.0 - wrong / n, mse, confusion)


PLOT_HEADER = ["index", "network_output_class_units", "actual_class", "predicted_class", "within_band"]


def emit_plot_data(results: Sequence[BlindResult]) -> str:
    if not results:
        raise DataError("no results to emit")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(PLOT_HEADER)
    for r in results:
        w.writerow([r.index, repr(r.class_units), r.actual, r.predicted, str(r.within_band).lower()])
    return out.getvalue()


def parse_plot_data(text: str) -> list[tuple[int, float, int, int, bool]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != PLOT_HEADER:
        raise DataError("not a blind plot CSV")
    return [(int(a), float(b), int(c), int(d), e == "true") for a, b, c, d, e in rows[1:]]
