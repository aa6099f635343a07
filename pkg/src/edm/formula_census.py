"""Count spreadsheet function usage by vendor function class.

Two metrics are reported per class: occurrences (every call in the corpus
is counted) and presence (the percentage of workbooks with at least one
call of that class). Names missing from the class map are kept under
``Unclassified`` so that every extracted call is accounted for.
"""

from __future__ import annotations

import csv
import io
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import ClassMapError, DataError

# Excel's eleven classes and how many operators each holds.
EXCEL_CLASS_COUNTS = {
    "Database": 12,
    "Date and Time": 20,
    "Financial": 53,
    "Engineering": 39,
    "Information": 18,
    "Logical": 6,
    "Look-up and Reference": 17,
    "Math and Trigonometry": 60,
    "Statistical": 78,
    "Text": 35,
    "External linking": 5,
}
EXCEL_CLASSES = tuple(EXCEL_CLASS_COUNTS)
EXCEL_TOTAL = 343
UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class FunctionClassMap:
    classes: tuple[str, ...]
    functions: Mapping[str, str]

    def class_of(self, name: str) -> str:
        return self.functions.get(name.upper(), UNCLASSIFIED)

    def counts(self) -> dict[str, int]:
        c = Counter(self.functions.values())
        return {k: c.get(k, 0) for k in self.classes}


def load_class_map(source: str, strict: bool = False, classes: Sequence[str] = EXCEL_CLASSES) -> FunctionClassMap:
    """Parse ``class_name,FUNCTION_NAME`` lines.

    In strict mode the per-class counts must equal the vendor table exactly.
    """
    functions: dict[str, str] = {}
    known = set(classes)
    for lineno, row in enumerate(csv.reader(io.StringIO(source)), start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        if len(row) != 2:
            raise ClassMapError(f"line {lineno}: expected class_name,FUNCTION_NAME")
        cls, name = row[0].strip(), row[1].strip().upper()
        if lineno == 1 and cls.lower() == "class_name":
            continue
        if cls not in known:
            raise ClassMapError(f"line {lineno}: unknown class {cls!r}")
        if not name:
            raise ClassMapError(f"line {lineno}: empty function name")
        if name in functions:
            raise ClassMapError(f"line {lineno}: {name} already mapped to {functions[name]!r}")
        functions[name] = cls
    cmap = FunctionClassMap(tuple(classes), functions)
    if strict:
        check_strict(cmap)
    return cmap


def check_strict(cmap: FunctionClassMap, expected: Mapping[str, int] = EXCEL_CLASS_COUNTS) -> None:
    counts = cmap.counts()
    bad = [f"{k} has {counts.get(k, 0)}, expected {n}" for k, n in expected.items() if counts.get(k, 0) != n]
    total = sum(counts.values())
    if bad or total != sum(expected.values()):
        raise ClassMapError(f"class map does not match the vendor table (total {total}, expected "
                            f"{sum(expected.values())}): " + "; ".join(bad))


def partial_excel_map() -> FunctionClassMap:
    """A hand-picked subset of common Excel functions; not the full table."""
    text = resources.files("edm").joinpath("data").joinpath("excel_functions_partial.csv").read_text(encoding="utf-8")
    return load_class_map(text)


_SCAN = re.compile(
    r"""
    (?P<dq>"(?:[^"]|"")*(?:"|\Z))
  | (?P<sq>'(?:[^']|'')*(?:'|\Z))
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)(?P<call>\s*\()?
  | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)


def extract_function_calls(formula: str) -> list[str]:
    """Uppercased names of every function call, in order of appearance.

    A call is a name directly followed (spaces allowed) by ``(``. Text in
    double-quoted literals and quoted sheet names is skipped; an unclosed
    quote runs to the end of the formula.
    """
    return [m.group("name").upper() for m in _SCAN.finditer(formula) if m.group("call")]


@dataclass(frozen=True)
class FormulaRecord:
    workbook_id: str
    formula: str

    def __post_init__(self):
        if not self.formula:
            raise DataError(f"empty formula in workbook {self.workbook_id!r}")


def read_formulas_csv(text: str) -> list[FormulaRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["workbook_id", "formula"]:
        raise DataError("formulas CSV must start with the header 'workbook_id,formula'")
    out = []
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"row {rowno}: expected 2 fields, got {len(row)}")
        out.append(FormulaRecord(row[0], row[1]))
    return out


@dataclass
class CensusReport:
    classes: tuple[str, ...]  # includes Unclassified last
    occurrences: dict[str, int]
    presence: dict[str, float]
    n_workbooks: int
    total_calls: int
    any_presence: float  # percent of workbooks with at least one call of any kind

    @property
    def unclassified(self) -> int:
        return self.occurrences[UNCLASSIFIED]

    def to_csv(self, metric: str = "both") -> str:
        cols = {"both": ["occurrences", "presence_percent"], "occurrences": ["occurrences"],
                "presence": ["presence_percent"]}
        if metric not in cols:
            raise DataError(f"unknown metric {metric!r}")
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["class"] + cols[metric])
        for c in self.classes:
            vals = {"occurrences": str(self.occurrences[c]), "presence_percent": f"{self.presence[c]:.2f}"}
            w.writerow([c] + [vals[k] for k in cols[metric]])
        totals = {"occurrences": str(self.total_calls), "presence_percent": f"{self.any_presence:.2f}"}
        w.writerow(["TOTAL"] + [totals[k] for k in cols[metric]])
        return out.getvalue()


def census(records: Iterable[FormulaRecord], cmap: FunctionClassMap) -> CensusReport:
    classes = tuple(cmap.classes) + (UNCLASSIFIED,)
    occ = {c: 0 for c in classes}
    seen: dict[str, set[str]] = {c: set() for c in classes}
    workbooks = set()
    calling = set()
    total = 0
    for rec in records:
        workbooks.add(rec.workbook_id)
        for name in extract_function_calls(rec.formula):
            c = cmap.class_of(name)
            occ[c] += 1
            seen[c].add(rec.workbook_id)
            calling.add(rec.workbook_id)
            total += 1
    if not workbooks:
        raise DataError("census needs at least one formula")
    n = len(workbooks)
    presence = {c: 100.0 * len(seen[c]) / n for c in classes}
    return CensusReport(classes, occ, presence, n, total, 100.0 * len(calling) / n)
