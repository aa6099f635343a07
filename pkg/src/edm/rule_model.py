"""Decision ladders: ordered conjunctive rules evaluated as an exact oracle.

A ladder is written in a small line-oriented text format::

    # credit risk
    variables: CYS, PDB, NW
    classes: 1=Accept, 2=FurtherEnquire, 3=Reject
    rule R1: PDB <= 0.10 * CYS ? next : class 3
    rule RC1: NW >= 50000 ? class 1 : class 2

Passing a rule (every condition true) takes its first action, failing takes
the second. ``next`` moves to the following rule; ``class k`` stops.
Comparisons are exact floating point, with no tolerance.
"""

from __future__ import annotations

import csv
import io
import math
import operator
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator, Mapping, Optional, Sequence

from .errors import LadderError, LadderSyntaxError, MissingVariableError, DataError

Record = Mapping[str, float]

COMPARATORS = {
    "<=": operator.le,
    "<": operator.lt,
    ">=": operator.ge,
    ">": operator.gt,
    "==": operator.eq,
    "!=": operator.ne,
}
KEYWORDS = frozenset({"and", "next", "class", "rule", "variables", "classes"})
IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def format_number(x: float) -> str:
    """Shortest text that parses back to exactly ``x``; integral values lose ``.0``."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


@dataclass(frozen=True)
class Variable:
    name: str
    description: str = ""


@dataclass(frozen=True)
class Condition:
    """``lhs <op> constant`` or ``lhs <op> scale * rhs_var``."""

    lhs: str
    op: str
    constant: Optional[float] = None
    scale: Optional[float] = None
    rhs_var: Optional[str] = None

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise LadderError(f"unknown comparator {self.op!r}")
        if (self.constant is None) == (self.rhs_var is None):
            raise LadderError("condition needs exactly one of a constant or a scaled variable")
        if self.rhs_var is not None:
            if self.scale is None or not math.isfinite(self.scale) or self.scale == 0:
                raise LadderError(f"scale for {self.rhs_var!r} must be finite and nonzero")
        elif not math.isfinite(self.constant):
            raise LadderError("constant must be finite")

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.lhs,) if self.rhs_var is None else (self.lhs, self.rhs_var)

    def threshold(self, record: Record) -> float:
        if self.rhs_var is None:
            return self.constant
        return self.scale * _value(record, self.rhs_var)

    def __str__(self):
        if self.rhs_var is None:
            rhs = format_number(self.constant)
        else:
            rhs = f"{format_number(self.scale)} * {self.rhs_var}"
        return f"{self.lhs} {self.op} {rhs}"


@dataclass(frozen=True)
class Rule:
    """A conjunction of conditions. Actions are a class index, or None for next."""

    name: str
    conditions: tuple[Condition, ...]
    pass_action: Optional[int]
    fail_action: Optional[int]

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if not self.conditions:
            raise LadderError(f"rule {self.name!r} has no conditions")


@dataclass(frozen=True)
class DecisionLadder:
    variables: tuple[Variable, ...]
    rules: tuple[Rule, ...]
    num_classes: int
    class_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "class_names", dict(self.class_names))
        validate_ladder(self)

    @property
    def variable_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def class_label(self, k: int) -> str:
        return self.class_names.get(k, f"class {k}")


def validate_ladder(ladder: DecisionLadder) -> None:
    if ladder.num_classes < 1:
        raise LadderError("num_classes must be positive")
    names = [v.name for v in ladder.variables]
    for name in names:
        if not IDENT_RE.match(name) or name in KEYWORDS:
            raise LadderError(f"invalid variable name {name!r}")
    if len(set(names)) != len(names):
        raise LadderError("duplicate variable name")
    if not ladder.rules:
        raise LadderError("ladder has no rules")
    for k in ladder.class_names:
        if not 1 <= k <= ladder.num_classes:
            raise LadderError(f"class name given for out-of-range class {k}")
    known = set(names)
    rule_names = set()
    for rule in ladder.rules:
        if rule.name in rule_names:
            raise LadderError(f"duplicate rule name {rule.name!r}")
        rule_names.add(rule.name)
        for cond in rule.conditions:
            for var in cond.variables:
                if var not in known:
                    raise LadderError(f"rule {rule.name!r} references unknown variable {var!r}")
        for action in (rule.pass_action, rule.fail_action):
            if action is not None and not 1 <= action <= ladder.num_classes:
                raise LadderError(f"rule {rule.name!r}: class {action} out of range 1..{ladder.num_classes}")
    last = ladder.rules[-1]
    if last.pass_action is None or last.fail_action is None:
        raise LadderError(f"last rule {last.name!r} has a dangling 'next'")


# -- evaluation ---------------------------------------------------------------


def _value(record: Record, name: str) -> float:
    try:
        return record[name]
    except KeyError:
        raise MissingVariableError(name) from None


def eval_condition(cond: Condition, record: Record) -> bool:
    return COMPARATORS[cond.op](_value(record, cond.lhs), cond.threshold(record))


def walk(ladder: DecisionLadder, record: Record) -> Iterator[tuple[int, tuple[bool, ...]]]:
    """Yield ``(rule_index, condition_results)`` for every rule visited, in order."""
    for i, rule in enumerate(ladder.rules):
        results = tuple(eval_condition(c, record) for c in rule.conditions)
        yield i, results
        action = rule.pass_action if all(results) else rule.fail_action
        if action is not None:
            return


def classify(ladder: DecisionLadder, record: Record) -> int:
    for name in ladder.variable_names:
        _value(record, name)
    for i, results in walk(ladder, record):
        rule = ladder.rules[i]
        action = rule.pass_action if all(results) else rule.fail_action
        if action is not None:
            return action
    raise AssertionError("validated ladder cannot fall off the end")


# -- text format --------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|!=|<|>)
  | (?P<punct>[:,?*=])
    """,
    re.VERBOSE,
)


class _Tokens:
    def __init__(self, text, lineno, offset=0):
        self.lineno = lineno
        self.items = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None:
                raise LadderSyntaxError(f"unexpected character {text[pos]!r}", lineno, offset + pos + 1)
            if m.lastgroup != "ws":
                self.items.append((m.lastgroup, m.group(), offset + pos + 1))
            pos = m.end()
        self.i = 0
        self.end_col = offset + len(text) + 1

    def peek(self):
        return self.items[self.i] if self.i < len(self.items) else ("eof", "", self.end_col)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = repr(value) if value is not None else kind
            found = repr(tok[1]) if tok[0] != "eof" else "end of line"
            raise LadderSyntaxError(f"expected {want}, found {found}", self.lineno, tok[2])
        self.i += 1
        return tok

    def at(self, kind, value=None):
        tok = self.peek()
        return tok[0] == kind and (value is None or tok[1] == value)

    def done(self):
        if self.i < len(self.items):
            tok = self.items[self.i]
            raise LadderSyntaxError(f"unexpected {tok[1]!r}", self.lineno, tok[2])


def _parse_condition(toks: _Tokens) -> tuple[Condition, list]:
    refs = []
    _, lhs, col = toks.take("ident")
    refs.append((lhs, col))
    _, op, _ = toks.take("op")
    if toks.at("num"):
        _, num, _ = toks.take("num")
        if toks.at("punct", "*"):
            toks.take()
            _, var, vcol = toks.take("ident")
            refs.append((var, vcol))
            cond = Condition(lhs, op, scale=float(num), rhs_var=var)
        else:
            cond = Condition(lhs, op, constant=float(num))
    else:
        _, var, vcol = toks.take("ident")
        refs.append((var, vcol))
        cond = Condition(lhs, op, scale=1.0, rhs_var=var)
    return cond, refs


def _parse_action(toks: _Tokens) -> tuple[Optional[int], int]:
    tok = toks.peek()
    if toks.at("ident", "next"):
        toks.take()
        return None, tok[2]
    toks.take("ident", "class")
    _, num, col = toks.take("num")
    if not re.fullmatch(r"\d+", num):
        raise LadderSyntaxError(f"class index must be a positive integer, found {num!r}", toks.lineno, col)
    return int(num), col


def parse_ladder(source: str) -> DecisionLadder:
    """Parse ladder text. Errors carry the 1-based line and column."""
    variables: list[Variable] = []
    num_classes = None
    class_names: dict[int, str] = {}
    rules: list[Rule] = []
    refs: list[tuple[str, int, int]] = []
    actions: list[tuple[Optional[int], int, int]] = []
    seen_rules = set()

    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0]
        stripped = text.strip()
        if not stripped:
            continue
        offset = len(text) - len(text.lstrip())
        toks = _Tokens(stripped, lineno, offset)
        _, head, hcol = toks.take("ident")
        if head == "variables":
            toks.take("punct", ":")
            while True:
                _, name, col = toks.take("ident")
                if name in KEYWORDS:
                    raise LadderSyntaxError(f"{name!r} is reserved", lineno, col)
                if any(v.name == name for v in variables):
                    raise LadderSyntaxError(f"duplicate variable {name!r}", lineno, col)
                variables.append(Variable(name))
                if not toks.at("punct", ","):
                    break
                toks.take()
            toks.done()
        elif head == "classes":
            if num_classes is not None:
                raise LadderSyntaxError("classes declared twice", lineno, hcol)
            toks.take("punct", ":")
            _, num, col = toks.take("num")
            if not toks.at("punct", "="):
                num_classes = _positive_int(num, lineno, col)
                toks.done()
                continue
            while True:
                k = _positive_int(num, lineno, col)
                toks.take("punct", "=")
                _, label, _ = toks.take("ident")
                if k in class_names:
                    raise LadderSyntaxError(f"class {k} named twice", lineno, col)
                class_names[k] = label
                if not toks.at("punct", ","):
                    break
                toks.take()
                _, num, col = toks.take("num")
            toks.done()
            num_classes = max(class_names)
            if sorted(class_names) != list(range(1, num_classes + 1)):
                raise LadderSyntaxError("named classes must be exactly 1..n", lineno, hcol)
        elif head == "rule":
            _, name, ncol = toks.take("ident")
            if name in seen_rules:
                raise LadderSyntaxError(f"duplicate rule {name!r}", lineno, ncol)
            seen_rules.add(name)
            toks.take("punct", ":")
            conds = []
            while True:
                cond, crefs = _parse_condition(toks)
                conds.append(cond)
                refs.extend((n, lineno, c) for n, c in crefs)
                if not toks.at("ident", "and"):
                    break
                toks.take()
            toks.take("punct", "?")
            pass_action, pcol = _parse_action(toks)
            toks.take("punct", ":")
            fail_action, fcol = _parse_action(toks)
            toks.done()
            actions.append((pass_action, lineno, pcol))
            actions.append((fail_action, lineno, fcol))
            rules.append(Rule(name, tuple(conds), pass_action, fail_action))
        else:
            raise LadderSyntaxError(f"expected 'variables', 'classes' or 'rule', found {head!r}", lineno, hcol)

    if not variables:
        raise LadderError("no 'variables:' declaration")
    if num_classes is None:
        raise LadderError("no 'classes:' declaration")
    if not rules:
        raise LadderError("no rules")
    known = {v.name for v in variables}
    for name, lineno, col in refs:
        if name not in known:
            raise LadderSyntaxError(f"unknown variable {name!r}", lineno, col)
    for action, lineno, col in actions:
        if action is not None and not 1 <= action <= num_classes:
            raise LadderSyntaxError(f"class {action} out of range 1..{num_classes}", lineno, col)
    return DecisionLadder(tuple(variables), tuple(rules), num_classes, class_names)


def _positive_int(text, lineno, col) -> int:
    if not re.fullmatch(r"\d+", text) or int(text) < 1:
        raise LadderSyntaxError(f"expected a positive integer, found {text!r}", lineno, col)
    return int(text)


def _action_text(action: Optional[int]) -> str:
    return "next" if action is None else f"class {action}"


def serialize_ladder(ladder: DecisionLadder) -> str:
    lines = ["variables: " + ", ".join(ladder.variable_names)]
    if ladder.class_names and len(ladder.class_names) == ladder.num_classes:
        names = ", ".join(f"{k}={ladder.class_names[k]}" for k in sorted(ladder.class_names))
        lines.append(f"classes: {names}")
    else:
        lines.append(f"classes: {ladder.num_classes}")
    for rule in ladder.rules:
        conds = " and ".join(str(c) for c in rule.conditions)
        lines.append(
            f"rule {rule.name}: {conds} ? {_action_text(rule.pass_action)} : {_action_text(rule.fail_action)}"
        )
    return "\n".join(lines) + "\n"


# -- records ------------------------------------------------------------------


def _parse_float(text: str, where: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(x):
        raise DataError(f"{where}: non-finite value {text!r}")
    return x


def read_records_csv(text: str, variables: Sequence[str] | None = None) -> tuple[list[dict[str, float]], list[int] | None]:
    """Parse a record CSV. Returns the records and, if a ``class`` column exists, the labels."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty records file") from None
    has_class = "class" in header
    names = [h for h in header if h != "class"]
    if variables is not None:
        missing = [v for v in variables if v not in names]
        if missing:
            raise DataError(f"records lack columns {', '.join(missing)}")
    records, labels = [], []
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        rec = {}
        for h, cell in zip(header, row):
            if h == "class":
                if not re.fullmatch(r"\s*\d+\s*", cell):
                    raise DataError(f"row {rowno}: class must be a positive integer, got {cell!r}")
                labels.append(int(cell))
            else:
                rec[h] = _parse_float(cell.strip(), f"row {rowno}, column {h}")
        records.append(rec)
    return records, (labels if has_class else None)


def write_records_csv(records: Sequence[Record], variables: Sequence[str], labels: Sequence[int] | None = None) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(variables) + (["class"] if labels is not None else []))
    for i, rec in enumerate(records):
        row = [format_number(rec[v]) for v in variables]
        if labels is not None:
            row.append(str(labels[i]))
        writer.writerow(row)
    return out.getvalue()


# -- shipped fixtures ---------------------------------------------------------


def _data_text(name: str) -> str:
    return resources.files("edm").joinpath("data").joinpath(name).read_text(encoding="utf-8")


def credit_risk_source() -> str:
    return _data_text("credit_risk.ladder")


def credit_risk_ladder() -> DecisionLadder:
    """The two-rule credit-risk ladder: debt ratio gate, then the Accept conjunction."""
    return parse_ladder(credit_risk_source())


def worked_example_records() -> tuple[list[dict[str, float]], list[int]]:
    """The ten printed example rows with their printed labels (not oracle truth)."""
    records, labels = read_records_csv(_data_text("worked_example.csv"))
    return records, labels
