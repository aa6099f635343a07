"""Command line driver: ladder -> examples -> splits -> (GA) -> network -> blind test.

Exit status: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure (training diverged).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import evaluation, example_gen, formula_census, genetic_opt, neural_net, rule_model
from .errors import DataError, EDMError, TrainingDivergedError
from .seeding import derive_seed

log = logging.getLogger("edm")

FIXTURE = "fixture"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- inputs -------------------------------------------------------------------


def _read(path: str | Path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {what} {str(path)!r}: {exc.strerror or exc}") from None


def load_ladder(spec: str) -> rule_model.DecisionLadder:
    if spec == FIXTURE:
        return rule_model.credit_risk_ladder()
    return rule_model.parse_ladder(_read(spec, "ladder file"))


def load_ranges(spec: Optional[str], ladder_spec: str) -> list[example_gen.ValueRange]:
    if spec is None or spec == FIXTURE:
        if spec is None and ladder_spec != FIXTURE:
            raise DataError("--ranges is required for a ladder other than the fixture")
        text = resources.files("edm").joinpath("data").joinpath("credit_risk_ranges.csv").read_text(encoding="utf-8")
        return example_gen.parse_ranges(text)
    return example_gen.parse_ranges(_read(spec, "ranges file"))


def load_dataset(path: str, ladder, origin: str) -> example_gen.Dataset:
    try:
        ds = example_gen.dataset_from_csv(_read(path, f"{origin} dataset"), ladder, origin)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not len(ds):
        raise DataError(f"dataset {path!r} has no records")
    return ds


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")


# -- configuration ------------------------------------------------------------


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in str(text).split(","))
    except ValueError:
        raise DataError(f"--fractions must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise DataError(f"--fractions must have three parts, got {text!r}")
    return parts


def _hidden(text) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise DataError(f"--hidden must be comma-separated integers, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise DataError(f"expected a boolean, got {text!r}")


@dataclass
class PipelineConfig:
    """Every knob of ``run-edm``; each has a default so the fixture runs as is."""

    ladder: str = FIXTURE
    ranges: Optional[str] = None
    out: str = "edm_out"
    seed: int = 42
    k: int = 4
    min_records: int = 125
    fractions: tuple[float, float, float] = example_gen.DEFAULT_FRACTIONS
    hidden: tuple[int, ...] = (8,)
    lr: float = 0.1
    epochs: int = 2000
    patience: int = 100
    init_scale: float = 0.5
    ga: bool = True
    pop: int = 12
    gens: int = 10
    tournament: int = 2
    crossover: float = 0.9
    mutation: Optional[float] = None
    elitism: int = 1
    workers: int = 1

    _CONVERT = {
        "seed": int, "k": int, "min_records": int, "fractions": _fractions, "hidden": _hidden,
        "lr": float, "epochs": int, "patience": int, "init_scale": float, "ga": _bool, "pop": int,
        "gens": int, "tournament": int, "crossover": float, "elitism": int, "workers": int,
        "mutation": lambda v: None if str(v).lower() in ("", "none", "auto") else float(v),
    }

    def set(self, key: str, value) -> None:
        key = key.strip().replace("-", "_")
        if key not in {f.name for f in fields(self)}:
            raise DataError(f"unknown config key {key!r}")
        conv = self._CONVERT.get(key)
        try:
            setattr(self, key, conv(value) if conv else value)
        except (TypeError, ValueError):
            raise DataError(f"bad value for {key}: {value!r}") from None

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def train_config(self) -> neural_net.TrainConfig:
        return neural_net.TrainConfig(self.lr, self.epochs, self.patience, self.hidden, self.init_scale,
                                      self.stage_seed("train"))

    def ga_config(self) -> genetic_opt.GAConfig:
        return genetic_opt.GAConfig(self.pop, self.gens, self.tournament, self.crossover, self.mutation,
                                    self.elitism, self.stage_seed("ga"), self.workers)


_CONFIG_FIELDS = [f.name for f in fields(PipelineConfig)]


def read_config_file(path: str, cfg: PipelineConfig) -> None:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    for lineno, raw in enumerate(_read(path, "config file").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg.set(key, value.strip())


def _env_seed() -> Optional[int]:
    raw = os.environ.get("EDM_SEED")
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"EDM_SEED must be an integer, got {raw!r}") from None


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then EDM_SEED, then the config file, then explicit flags."""
    cfg = PipelineConfig()
    env = _env_seed()
    if env is not None:
        cfg.seed = env
    if getattr(args, "config", None):
        read_config_file(args.config, cfg)
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            cfg.set(name, value)
    return cfg


# -- subcommands --------------------------------------------------------------


def cmd_oracle(args) -> int:
    ladder = load_ladder(args.ladder)
    try:
        records, _ = rule_model.read_records_csv(_read(args.records, "records file"), ladder.variable_names)
    except DataError as exc:
        raise DataError(f"{args.records}: {exc}") from exc
    if not records:
        raise DataError(f"records file {args.records!r} has no records")
    labels = [rule_model.classify(ladder, r) for r in records]
    sys.stdout.write(rule_model.write_records_csv(records, ladder.variable_names, labels))
    return 0


def cmd_gen_examples(args) -> int:
    cfg = resolve_config(args)
    ladder = load_ladder(cfg.ladder)
    ranges = load_ranges(cfg.ranges, cfg.ladder)
    ds = example_gen.generate_covering_set(ladder, ranges, cfg.k, cfg.stage_seed("generate"), cfg.min_records)
    out = Path(cfg.out)
    _write(out, "dataset.csv", example_gen.dataset_to_csv(ds))
    _write(out, "coverage.csv", example_gen.coverage_report(ds, ladder).to_csv())
    print(f"wrote {len(ds)} records to {out / 'dataset.csv'}")
    return 0


def cmd_split(args) -> int:
    cfg = resolve_config(args)
    ladder = load_ladder(cfg.ladder)
    ds = load_dataset(args.dataset, ladder, "full")
    split = example_gen.split_dataset(ds, cfg.fractions, cfg.stage_seed("split"))
    out = Path(cfg.out)
    for part in ("train", "test", "blind"):
        _write(out, f"{part}.csv", example_gen.dataset_to_csv(getattr(split, part)))
    print(f"train {len(split.train)}, test {len(split.test)}, blind {len(split.blind)}")
    return 0


def _mask_for(args, ladder) -> genetic_opt.Genome:
    if getattr(args, "mask", None):
        g = genetic_opt.Genome.from_bits(args.mask)
        g.select(ladder.variable_names)
        return g
    return genetic_opt.Genome.all_ones(len(ladder.variables))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ladder = load_ladder(cfg.ladder)
    split = example_gen.SplitDataset(load_dataset(args.train, ladder, "train"),
                                     load_dataset(args.test, ladder, "test"), None)
    report = genetic_opt.train_genome(_mask_for(args, ladder), split, cfg.train_config())
    out = Path(cfg.out)
    _write(out, "network.txt", neural_net.serialize_network(report.network))
    _write(out, "mse_history.csv", report.history_csv())
    print(f"best epoch {report.best_epoch}, train MSE {report.train_mse:.6g}, test MSE {report.test_mse:.6g}")
    return 0


def cmd_evolve(args) -> int:
    cfg = resolve_config(args)
    ladder = load_ladder(cfg.ladder)
    split = example_gen.SplitDataset(load_dataset(args.train, ladder, "train"),
                                     load_dataset(args.test, ladder, "test"), None)
    report = genetic_opt.optimize_inputs(split, cfg.ga_config(), cfg.train_config())
    _write(Path(cfg.out), "ga_report.csv", report.to_csv())
    names = report.best.select(ladder.variable_names)
    print(f"best mask {report.best.bits} ({', '.join(names)}), fitness {report.best_fitness:.6g}")
    return 0


def cmd_blind_test(args) -> int:
    cfg = resolve_config(args)
    ladder = load_ladder(cfg.ladder)
    net = neural_net.parse_network(_read(args.network, "network file"))
    blind = load_dataset(args.blind, ladder, "blind")
    results, summary = evaluation.blind_test(net, blind)
    out = Path(cfg.out)
    _write(out, "blind_plot.csv", evaluation.emit_plot_data(results))
    _write(out, "summary.txt", summary.to_text())
    _write(out, "summary.csv", summary.to_csv())
    sys.stdout.write(summary.to_text())
    return 0


def cmd_census(args) -> int:
    records = formula_census.read_formulas_csv(_read(args.formulas, "formulas file"))
    if not records:
        raise DataError(f"formulas file {args.formulas!r} has no formulas")
    if args.class_map:
        cmap = formula_census.load_class_map(_read(args.class_map, "class map"), strict=args.strict)
    else:
        cmap = formula_census.partial_excel_map()
        if args.strict:
            formula_census.check_strict(cmap)
    report = formula_census.census(records, cmap)
    sys.stdout.write(report.to_csv(args.metric))
    return 0


@dataclass
class EDMRun:
    dataset: example_gen.Dataset
    split: example_gen.SplitDataset
    ga_report: Optional[genetic_opt.GAReport]
    train_report: neural_net.TrainReport
    results: list = field(default_factory=list)
    summary: Optional[evaluation.EvalSummary] = None
    inputs: tuple[str, ...] = ()


@contextmanager
def _stage(name: str):
    """Prefix module errors with the pipeline stage they came from."""
    try:
        yield
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(exc.epoch, f"{name}-stage") from exc
    except DataError as exc:
        raise DataError(f"{name}: {exc}") from exc


def run_edm(cfg: PipelineConfig) -> EDMRun:
    """Generate, split, optionally evolve inputs, train and blind-test; write every artifact."""
    ladder = load_ladder(cfg.ladder)
    ranges = load_ranges(cfg.ranges, cfg.ladder)
    with _stage("generate"):
        dataset = example_gen.generate_covering_set(ladder, ranges, cfg.k, cfg.stage_seed("generate"),
                                                    cfg.min_records)
    with _stage("split"):
        split = example_gen.split_dataset(dataset, cfg.fractions, cfg.stage_seed("split"))
    nn_cfg = cfg.train_config()
    ga_report = None
    genome = genetic_opt.Genome.all_ones(len(ladder.variables))
    if cfg.ga:
        with _stage("evolve"):
            ga_report = genetic_opt.optimize_inputs(split, cfg.ga_config(), nn_cfg)
        genome = ga_report.best
    with _stage("train"):
        train_report = genetic_opt.train_genome(genome, split, nn_cfg)
    with _stage("blind-test"):
        results, summary = evaluation.blind_test(train_report.network, split.blind)

    out = Path(cfg.out)
    _write(out, "dataset.csv", example_gen.dataset_to_csv(dataset))
    _write(out, "coverage.csv", example_gen.coverage_report(dataset, ladder).to_csv())
    for part in ("train", "test", "blind"):
        _write(out, f"{part}.csv", example_gen.dataset_to_csv(getattr(split, part)))
    ga_path = out / "ga_report.csv"
    if ga_report is not None:
        _write(out, "ga_report.csv", ga_report.to_csv())
    elif ga_path.exists():
        ga_path.unlink()
    _write(out, "network.txt", neural_net.serialize_network(train_report.network))
    _write(out, "mse_history.csv", train_report.history_csv())
    _write(out, "blind_plot.csv", evaluation.emit_plot_data(results))
    inputs = genome.select(ladder.variable_names)
    head = [
        f"master seed:        {cfg.seed}",
        f"records generated:  {len(dataset)}",
        f"split sizes:        train {len(split.train)}, test {len(split.test)}, blind {len(split.blind)}",
        f"inputs used:        {', '.join(inputs)} (mask {genome.bits})",
        f"best epoch:         {train_report.best_epoch} of {train_report.stopped_epoch}",
        f"train MSE:          {train_report.train_mse:.6g}",
        f"test MSE:           {train_report.test_mse:.6g}",
    ]
    _write(out, "summary.txt", "\n".join(head) + "\n" + summary.to_text())
    _write(out, "summary.csv", summary.to_csv() + f"mask,{genome.bits}\n")
    return EDMRun(dataset, split, ga_report, train_report, results, summary, inputs)


def cmd_run_edm(args) -> int:
    cfg = resolve_config(args)
    run_edm(cfg)
    sys.stdout.write((Path(cfg.out) / "summary.txt").read_text(encoding="utf-8"))
    return 0


# -- parser -------------------------------------------------------------------


def _add_common(p, *, gen=False, split=False, nn=False, ga=False):
    p.add_argument("--ladder", help="ladder file, or 'fixture' for the credit-risk ladder")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (falls back to EDM_SEED, then 42)")
    p.add_argument("--config", help="key = value config file; flags override it")
    if gen:
        p.add_argument("--ranges", help="ranges CSV (variable,low,high,integer)")
        p.add_argument("--k", type=int, help="records per condition case (default 4)")
        p.add_argument("--min-records", dest="min_records", type=int, help="top up to this many records (default 125)")
    if split:
        p.add_argument("--fractions", help="train,test,blind fractions (default 0.6,0.2,0.2)")
    if nn:
        p.add_argument("--hidden", help="hidden layer sizes, comma separated (default 8)")
        p.add_argument("--lr", type=float, help="learning rate (default 0.1)")
        p.add_argument("--epochs", type=int, help="maximum epochs (default 2000)")
        p.add_argument("--patience", type=int, help="early-stop patience in epochs (default 100)")
        p.add_argument("--init-scale", dest="init_scale", type=float, help="initial weight range (default 0.5)")
    if ga:
        p.add_argument("--ga", dest="ga", action=argparse.BooleanOptionalAction, default=None,
                       help="run the genetic input search (default on)")
        p.add_argument("--pop", type=int, help="GA population size (default 12)")
        p.add_argument("--gens", type=int, help="GA generations (default 10)")
        p.add_argument("--workers", type=int, help="processes for GA fitness evaluation (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("oracle", help="classify records with the ladder")
    p.add_argument("--ladder", required=True)
    p.add_argument("--records", required=True, help="records CSV")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gen-examples", help="generate a condition-covering dataset")
    _add_common(p, gen=True)
    p.set_defaults(func=cmd_gen_examples)

    p = sub.add_parser("split", help="stratified train/test/blind split")
    _add_common(p, split=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a network")
    _add_common(p, nn=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mask", help="0/1 input mask in ladder variable order")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evolve", help="genetic search over input subsets")
    _add_common(p, nn=True, ga=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("blind-test", help="evaluate a network on the blind split")
    _add_common(p)
    p.add_argument("--network", required=True)
    p.add_argument("--blind", required=True)
    p.set_defaults(func=cmd_blind_test)

    p = sub.add_parser("census", help="function-class census of a formula corpus")
    p.add_argument("--formulas", required=True, help="CSV with header workbook_id,formula")
    p.add_argument("--class-map", dest="class_map", help="class_name,FUNCTION_NAME CSV (default: shipped partial map)")
    p.add_argument("--strict", action="store_true", help="require the full vendor class counts")
    p.add_argument("--metric", choices=("both", "occurrences", "presence"), default="both")
    p.set_defaults(func=cmd_census)

    p = sub.add_parser("run-edm", help="full pipeline from ladder to blind-test report")
    _add_common(p, gen=True, split=True, nn=True, ga=True)
    p.set_defaults(func=cmd_run_edm)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EDMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
