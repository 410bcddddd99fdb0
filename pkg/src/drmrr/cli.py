"""Command-line entry point.

Subcommands::

    drmrr validate CONFIG          check a config and summarize its dataset
    drmrr run CONFIG --out DIR     clean cross-validation
    drmrr attack-sweep CONFIG ...  cross-validation under the config's attacks
    drmrr report RECORDS --out DIR rebuild summary files from records.json

Flags given on the command line override the matching config fields.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace

import yaml

from .dataset import ParseError
from .harness import ConfigError, ExperimentConfig, emit_report, load_dataset, load_records, run_cv, summarize
from .solver import SolverError

log = logging.getLogger("drmrr")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drmrr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    overrides = argparse.ArgumentParser(add_help=False)
    overrides.add_argument("config", help="YAML experiment config")
    overrides.add_argument("--seed", type=int)
    overrides.add_argument("--folds", type=int)
    overrides.add_argument("--epsilons", type=_floats, help="epsilon grid, e.g. 0,0.01,0.1")
    overrides.add_argument("--K", type=int, dest="K", help="GTD length")
    overrides.add_argument("--K-grid", type=_ints, dest="K_grid", help="tune K over these values")
    overrides.add_argument("--ks", type=_ints, help="metric cutoffs, e.g. 5,10")
    overrides.add_argument("--r", type=float, help="loss norm order: 1, 2 or inf")

    sub.add_parser("validate", parents=[overrides], help="check a config and its dataset")
    for name, text in (("run", "clean cross-validation"), ("attack-sweep", "cross-validation under attacks")):
        p = sub.add_parser(name, parents=[overrides], help=text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--format", default="json,csv,runs", help="subset of json,csv,runs")

    p = sub.add_parser("report", help="rebuild summary files from records.json")
    p.add_argument("records", help="records.json from a previous run")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="csv")
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    changes = {k: getattr(args, k) for k in ("seed", "folds", "epsilons", "K_grid", "ks", "r")
               if getattr(args, k) is not None}
    if args.K is not None:
        changes["gtd"] = {**config.gtd, "K": args.K}
    return replace(config, **changes) if changes else config


def _formats(text: str) -> tuple[str, ...]:
    formats = tuple(f.strip() for f in text.split(",") if f.strip())
    bad = set(formats) - {"json", "csv", "runs"}
    if bad or not formats:
        raise ConfigError(f"unknown output formats {sorted(bad)}")
    return formats


def _print_summary(records, metric: str = "ndcg", k: int = 5) -> None:
    for row in summarize(records):
        if row["metric"] == metric and row["k"] == k:
            print(f"{row['model']:<10} {row['attack']:<15} {row['level']:<8g} {metric}@{k} {row['cell']}")


def cmd_validate(args) -> int:
    config = load_config(args)
    data = load_dataset(config)
    print(f"config hash  {config.config_hash()}")
    print(f"queries      {len(data)}")
    print(f"documents    {data.n_documents}")
    print(f"features     {data.p}")
    print(f"grades       0..{data.y_max}")
    print(f"folds        {len(set(data.folds.values()))}")
    print(f"epsilons     {config.epsilons}")
    print(f"attacks      {len(config.attack_specs())}")
    return 0


def cmd_run(args, with_attacks: bool) -> int:
    config = load_config(args)
    formats = _formats(args.format)
    attacks = config.attack_specs() if with_attacks else []
    if with_attacks and not attacks:
        raise ConfigError("config lists no attacks")
    start = time.perf_counter()
    records = run_cv(config, attacks)
    written = emit_report(records, args.out, formats)
    _print_summary(records)
    log.info("finished in %.1fs", time.perf_counter() - start)
    for kind, path in written.items():
        print(f"wrote {kind}: {path}")
    return 0


def cmd_report(args) -> int:
    records = load_records(args.records)
    written = emit_report(records, args.out, _formats(args.format))
    _print_summary(records)
    for kind, path in written.items():
        print(f"wrote {kind}: {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "report":
            return cmd_report(args)
        return cmd_run(args, with_attacks=args.command == "attack-sweep")
    except (ConfigError, ParseError, SolverError, OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"drmrr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
