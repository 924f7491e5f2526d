"""Command line entry point: ``tsflab <subcommand> ...``."""

import argparse
import json
import logging
import sys
from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from TsfLab import pipeline
from TsfLab.attack_sim import PATTERN_SHAPES, TRIGGER_KINDS, PoisonRecord
from TsfLab.config import ExperimentConfig, config_from_mapping, parse_config
from TsfLab.defense import ABLATIONS, SWEEPABLE
from TsfLab.errors import ConfigError, TsfLabError
from TsfLab.forecaster import Checkpoint
from TsfLab.kernel_oracle import run_bound_suite
from TsfLab.series_core import SplitSpec, WindowSpec, ingest_csv, write_csv

logger = getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_ERROR = 2


def _base_config(args: argparse.Namespace) -> ExperimentConfig:
    config = parse_config(args.config) if args.config else config_from_mapping({})
    changes: Dict[str, Any] = {}
    if getattr(args, "data", None):
        changes["data"] = args.data
    if getattr(args, "no_header", False):
        changes["has_header"] = False
    if getattr(args, "out", None):
        changes["out"] = args.out
    l_in = getattr(args, "l_in", None)
    l_out = getattr(args, "l_out", None)
    if l_in is not None or l_out is not None:
        window = WindowSpec(
            l_in=config.window.l_in if l_in is None else l_in,
            l_out=config.window.l_out if l_out is None else l_out,
        )
        changes["window"] = window
        changes["attack"] = config.attack.fitted_to(window)
    if getattr(args, "split", None):
        changes["split"] = SplitSpec.from_string(args.split)
    return replace(config, **changes) if changes else config


def _split_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _print_json(data: Dict[str, Any]) -> None:
    print(json.dumps(pipeline.to_jsonable(data), indent=2, sort_keys=True))


def _load_record(path: Optional[str]) -> Optional[PoisonRecord]:
    if not path:
        return None
    try:
        return PoisonRecord.load(path)
    except (OSError, KeyError, ValueError) as exception:
        raise ConfigError(f"cannot read poison record: {exception}", field="poison-record") from None


def cmd_ingest(args: argparse.Namespace) -> int:
    dataset = ingest_csv(args.data, has_header=not args.no_header)
    _print_json(
        {
            "n_steps": dataset.n_steps,
            "n_channels": dataset.n_channels,
            "channels": list(dataset.channel_names),
        }
    )
    return EXIT_OK


def cmd_poison(args: argparse.Namespace) -> int:
    config = _base_config(args)
    overrides = {
        "trigger_kind": args.attack,
        "shape": args.shape,
        "eta_t": args.eta_t,
        "eta_s": args.eta_s,
        "l_tgr": args.l_tgr,
        "l_ptn": args.l_ptn,
        "delta_tgr": args.delta,
        "amplitude": args.amplitude,
        "seed": args.seed,
    }
    updates = {key: value for key, value in overrides.items() if value is not None}
    try:
        attack = replace(config.attack, **updates).fitted_to(config.window)
    except ValueError as exception:
        raise ConfigError(str(exception), field="attack") from exception
    config = replace(config, attack=attack)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    poisoned, record = pipeline.poison_dataset(config, pipeline.load_dataset(config))
    write_csv(poisoned, out / pipeline.POISONED_CSV)
    record.save(out / pipeline.POISON_RECORD, config.provenance())
    logger.info(f"wrote {out / pipeline.POISONED_CSV} and {out / pipeline.POISON_RECORD}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _base_config(args)
    if args.epochs is not None:
        config = replace(config, undefended_epochs=args.epochs)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    data = pipeline.training_data(pipeline.load_dataset(config), config)
    checkpoint, _ = pipeline.train_undefended(data, config)
    checkpoint.save(out / pipeline.MODEL_UNDEFENDED, config.provenance())
    return EXIT_OK


def _ablations(text: Optional[str]) -> List[str]:
    names = _split_list(text) if text else []
    unknown = [name for name in names if name not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablations {unknown}; valid: {list(ABLATIONS)}", field="ablate")
    return names


def cmd_defend(args: argparse.Namespace) -> int:
    config = pipeline.with_defense(
        _base_config(args),
        alpha=args.alpha,
        beta=args.beta,
        pi=args.pi,
        k=args.k,
        t_b=args.t_b,
        t1=args.t1,
        t2=args.t2,
        seed=args.seed,
    )
    defense = config.defense.with_ablations(_ablations(args.ablate))
    config = replace(config, defense=defense)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    record = _load_record(args.poison_record)
    data = pipeline.training_data(pipeline.load_dataset(config), config, record)
    checkpoint, result = pipeline.train_defended(data, config, defense)
    provenance = config.provenance()
    checkpoint.save(out / pipeline.MODEL_DEFENDED, provenance)
    pipeline.write_json(result.pool_history(defense, provenance), out / pipeline.POOL_HISTORY)
    return EXIT_OK


def _load_checkpoint(path: str, field: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (OSError, KeyError, ValueError) as exception:
        raise ConfigError(f"cannot read checkpoint: {exception}", field=field) from None


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _base_config(args)
    checkpoint = _load_checkpoint(args.checkpoint, "checkpoint")
    record = _load_record(args.poison_record)
    windows = pipeline.holdout_windows(pipeline.load_dataset(config), config)
    report = pipeline.evaluate_checkpoint(checkpoint, windows, record)
    if args.baseline:
        baseline = pipeline.evaluate_checkpoint(
            _load_checkpoint(args.baseline, "baseline"), windows, record
        )
        report.fder = pipeline.rate_defense(baseline, report)
    if args.report:
        pipeline.write_json({**report.to_dict(), **config.provenance()}, args.report)
    else:
        _print_json({**report.to_dict(), **config.provenance()})
    return EXIT_OK


def cmd_analyze_neighbors(args: argparse.Namespace) -> int:
    config = _base_config(args)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    record = _load_record(args.poison_record)
    data = pipeline.training_data(pipeline.load_dataset(config), config, record)
    cache, stats = pipeline.analyze_neighbors(data, config, args.k, args.sigma)
    stats.to_csv(out / pipeline.NEIGHBORHOOD_STATS_CSV, index=False, lineterminator="\n")
    if args.dump:
        cache.dump(out / pipeline.NEIGHBOR_CACHE, config.provenance())
    return EXIT_OK


def cmd_check_bound(args: argparse.Namespace) -> int:
    summary = run_bound_suite(args.instances, args.seed)
    _print_json(summary.to_dict())
    return EXIT_OK if summary.passed else EXIT_FAILED_CHECK


def cmd_run(args: argparse.Namespace) -> int:
    config = _base_config(args)
    pipeline.run_pipeline(config, dry_run=args.dry_run)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _base_config(args)
    try:
        values = [float(value) for value in _split_list(args.values)]
    except ValueError:
        raise ConfigError(f"values must be numbers, got '{args.values}'", field="values") from None
    frame = pipeline.run_sweep(config, args.parameter, values)
    print(frame.to_csv(index=False, lineterminator="\n"), end="")
    return EXIT_OK


def _add_data_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--data", help="CSV file, or 'synthetic' for generated data")
    parser.add_argument("--no-header", action="store_true", help="the CSV has no header row")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--l-in", type=int, help="history length (default 12)")
    parser.add_argument("--l-out", type=int, help="forecast horizon (default 12)")
    parser.add_argument("--split", help="train,val,test fractions (default 0.6,0.2,0.2)")


def build_parser() -> argparse.ArgumentParser:  # pylint: disable=too-many-statements
    parser = argparse.ArgumentParser(
        prog="tsflab",
        description="Backdoor poisoning and reliable-pool defense for time-series forecasting.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="validate a CSV file and print its shape")
    ingest.add_argument("data")
    ingest.add_argument("--no-header", action="store_true")
    ingest.set_defaults(handler=cmd_ingest)

    poison = commands.add_parser("poison", help="poison the training segment of a dataset")
    _add_data_options(poison)
    poison.add_argument("--attack", choices=TRIGGER_KINDS)
    poison.add_argument("--shape", choices=PATTERN_SHAPES)
    poison.add_argument("--eta-t", type=float)
    poison.add_argument("--eta-s", type=float)
    poison.add_argument("--l-tgr", type=int)
    poison.add_argument("--l-ptn", type=int)
    poison.add_argument("--delta", type=float)
    poison.add_argument("--amplitude", type=float)
    poison.add_argument("--seed", type=int)
    poison.set_defaults(handler=cmd_poison)

    train = commands.add_parser("train", help="train an undefended forecaster")
    _add_data_options(train)
    train.add_argument("--epochs", type=int)
    train.set_defaults(handler=cmd_train)

    defend = commands.add_parser("defend", help="train a forecaster with the reliable-pool defense")
    _add_data_options(defend)
    defend.add_argument("--alpha", type=float)
    defend.add_argument("--beta", type=float)
    defend.add_argument("--pi", type=float)
    defend.add_argument("--k", type=int)
    defend.add_argument("--t-b", type=int)
    defend.add_argument("--t1", type=int)
    defend.add_argument("--t2", type=int)
    defend.add_argument("--ablate", help=f"comma separated subset of {','.join(ABLATIONS)}")
    defend.add_argument("--seed", type=int)
    defend.add_argument("--poison-record", help="poison_record.json for pool diagnostics")
    defend.set_defaults(handler=cmd_defend)

    evaluate = commands.add_parser("evaluate", help="MAE_C / MAE_P of a checkpoint")
    _add_data_options(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--poison-record")
    evaluate.add_argument("--baseline", help="undefended checkpoint; adds FDER")
    evaluate.add_argument("--report", help="write the report here instead of stdout")
    evaluate.set_defaults(handler=cmd_evaluate)

    neighbors = commands.add_parser(
        "analyze-neighbors", help="neighborhood score statistics per window label"
    )
    _add_data_options(neighbors)
    neighbors.add_argument("--k", type=int, default=20)
    neighbors.add_argument("--sigma", type=float, default=2.0)
    neighbors.add_argument("--poison-record")
    neighbors.add_argument("--dump", action="store_true", help="also write neighbor_cache.json")
    neighbors.set_defaults(handler=cmd_analyze_neighbors)

    bound = commands.add_parser("check-bound", help="randomized check of the kernel bound")
    bound.add_argument("--instances", type=int, default=1000)
    bound.add_argument("--seed", type=int, default=0)
    bound.set_defaults(handler=cmd_check_bound)

    run = commands.add_parser("run", help="full poison / train / defend / evaluate pipeline")
    _add_data_options(run)
    run.add_argument("--dry-run", action="store_true", help="validate the configuration only")
    run.set_defaults(handler=cmd_run)

    sweep = commands.add_parser("sweep", help="defense sensitivity to one parameter")
    _add_data_options(sweep)
    sweep.add_argument("--parameter", required=True, choices=SWEEPABLE)
    sweep.add_argument("--values", required=True, help="comma separated values")
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(name)s: %(message)s")
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except TsfLabError as exception:
        logger.error(str(exception))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
