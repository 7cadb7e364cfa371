"""Command line interface for memorized batch normalization experiments."""

import argparse
import csv
import itertools
import logging
import sys
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .bench import run_bench, write_bench
from .checkpoint import load_checkpoint, save_checkpoint
from .config import apply_overrides, load_config, write_resolved
from .data import load_dataset
from .errors import ArgumentError, ConfigError, FormatError, NumericError
from .models import RunConfig
from .norm import NormMode
from .oracle import GradReport, gradcheck_layer, gradcheck_mlp
from .template import write_config_template
from .train import RunRecord, build_network, evaluate, fit, format_value, write_metrics
from .validator import validate_config_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ERROR = 3

GRADCHECK_MODES = [mode.value for mode in NormMode] + ["mlp"]


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"1,2,5"`` or the inclusive range ``"1..5"``."""
    try:
        if ".." in text:
            first, last = (int(part) for part in text.split("..", 1))
            if last < first:
                raise argparse.ArgumentTypeError(f"Empty seed range '{text}'")
            return list(range(first, last + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Invalid seed list '{text}': {e}") from e


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        type=Path,
        help="Path to a flat key = value or YAML config file (default: built-in defaults)",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key, e.g. --set norm.mode=bn (can specify multiple times)",
    )
    parser.add_argument(
        "--out",
        type=Path,
        help="Output directory (overrides the config's out key)",
    )
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging (per-iteration details)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Memorized batch normalization: training, gradient checks and statistics benchmarks",
        prog="memorized-batchnorm",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    init_parser = subparsers.add_parser("init", help="Write the commented default config")
    init_parser.add_argument("--output", "-o", type=Path, default="/dev/stdout", help="Output config file path")
    init_parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Change a default"
    )

    validate_parser = subparsers.add_parser("validate", help="Validate a run configuration")
    validate_parser.add_argument("config_file", type=Path, help="Path to config file to validate (required)")
    validate_parser.add_argument(
        "--quiet", "-q", action="store_true", help="Only show errors (suppress warnings and success messages)"
    )

    train_parser = subparsers.add_parser("train", help="Train and write metrics.csv and config.resolved")
    _add_config_args(train_parser)
    train_parser.add_argument("--seeds", type=parse_seeds, help="Seed list or range, e.g. 1..5 (overrides seed)")
    train_parser.add_argument(
        "--sweep",
        nargs="+",
        action="append",
        default=[],
        metavar=("KEY", "VALUE"),
        help="Run every listed value of KEY, e.g. --sweep train.batch_size 8 128 (can specify multiple times)",
    )
    train_parser.add_argument("--workers", type=int, default=1, help="Parallel worker processes for sweeps")
    train_parser.add_argument("--checkpoint", action="store_true", help="Write <out>/model.ckpt (single run only)")

    gradcheck_parser = subparsers.add_parser("gradcheck", help="Check analytic gradients against finite differences")
    gradcheck_parser.add_argument("mode", choices=GRADCHECK_MODES, help="Normalization mode, or mlp for a network")
    gradcheck_parser.add_argument("--batch", type=int, default=4, help="Batch size")
    gradcheck_parser.add_argument("--features", type=int, default=3, help="Feature count")
    gradcheck_parser.add_argument("--memory", type=int, default=3, help="Memory entries (memory_k)")
    gradcheck_parser.add_argument("--lambda", dest="lam", type=float, default=0.5, help="Memory weight lambda")
    gradcheck_parser.add_argument("--seed", type=int, default=0, help="Random seed")
    gradcheck_parser.add_argument("--instances", type=int, default=20, help="Random instances per layer mode")
    gradcheck_parser.add_argument("--verbose", "-v", action="store_true", help="Print every instance")

    bench_parser = subparsers.add_parser("statsbench", help="Score statistics estimators on a drifting stream")
    _add_config_args(bench_parser)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint on the test split")
    _add_config_args(eval_parser)
    eval_parser.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint written by train")

    return parser


def _setup_logging(verbose: bool) -> None:
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=log_level, format="%(levelname)s: %(message)s", stream=sys.stderr)


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config, args.overrides)
    if args.out is not None:
        config = config.model_copy(update={"out": args.out})
    return config


def expand_runs(
    config: RunConfig, seeds: Sequence[int] | None = None, sweeps: Sequence[Sequence[str]] = ()
) -> list[RunConfig]:
    """One config per combination of swept values and seeds."""
    axes: list[list[tuple[str, str]]] = []
    for sweep in sweeps:
        if len(sweep) < 2:
            raise ConfigError(f"--sweep needs a key and at least one value, got {list(sweep)}")
        key, *values = sweep
        axes.append([(key, value) for value in values])

    runs = []
    for combo in itertools.product(*axes):
        overrides = dict(combo)
        if combo:
            tag = ",".join(f"{key.rsplit('.', 1)[-1]}={value}" for key, value in combo)
            overrides["tag"] = f"{config.tag},{tag}" if config.tag else tag
        for seed in seeds or [config.seed]:
            runs.append(apply_overrides(config, {**overrides, "seed": str(seed)}))
    return runs


def run_job(config: RunConfig) -> RunRecord:
    dataset = load_dataset(config.data, config.seed, drift_batch_size=config.train.batch_size)
    return fit(config, dataset)


def write_summary(records: Sequence[RunRecord], path: Path) -> None:
    """Final test error per run followed by the mean per (method, batch_size)."""
    groups: dict[tuple[str, int], list[float]] = defaultdict(list)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "batch_size", "seed", "test_error"])
        for record in sorted(records, key=lambda r: (r.method, r.batch_size, r.seed)):
            error = record.final_error("test")
            groups[(record.method, record.batch_size)].append(error)
            writer.writerow([record.method, record.batch_size, record.seed, format_value(error)])
        for (method, batch_size), errors in sorted(groups.items()):
            writer.writerow([method, batch_size, "mean", format_value(float(np.mean(errors)))])


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    runs = expand_runs(config, args.seeds, args.sweep)
    if args.checkpoint and len(runs) > 1:
        raise ConfigError("--checkpoint needs a single run, drop --seeds/--sweep")
    out = config.out
    out.mkdir(parents=True, exist_ok=True)

    if len(runs) == 1:
        run = runs[0]
        dataset = load_dataset(run.data, run.seed, drift_batch_size=run.train.batch_size)
        net = build_network(run, dataset.train.sample_shape, dataset.train.num_classes)
        records = [fit(run, dataset, net=net)]
        if args.checkpoint:
            save_checkpoint(net, out / "model.ckpt")
    elif args.workers > 1:
        logger.info("Running %d runs on %d workers", len(runs), args.workers)
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(run_job, runs))
    else:
        records = [run_job(run) for run in runs]

    write_resolved(runs[0], out / "config.resolved")
    if len(runs) > 1:
        resolved_dir = out / "resolved"
        resolved_dir.mkdir(exist_ok=True)
        for i, run in enumerate(runs):
            write_resolved(run, resolved_dir / f"run{i:03d}.resolved")
    write_metrics(records, out / "metrics.csv")
    write_summary(records, out / "summary.csv")
    logger.info("Wrote %s", out / "metrics.csv")
    return EXIT_OK


def _print_reports(reports: Sequence[GradReport], verbose: bool) -> bool:
    by_group: dict[str, list[GradReport]] = defaultdict(list)
    for report in reports:
        by_group[report.name.split("#", 1)[0]].append(report)
    for group, members in by_group.items():
        worst = max(members, key=lambda r: r.max_rel_error)
        failed = sum(not r.passed for r in members)
        status = "ok" if failed == 0 else "FAIL"
        print(f"{status:4} {group:<20} max_rel={worst.max_rel_error:.3e} failed={failed}/{len(members)}")
        if verbose:
            for report in members:
                print(f"     {report.format_line()}")

    failures = [r for r in reports if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.max_abs_error)
        print(f"\nWorst failure: {worst.format_line()}")
        for offender in worst.worst:
            print(
                f"  at {offender.index}: analytic={offender.analytic:.10g} "
                f"numeric={offender.numeric:.10g} abs_error={offender.abs_error:.3e}"
            )
    return not failures


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if min(args.batch, args.features, args.instances) < 1 or args.memory < 0:
        raise ArgumentError("--batch, --features and --instances must be positive, --memory non-negative")
    if args.mode == "mlp":
        reports = gradcheck_mlp(
            batch=args.batch, features=args.features, memory_k=args.memory, lam=args.lam, seed=args.seed
        )
    else:
        reports = gradcheck_layer(
            args.mode,
            batch=args.batch,
            features=args.features,
            memory_k=args.memory,
            lam=args.lam,
            seed=args.seed,
            instances=args.instances,
        )
    passed = _print_reports(reports, args.verbose)
    print("✅ Gradient check passed" if passed else "❌ Gradient check failed")
    return EXIT_OK if passed else EXIT_GRADCHECK_FAILED


def cmd_statsbench(args: argparse.Namespace) -> int:
    config = _load(args)
    config.out.mkdir(parents=True, exist_ok=True)
    scores = run_bench(config.bench, config.seed)
    write_bench(scores, config.out / "statsbench.csv")
    write_resolved(config, config.out / "config.resolved")
    for score in scores:
        print(f"{score.batch_size:>5} {score.estimator:<10} mse_mean={score.mse_mean:.4e} mse_var={score.mse_var:.4e}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args)
    dataset = load_dataset(config.data, config.seed, drift_batch_size=config.train.batch_size)
    net = build_network(config, dataset.test.sample_shape, dataset.train.num_classes)
    load_checkpoint(net, args.checkpoint)
    loss, error = evaluate(net, dataset.test, config.train.batch_size)
    print(f"test loss={format_value(loss)} error={format_value(error)}")
    return EXIT_OK


def run(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return the exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "init":
        overrides = dict(item.split("=", 1) for item in args.overrides if "=" in item)
        try:
            write_config_template(args.output, {k.strip(): v.strip() for k, v in overrides.items()})
        except ConfigError as e:
            print(f"ERROR: {e}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        return EXIT_OK

    if args.command == "validate":
        result = validate_config_file(args.config_file)
        report = result.format_report(quiet=args.quiet)
        if report:
            print(report)
        return EXIT_OK if result.is_valid else EXIT_CONFIG_ERROR

    commands = {"train": cmd_train, "gradcheck": cmd_gradcheck, "statsbench": cmd_statsbench, "eval": cmd_eval}
    if args.command not in commands:
        print("Usage:")
        print("  memorized-batchnorm init -o run.cfg")
        print("  memorized-batchnorm train --config run.cfg --set norm.mode=bn --seeds 1..5")
        print("  memorized-batchnorm gradcheck mbn --batch 4 --features 3 --memory 3 --seed 7")
        print("  memorized-batchnorm statsbench --config run.cfg")
        return EXIT_CONFIG_ERROR

    _setup_logging(args.verbose)
    try:
        return commands[args.command](args)
    except NumericError as e:
        logger.error("Numeric blow-up: %s", e)
        return EXIT_NUMERIC_ERROR
    except (ConfigError, ValidationError, FormatError, ArgumentError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG_ERROR


def main() -> None:
    """Main function."""
    sys.exit(run())


if __name__ == "__main__":
    main()
