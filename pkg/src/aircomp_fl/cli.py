from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence, get_args

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from aircomp_fl.bounds import BoundConstants
from aircomp_fl.core import (
    PolicyKind,
    Profile,
    RngStreams,
    ScenarioConfig,
    TaskKind,
    config_from_mapping,
    default_config,
    derive_stream,
    load_config,
)
from aircomp_fl.data import load_mnist
from aircomp_fl.errors import AircompError, ConfigError, SchedulerError
from aircomp_fl.experiments import (
    POLICIES,
    SWEEP_AXES,
    ExperimentResult,
    MnistSource,
    build_scenario,
    count_inversions,
    policy_means,
    run_experiment,
    run_sweep,
    summarize_sweep,
)
from aircomp_fl.reports import (
    BOUNDS_FILE,
    DECISIONS_FILE,
    SUMMARY_FILE,
    emit_reports,
    ensure_dir,
    load_decisions,
    plot_sweep,
    read_summary,
    write_csv,
)
from aircomp_fl.scheduler import oracle_check

logger = logging.getLogger("aircomp_fl")

console = Console()


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    handler = RichHandler(console=Console(stderr=True), show_path=False)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def _scenario_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML scenario file")
    parser.add_argument(
        "--task", choices=get_args(TaskKind), help="Learning task"
    )
    parser.add_argument(
        "--profile",
        choices=get_args(Profile),
        help="Scenario scale; picks defaults when no --config is given",
    )
    parser.add_argument("--seed", type=int, help="Root random seed")
    parser.add_argument("--iterations", type=int, help="Number of iterations T")
    parser.add_argument("--workers", type=int, help="Number of workers U")
    parser.add_argument("--noise-variance", type=float, help="Channel noise sigma^2 (mW)")
    parser.add_argument("--mnist-images", type=Path, help="MNIST training images (IDX)")
    parser.add_argument("--mnist-labels", type=Path, help="MNIST training labels (IDX)")
    parser.add_argument("--mnist-test-images", type=Path, help="MNIST test images (IDX)")
    parser.add_argument("--mnist-test-labels", type=Path, help="MNIST test labels (IDX)")
    parser.add_argument(
        "--out-dir", type=Path, default=Path("runs"), help="Output directory"
    )
    parser.add_argument("--no-plots", action="store_true", help="Skip SVG plots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aircomp-fl",
        description="Simulate federated learning over an analog-aggregation uplink.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a single scenario")
    _scenario_args(run)
    run.add_argument(
        "--policy",
        choices=[*POLICIES, "all"],
        help="Aggregation policy, or all three on the same data",
    )

    sweep = sub.add_parser("sweep", help="Vary one config axis over several seeds")
    _scenario_args(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument(
        "--values",
        required=True,
        help="Comma-separated values, e.g. 10,20,30,40",
    )
    sweep.add_argument("--seeds", type=int, default=5, help="Seeds per value")
    sweep.add_argument(
        "--policy",
        choices=POLICIES,
        action="append",
        help="Restrict to these policies (repeatable)",
    )

    check = sub.add_parser("oracle-check", help="Compare the scheduler with brute force")
    check.add_argument("--instances", type=int, default=1000)
    check.add_argument("--min-workers", type=int, default=2)
    check.add_argument("--max-workers", type=int, default=12)
    check.add_argument("--seed", type=int, default=0)

    bounds = sub.add_parser("bounds", help="Recompute the bound trace of a stored run")
    bounds.add_argument("run_dir", type=Path, help="Directory written by `run`")
    bounds.add_argument("--config", type=Path, help="Take constants from this file")
    bounds.add_argument("--lipschitz", type=float)
    bounds.add_argument("--strong-convexity", type=float)
    bounds.add_argument("--rho1", type=float)
    bounds.add_argument("--rho2", type=float)
    bounds.add_argument("--out-dir", type=Path, help="Defaults to the run directory")
    return parser


def config_from_args(args: argparse.Namespace) -> ScenarioConfig:
    if args.config is not None:
        # the file picks its own task and profile defaults
        cfg = load_config(args.config).with_overrides(task=args.task, profile=args.profile)
    else:
        cfg = default_config(args.task or "linear_regression", args.profile or "desk")
    return cfg.with_overrides(
        rng_seed=args.seed,
        num_iterations=args.iterations,
        num_workers=args.workers,
        noise_variance=args.noise_variance,
    ).validated()


def mnist_from_args(args: argparse.Namespace) -> MnistSource | None:
    def pair(images: Path | None, labels: Path | None, what: str) -> bool:
        if (images is None) != (labels is None):
            raise ConfigError([f"{what} images and labels must be given together"])
        return images is not None

    has_train = pair(args.mnist_images, args.mnist_labels, "MNIST training")
    has_test = pair(args.mnist_test_images, args.mnist_test_labels, "MNIST test")
    if not has_train:
        if has_test:
            raise ConfigError(["MNIST test files need the training files too"])
        return None
    train = load_mnist(args.mnist_images, args.mnist_labels)
    test = load_mnist(args.mnist_test_images, args.mnist_test_labels) if has_test else None
    return MnistSource(train, test)


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.6g}"


def print_runs(results: Sequence[ExperimentResult]) -> None:
    table = Table(title="Final metrics")
    for name in ("policy", "seed", "loss", "test loss", "accuracy", "bound", "clamped"):
        table.add_column(name, justify="left" if name == "policy" else "right")
    for r in results:
        summary = r.summary()
        table.add_row(
            summary["policy"],
            str(summary["seed"]),
            _fmt(summary["final_loss"]),
            _fmt(summary["final_test_loss"]),
            _fmt(summary["final_accuracy"]),
            _fmt(summary["final_cumulative_bound"]),
            str(summary["clamped_transmissions"]),
        )
    console.print(table)


def cmd_run(args: argparse.Namespace) -> int:
    policies: Sequence[PolicyKind] = (
        POLICIES if args.policy == "all" else [args.policy] if args.policy else []
    )
    cfg = config_from_args(args)
    mnist = mnist_from_args(args)
    if not policies:
        policies = [cfg.policy]
    scenario = build_scenario(cfg, mnist)
    results = [
        run_experiment(cfg, scenario=replace(scenario, cfg=replace(cfg, policy=p)))
        for p in policies
    ]
    emit_reports(results, args.out_dir, plots=not args.no_plots)
    print_runs(results)
    return 0


def _parse_values(raw: str) -> list[float]:
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError([f"--values must be comma-separated numbers: {e}"]) from e
    if not values:
        raise ConfigError(["--values is empty"])
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    values = _parse_values(args.values)
    policies: Sequence[PolicyKind] = args.policy or POLICIES
    seeds = [cfg.rng_seed + i for i in range(args.seeds)]
    table = run_sweep(cfg, args.axis, values, seeds, policies, mnist_from_args(args))
    summary = summarize_sweep(table)

    out = ensure_dir(args.out_dir)
    write_csv(table, out / f"sweep_{args.axis}.csv")
    write_csv(summary, out / f"sweep_{args.axis}_summary.csv")
    column = "final_test_loss_mean"
    if not args.no_plots:
        plot_sweep(summary, args.axis, out / f"sweep_{args.axis}.svg", column)

    direction = "nondecreasing" if args.axis == "noise_variance" else "nonincreasing"
    rich_table = Table(title=f"Sweep over {args.axis} ({len(seeds)} seeds)")
    rich_table.add_column("policy")
    for v in values:
        rich_table.add_column(f"{v:g}", justify="right")
    rich_table.add_column(f"{direction} inversions", justify="right")
    for policy in policies:
        means = policy_means(summary, policy, column)
        rich_table.add_row(
            policy, *[_fmt(m) for m in means], str(count_inversions(means, direction))
        )
    console.print(rich_table)
    return 0


def cmd_oracle_check(args: argparse.Namespace) -> int:
    stream = derive_stream(RngStreams(args.seed), "policy", 0)
    result = oracle_check(args.instances, (args.min_workers, args.max_workers), stream)
    table = Table(title="Line search vs exhaustive search")
    table.add_column("instances", justify="right")
    table.add_column("passed", justify="right")
    table.add_column("failed", justify="right")
    table.add_row(str(args.instances), str(result.passed), str(result.failed))
    console.print(table)
    if result.failed:
        raise SchedulerError(f"{result.failed} of {args.instances} instances disagree")
    return 0


def cmd_bounds(args: argparse.Namespace) -> int:
    run_dir: Path = args.run_dir
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = config_from_mapping(read_summary(run_dir / SUMMARY_FILE)["config"])
    cfg = cfg.with_overrides(
        lipschitz=args.lipschitz,
        strong_convexity=args.strong_convexity,
        rho1=args.rho1,
        rho2=args.rho2,
    ).validated()
    stored = load_decisions(run_dir / DECISIONS_FILE, BoundConstants.from_config(cfg))
    trace = stored.bound_trace()
    out = ensure_dir(args.out_dir or run_dir)
    write_csv(trace.to_table(), out / BOUNDS_FILE)

    table = Table(title=f"Bounds for {run_dir}")
    for name in ("t", "A_t", "B_t", "cumulative", "empirical gap"):
        table.add_column(name, justify="right")
    if len(trace):
        last = len(trace) - 1
        table.add_row(
            str(last + 1),
            _fmt(trace.a[last]),
            _fmt(trace.b[last]),
            _fmt(trace.cumulative[last]),
            _fmt(trace.empirical_gap[last]),
        )
    console.print(table)
    return 0


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "oracle-check": cmd_oracle_check,
    "bounds": cmd_bounds,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(verbose=args.verbose, quiet=args.quiet)
    try:
        return COMMANDS[args.command](args)
    except AircompError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception:
        logger.exception("Unexpected error")
        return 1
