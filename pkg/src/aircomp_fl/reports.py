"""Run artifacts: metric and bound CSVs, a JSON summary, stored scheduling
summaries and SVG plots.

A run directory holds everything needed to recompute its bound trace later:
decisions.parquet keeps the per-iteration inputs of A_t and B_t, and
summary.json echoes the config the run used.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterator, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pyarrow as pa  # noqa: E402
import pyarrow.csv as pacsv  # noqa: E402
import pyarrow.parquet as pq  # noqa: E402

from aircomp_fl.bounds import (  # noqa: E402
    BoundConstants,
    BoundTrace,
    IterationBoundInputs,
    build_bound_trace,
)
from aircomp_fl.data import SyntheticRegressionSpec  # noqa: E402
from aircomp_fl.errors import ReportError  # noqa: E402

if TYPE_CHECKING:
    from aircomp_fl.experiments import ExperimentResult, MetricTrace

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
BOUNDS_FILE = "bounds.csv"
SUMMARY_FILE = "summary.json"
DECISIONS_FILE = "decisions.parquet"
FIT_FILE = "fit.csv"

_DECISIONS_META_KEY = b"aircomp_fl"


@dataclass(frozen=True)
class RunPaths:
    run_dir: Path

    @property
    def metrics(self) -> Path:
        return self.run_dir / METRICS_FILE

    @property
    def bounds(self) -> Path:
        return self.run_dir / BOUNDS_FILE

    @property
    def summary(self) -> Path:
        return self.run_dir / SUMMARY_FILE

    @property
    def decisions(self) -> Path:
        return self.run_dir / DECISIONS_FILE


def run_dir_name(policy: str, seed: int) -> str:
    return f"{policy}-seed{seed}"


def write_csv(table: pa.Table, path: Path) -> Path:
    """Plain, unquoted CSV with the table's column names as the header line."""
    options = pacsv.WriteOptions(include_header=False, quoting_style="none")
    try:
        with path.open("wb") as f:
            f.write((",".join(table.column_names) + "\n").encode("utf-8"))
            pacsv.write_csv(table, f, write_options=options)
    except (OSError, pa.ArrowException) as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    logger.debug("Wrote %s", path)
    return path


def read_csv(path: Path) -> pa.Table:
    try:
        return pacsv.read_csv(path)
    except (OSError, pa.ArrowException) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e


def write_summary(summary: Mapping[str, Any], path: Path) -> Path:
    try:
        text = json.dumps(summary, indent=2, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8")
    except ValueError as e:
        raise ReportError(f"Summary for {path} holds a non-finite number: {e}") from e
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    logger.debug("Wrote %s", path)
    return path


def read_summary(path: Path) -> dict[str, Any]:
    try:
        loaded: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e
    return loaded


def _finite_or_none(value: float | None) -> float | None:
    if value is None or math.isinf(value) or math.isnan(value):
        return None
    return value


def decisions_table(result: ExperimentResult) -> pa.Table:
    """Per iteration, the parts of (b_t, beta_t) the bound coefficients use."""
    records = result.trace.records
    inputs = [r.bound_inputs for r in records]
    initial_gap = result.initial_gap
    table = pa.Table.from_pydict(
        {
            "t": pa.array([r.t for r in records], type=pa.int64()),
            "deselected": pa.array(
                [inp.deselected.tolist() for inp in inputs], type=pa.list_(pa.int64())
            ),
            "inverse_power_sum": pa.array(
                [_finite_or_none(inp.inverse_power_sum) for inp in inputs],
                type=pa.float64(),
            ),
            "all_deselected": pa.array(
                [math.isinf(inp.inverse_power_sum) for inp in inputs], type=pa.bool_()
            ),
            "noiseless": pa.array([inp.noiseless for inp in inputs], type=pa.bool_()),
            "grad_norm_sq": pa.array([r.grad_norm_sq for r in records], type=pa.float64()),
            "empirical_gap": pa.array(
                [r.empirical_gap for r in records], type=pa.float64()
            ),
        }
    )
    meta = {
        "sample_counts": [int(k) for k in result.scenario.sample_counts],
        "initial_gap": initial_gap,
    }
    return table.replace_schema_metadata({_DECISIONS_META_KEY: json.dumps(meta)})


def write_decisions(result: ExperimentResult, path: Path) -> Path:
    try:
        pq.write_table(decisions_table(result), path)
    except (OSError, pa.ArrowException) as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    logger.debug("Wrote %s", path)
    return path


@dataclass(frozen=True)
class StoredDecisions:
    inputs: list[IterationBoundInputs]
    initial_gap: float
    grad_norms_sq: list[float]
    empirical_gaps: list[float | None]

    def bound_trace(self) -> BoundTrace:
        return build_bound_trace(
            self.inputs, self.initial_gap, self.grad_norms_sq, self.empirical_gaps
        )


def load_decisions(path: Path, constants: BoundConstants) -> StoredDecisions:
    """Read decisions.parquet back into bound inputs under `constants`."""
    try:
        table = pq.read_table(path)
    except (OSError, pa.ArrowException) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e
    raw_meta = (table.schema.metadata or {}).get(_DECISIONS_META_KEY)
    if raw_meta is None:
        raise ReportError(f"{path} is not a stored aircomp_fl run")
    meta = json.loads(raw_meta)
    counts = np.asarray(meta["sample_counts"], dtype=np.int64)
    rows = table.to_pylist()
    inputs = [
        IterationBoundInputs(
            deselected=np.asarray(row["deselected"], dtype=np.int64),
            inverse_power_sum=(
                math.inf if row["all_deselected"] else float(row["inverse_power_sum"])
            ),
            sample_counts=counts,
            constants=constants,
            noiseless=bool(row["noiseless"]),
        )
        for row in rows
    ]
    return StoredDecisions(
        inputs=inputs,
        initial_gap=float(meta["initial_gap"]),
        grad_norms_sq=[float(row["grad_norm_sq"]) for row in rows],
        empirical_gaps=[row["empirical_gap"] for row in rows],
    )


def _iter_ok(values: Sequence[float | None]) -> Iterator[tuple[int, float]]:
    for t, v in enumerate(values, start=1):
        if v is not None and math.isfinite(v):
            yield t, v


def plot_traces(
    traces: Mapping[str, MetricTrace], path: Path, column: str = "loss"
) -> Path:
    """One curve per labelled trace against the iteration index, as SVG."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    positive = True
    try:
        for label, trace in traces.items():
            values = trace.to_table()[column].to_pylist()
            points = list(_iter_ok(values))
            if not points:
                continue
            ts, ys = zip(*points)
            positive = positive and min(ys) > 0
            ax.plot(ts, ys, label=label, linewidth=1.2)
        if positive and column == "loss":
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(column)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.debug("Wrote %s", path)
    return path


def plot_sweep(summary: pa.Table, axis: str, path: Path, column: str) -> Path:
    """Seed-mean `column` against the swept value, one curve per policy."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        for policy in sorted(set(summary["policy"].to_pylist())):
            rows = [r for r in summary.to_pylist() if r["policy"] == policy]
            ax.plot(
                [r["value"] for r in rows],
                [r[column] for r in rows],
                marker="o",
                label=policy,
            )
        if axis == "noise_variance":
            ax.set_xscale("log")
        ax.set_xlabel(axis)
        ax.set_ylabel(column)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.debug("Wrote %s", path)
    return path


def fit_table(results: Sequence[ExperimentResult]) -> pa.Table:
    """Learned (slope, intercept) per regression run next to the generating line."""
    truth = SyntheticRegressionSpec()
    runs = [r for r in results if r.scenario.cfg.task == "linear_regression"]
    labels = [run_dir_name(r.scenario.cfg.policy, r.scenario.cfg.rng_seed) for r in runs]
    return pa.Table.from_pydict(
        {
            "run": [*labels, "ground_truth"],
            "slope": [*(float(r.final_model[0]) for r in runs), truth.slope],
            "intercept": [*(float(r.final_model[1]) for r in runs), truth.intercept],
        }
    )


def plot_fit(results: Sequence[ExperimentResult], path: Path) -> Path:
    """Training samples of the first run with each learned line and the true one."""
    truth = SyntheticRegressionSpec()
    runs = [r for r in results if r.scenario.cfg.task == "linear_regression"]
    if not runs:
        raise ReportError("A fit plot needs at least one linear regression run")
    xs = np.linspace(*truth.x_range, 50)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        for data in runs[0].scenario.datasets:
            ax.scatter(data.inputs[:, 0], data.targets[:, 0], s=4, color="0.7")
        ax.plot(
            xs, truth.slope * xs + truth.intercept, "k--", linewidth=1.2, label="ground truth"
        )
        for r in runs:
            slope, intercept = r.final_model
            label = run_dir_name(r.scenario.cfg.policy, r.scenario.cfg.rng_seed)
            ax.plot(xs, slope * xs + intercept, linewidth=1.2, label=label)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.debug("Wrote %s", path)
    return path


def ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"Cannot create output directory {path}: {e}") from e
    return path


def emit_run(result: ExperimentResult, out_dir: Path) -> RunPaths:
    cfg = result.scenario.cfg
    paths = RunPaths(ensure_dir(out_dir / run_dir_name(cfg.policy, cfg.rng_seed)))
    write_csv(result.trace.to_table(), paths.metrics)
    write_csv(result.bounds.to_table(), paths.bounds)
    write_summary(result.summary(), paths.summary)
    write_decisions(result, paths.decisions)
    return paths


def emit_reports(
    results: Sequence[ExperimentResult], out_dir: Path | str, plots: bool = True
) -> list[Path]:
    """Write every run's files, then one comparison plot per metric."""
    out = ensure_dir(Path(out_dir))
    written: list[Path] = []
    for result in results:
        paths = emit_run(result, out)
        written.extend([paths.metrics, paths.bounds, paths.summary, paths.decisions])
    regression = any(r.scenario.cfg.task == "linear_regression" for r in results)
    if regression:
        written.append(write_csv(fit_table(results), out / FIT_FILE))
    if plots and results:
        traces = {
            run_dir_name(r.scenario.cfg.policy, r.scenario.cfg.rng_seed): r.trace
            for r in results
        }
        written.append(plot_traces(traces, out / "loss.svg", "loss"))
        if any(r.final_accuracy is not None for r in results):
            written.append(plot_traces(traces, out / "accuracy.svg", "accuracy"))
        if regression:
            written.append(plot_fit(results, out / "fit.svg"))
    logger.info("Wrote %d files to %s", len(written), out)
    return written
