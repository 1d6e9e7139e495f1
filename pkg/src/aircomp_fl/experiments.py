from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from time import perf_counter
from typing import Any, ClassVar, Literal, NamedTuple, Sequence, get_args

import numpy as np
import numpy.typing as npt
import pyarrow as pa
import pyarrow.compute as pc

from aircomp_fl.bounds import (
    BoundConstants,
    BoundTrace,
    IterationBoundInputs,
    QuadraticCertificate,
    build_bound_trace,
    certify_quadratic_constants,
    check_convex_convergence,
    coeff_A,
    coeff_B,
)
from aircomp_fl.channel import (
    ReceivedSignal,
    SchedulingDecision,
    assert_power_cap,
    draw_channel,
    ps_estimate,
    superpose,
    transmit_amplitudes,
)
from aircomp_fl.core import (
    ModelParams,
    PolicyKind,
    RngStreams,
    ScenarioConfig,
    WorkerProfile,
    check_model,
    config_to_dict,
    derive_stream,
    snr_db,
)
from aircomp_fl.data import (
    MnistArrays,
    SyntheticRegressionSpec,
    gen_synthetic,
    gen_synthetic_digits,
    partition_mnist,
    split_arrays,
    to_dataset,
)
from aircomp_fl.errors import AggregationError, ConfigError, ShapeError, UnboundedGapError
from aircomp_fl.learning import (
    Dataset,
    TaskModel,
    create_task,
    global_loss,
    ideal_global_aggregate,
    local_update,
)
from aircomp_fl.reports import emit_reports
from aircomp_fl.scheduler import (
    ObjectiveConstants,
    compute_eta,
    entry_caps,
    random_schedule,
    schedule_entries,
)

logger = logging.getLogger(__name__)

SweepAxis = Literal["num_workers", "noise_variance", "samples_per_worker"]
SWEEP_AXES: tuple[SweepAxis, ...] = get_args(SweepAxis)
POLICIES: tuple[PolicyKind, ...] = get_args(PolicyKind)

METRIC_COLUMNS = ("t", "loss", "accuracy", "selected_mean", "b_mean", "A_t", "B_t")


class MnistSource(NamedTuple):
    train: MnistArrays
    test: MnistArrays | None = None


@dataclass(frozen=True)
class Scenario:
    """The static side of a run: data, workers and derived constants."""

    cfg: ScenarioConfig
    task: TaskModel
    workers: list[WorkerProfile]
    test_set: Dataset
    streams: RngStreams
    certificate: QuadraticCertificate | None = None

    @property
    def datasets(self) -> list[Dataset]:
        return [w.dataset for w in self.workers]

    @property
    def sample_counts(self) -> npt.NDArray[np.int64]:
        return np.array([w.sample_count for w in self.workers], dtype=np.int64)

    @property
    def max_powers(self) -> npt.NDArray[np.float64]:
        return np.array([w.max_power for w in self.workers], dtype=np.float64)

    @property
    def objective_constants(self) -> ObjectiveConstants:
        return ObjectiveConstants(
            lipschitz=self.cfg.lipschitz,
            noise_variance=self.cfg.noise_variance,
            rho1=self.cfg.rho1,
            total_samples=int(self.sample_counts.sum()),
        )

    @property
    def bound_constants(self) -> BoundConstants:
        return BoundConstants.from_config(self.cfg)


def build_scenario(cfg: ScenarioConfig, mnist: MnistSource | None = None) -> Scenario:
    cfg = cfg.validated()
    streams = RngStreams(cfg.rng_seed)
    data_stream = derive_stream(streams, "data", 0)
    test_stream = derive_stream(streams, "data", 1)
    task = create_task(cfg.task)
    certificate = None

    if cfg.task == "linear_regression":
        spec = SyntheticRegressionSpec(
            noise_scale=cfg.regression_noise_scale,
            samples_per_worker=cfg.samples_per_worker,
        )
        datasets = gen_synthetic(spec, cfg.num_workers, data_stream)
        test_set = spec.draw(cfg.regression_test_samples, test_stream)
        certificate = certify_quadratic_constants(datasets)
    else:
        datasets, test_set = _classification_data(cfg, mnist, data_stream, test_stream)

    powers = cfg.max_powers()
    workers = [
        WorkerProfile(worker_id=i + 1, dataset=d, max_power=float(powers[i]))
        for i, d in enumerate(datasets)
    ]
    return Scenario(cfg, task, workers, test_set, streams, certificate)


def _classification_data(
    cfg: ScenarioConfig,
    mnist: MnistSource | None,
    data_stream: np.random.Generator,
    test_stream: np.random.Generator,
) -> tuple[list[Dataset], Dataset]:
    low, high = cfg.mnist_total_samples
    if mnist is None:
        needed = high if cfg.partition_mode == "pooled" else high * cfg.num_workers
        digits = gen_synthetic_digits(needed + cfg.synthetic_test_samples, test_stream)
        train, test = split_arrays(digits, needed)
        logger.info("No MNIST files supplied; using synthetic digits")
    else:
        train, test_or_none = mnist
        if test_or_none is None:
            # held-out split: the tail of the training file is never partitioned
            keep = train.images.shape[0] - cfg.synthetic_test_samples
            if keep <= 0:
                raise ConfigError(["MNIST training file too small for a held-out split"])
            train, test = split_arrays(train, keep)
        else:
            test = test_or_none
    if cfg.test_limit is not None:
        test = MnistArrays(test.images[: cfg.test_limit], test.labels[: cfg.test_limit])
    _, datasets = partition_mnist(
        train.images,
        train.labels,
        cfg.num_workers,
        cfg.mnist_total_samples,
        data_stream,
        cfg.partition_mode,
    )
    return datasets, to_dataset(test.images, test.labels)


@dataclass
class SimulationState:
    t: int
    global_model: ModelParams
    prev_global: ModelParams | None = None
    received: ReceivedSignal | None = None
    decision: SchedulingDecision | None = None


class RoundOutcome(NamedTuple):
    global_model: ModelParams
    decision: SchedulingDecision | None
    received: ReceivedSignal | None
    clamped: int


def create_policy(kind: PolicyKind) -> AggregationPolicy:
    if kind == "perfect":
        return PerfectAggregation()
    if kind == "inflota":
        return InflotaPolicy()
    if kind == "random":
        return RandomPolicy()
    raise ConfigError([f"Cannot create an aggregation policy of kind {kind!r}"])


class AggregationPolicy(ABC):
    """How the parameter server turns local models into the next global model."""

    kind: ClassVar[PolicyKind]

    @abstractmethod
    def aggregate(
        self,
        scenario: Scenario,
        state: SimulationState,
        local_models: npt.NDArray[np.float64],
    ) -> RoundOutcome:
        pass


class PerfectAggregation(AggregationPolicy):
    """Error-free averaging of every worker, the ideal baseline."""

    kind: ClassVar[PolicyKind] = "perfect"

    def aggregate(
        self,
        scenario: Scenario,
        state: SimulationState,
        local_models: npt.NDArray[np.float64],
    ) -> RoundOutcome:
        new_global = ideal_global_aggregate(list(local_models), scenario.sample_counts)
        return RoundOutcome(new_global, None, None, 0)


class ChannelPolicy(AggregationPolicy):
    """Uplink over the fading multiple-access channel; subclasses pick (b, beta)."""

    @abstractmethod
    def schedule(
        self,
        scenario: Scenario,
        state: SimulationState,
        gains: npt.NDArray[np.float64],
        eta: npt.NDArray[np.float64],
    ) -> SchedulingDecision:
        pass

    def aggregate(
        self,
        scenario: Scenario,
        state: SimulationState,
        local_models: npt.NDArray[np.float64],
    ) -> RoundOutcome:
        cfg = scenario.cfg
        t = state.t
        channel = draw_channel(
            cfg.num_workers,
            scenario.task.dim,
            derive_stream(scenario.streams, "channel", t),
            cfg.noise_variance,
            per_entry=cfg.per_entry_fading,
        )
        eta = compute_eta(state.global_model, state.prev_global, cfg.eta_mode, cfg.eta)
        decision = self.schedule(scenario, state, channel.gains, eta)
        if not np.all(decision.selection.any(axis=0)):
            raise AggregationError(f"All-deselected entry at iteration {t}")

        # downlink of (w_{t-1}, b_t, beta_t) is error-free; workers bound and send
        amplitudes, clamped = transmit_amplitudes(
            local_models, scenario.sample_counts, decision, channel, scenario.max_powers
        )
        assert_power_cap(amplitudes, scenario.max_powers)
        received = superpose(
            amplitudes, channel, derive_stream(scenario.streams, "noise", t)
        )
        new_global = ps_estimate(received, decision, scenario.sample_counts)
        n_clamped = int(clamped.sum())
        if n_clamped:
            logger.debug("Iteration %d: %d transmissions clamped at the cap", t, n_clamped)
        return RoundOutcome(new_global, decision, received, n_clamped)


class InflotaPolicy(ChannelPolicy):
    """Per-entry line search over the U candidate scaling factors."""

    kind: ClassVar[PolicyKind] = "inflota"

    def schedule(
        self,
        scenario: Scenario,
        state: SimulationState,
        gains: npt.NDArray[np.float64],
        eta: npt.NDArray[np.float64],
    ) -> SchedulingDecision:
        return schedule_entries(
            state.global_model,
            eta,
            gains,
            scenario.sample_counts,
            scenario.max_powers,
            scenario.objective_constants,
            scenario.cfg.b_ceiling,
        ).decision


class RandomPolicy(ChannelPolicy):
    """Random nonempty selection and a random feasible scaling factor per entry."""

    kind: ClassVar[PolicyKind] = "random"

    def schedule(
        self,
        scenario: Scenario,
        state: SimulationState,
        gains: npt.NDArray[np.float64],
        eta: npt.NDArray[np.float64],
    ) -> SchedulingDecision:
        caps, _ = entry_caps(
            state.global_model, eta, gains, scenario.sample_counts, scenario.max_powers
        )
        return random_schedule(
            caps,
            derive_stream(scenario.streams, "policy", state.t),
            scenario.cfg.b_ceiling,
            scenario.cfg.random_scaling_floor,
        )


@dataclass(frozen=True)
class MetricRecord:
    t: int
    loss: float
    accuracy: float | None
    selected_mean: float
    b_mean: float | None
    a_t: float
    b_t: float | None
    wall_clock: float
    test_loss: float | None
    grad_norm_sq: float
    clamped: int
    empirical_gap: float | None
    bound_inputs: IterationBoundInputs


@dataclass
class MetricTrace:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, record: MetricRecord) -> None:
        if self.records and record.t != self.records[-1].t + 1:
            raise ValueError(f"Record for t={record.t} follows t={self.records[-1].t}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def final(self) -> MetricRecord:
        return self.records[-1]

    def last_evaluated(self) -> MetricRecord | None:
        evaluated = [r for r in self.records if r.test_loss is not None]
        return evaluated[-1] if evaluated else None

    def to_table(self) -> pa.Table:
        return pa.Table.from_pydict(
            {
                "t": pa.array([r.t for r in self.records], type=pa.int64()),
                "loss": pa.array([r.loss for r in self.records], type=pa.float64()),
                "accuracy": pa.array(
                    [r.accuracy for r in self.records], type=pa.float64()
                ),
                "selected_mean": pa.array(
                    [r.selected_mean for r in self.records], type=pa.float64()
                ),
                "b_mean": pa.array([r.b_mean for r in self.records], type=pa.float64()),
                "A_t": pa.array([r.a_t for r in self.records], type=pa.float64()),
                "B_t": pa.array([r.b_t for r in self.records], type=pa.float64()),
            }
        )


def _evaluate(scenario: Scenario, model: ModelParams) -> tuple[float, float | None]:
    return (
        scenario.task.loss(model, scenario.test_set),
        scenario.task.accuracy(model, scenario.test_set),
    )


def run_iteration(
    scenario: Scenario,
    state: SimulationState,
    policy: AggregationPolicy,
    started: float | None = None,
) -> tuple[SimulationState, MetricRecord]:
    """One round of the protocol.

    The PS holds w_{t-1}; it draws the channel, schedules every entry and
    broadcasts; workers take one gradient step and transmit the bounded
    amplitude; the superposed signal is post-processed into w_t, which is the
    estimate the next round starts from."""
    cfg = scenario.cfg
    w_prev = state.global_model
    counts = scenario.sample_counts
    local_models = np.stack(
        [
            local_update(w_prev, scenario.task, d, cfg.learning_rate)
            for d in scenario.datasets
        ]
    )
    gradients = (w_prev[None, :] - local_models) / cfg.learning_rate
    full_gradient = counts.astype(np.float64) @ gradients / counts.sum()

    outcome = policy.aggregate(scenario, state, local_models)
    try:
        w_t = check_model(outcome.global_model, scenario.task.dim)
    except ShapeError as e:
        raise AggregationError(f"Iteration {state.t} produced an invalid model: {e}") from e

    bound_inputs = IterationBoundInputs.from_decision(
        outcome.decision, counts, scenario.bound_constants
    )
    try:
        b_t: float | None = coeff_B(bound_inputs)
    except UnboundedGapError:
        b_t = None

    loss = global_loss(w_t, scenario.task, scenario.datasets)
    evaluate = state.t % cfg.eval_interval == 0 or state.t == cfg.num_iterations
    test_loss, accuracy = _evaluate(scenario, w_t) if evaluate else (None, None)
    decision = outcome.decision
    record = MetricRecord(
        t=state.t,
        loss=loss,
        accuracy=accuracy,
        selected_mean=(
            float(decision.selected_counts.mean())
            if decision is not None
            else float(cfg.num_workers)
        ),
        b_mean=float(decision.scaling.mean()) if decision is not None else None,
        a_t=coeff_A(bound_inputs),
        b_t=b_t,
        wall_clock=perf_counter() - started if started is not None else 0.0,
        test_loss=test_loss,
        grad_norm_sq=float(full_gradient @ full_gradient),
        clamped=outcome.clamped,
        empirical_gap=(
            loss - scenario.certificate.optimal_loss
            if scenario.certificate is not None
            else None
        ),
        bound_inputs=bound_inputs,
    )
    new_state = SimulationState(
        t=state.t + 1,
        global_model=w_t,
        prev_global=w_prev,
        received=outcome.received,
        decision=outcome.decision,
    )
    return new_state, record


@dataclass(frozen=True)
class ExperimentResult:
    scenario: Scenario
    trace: MetricTrace
    initial_model: ModelParams
    final_model: ModelParams
    initial_loss: float
    initial_gap: float
    bounds: BoundTrace
    trajectory: list[ModelParams] | None = None

    @property
    def final_loss(self) -> float:
        return self.trace.final.loss

    @property
    def final_test_loss(self) -> float:
        last = self.trace.last_evaluated()
        assert last is not None and last.test_loss is not None
        return last.test_loss

    @property
    def final_accuracy(self) -> float | None:
        last = self.trace.last_evaluated()
        return last.accuracy if last is not None else None

    def bound_trace(self, constants: BoundConstants) -> BoundTrace:
        """The run's bound trace recomputed under other constants."""
        records = self.trace.records
        return build_bound_trace(
            [replace(r.bound_inputs, constants=constants) for r in records],
            self.initial_gap,
            grad_norms_sq=[r.grad_norm_sq for r in records],
            empirical_gaps=[r.empirical_gap for r in records],
        )

    def summary(self) -> dict[str, Any]:
        cfg = self.scenario.cfg
        convex = check_convex_convergence(cfg)
        snr = cfg.linear_snr()
        cumulative = self.bounds.cumulative[-1] if len(self.bounds) else None
        return {
            "policy": cfg.policy,
            "task": cfg.task,
            "seed": cfg.rng_seed,
            "iterations": len(self.trace),
            "sample_counts": [int(k) for k in self.scenario.sample_counts],
            "initial_loss": self.initial_loss,
            "initial_gap": self.initial_gap,
            "final_loss": self.final_loss,
            "final_test_loss": self.final_test_loss,
            "final_accuracy": self.final_accuracy,
            "final_model": [float(v) for v in self.final_model],
            "final_cumulative_bound": cumulative,
            "final_nonconvex_bound": self.bounds.nonconvex[-1] if len(self.bounds) else None,
            "convex_convergence": {"certified": convex.converges, "margin": convex.margin},
            "clamped_transmissions": sum(r.clamped for r in self.trace.records),
            "wall_clock_seconds": self.trace.final.wall_clock,
            "snr": {
                "linear": None if math.isinf(snr) else snr,
                "db": None if math.isinf(snr) else snr_db(snr),
            },
            "config": config_to_dict(cfg),
        }


def run_experiment(
    cfg: ScenarioConfig,
    mnist: MnistSource | None = None,
    scenario: Scenario | None = None,
    out_dir: Path | None = None,
    keep_models: bool = False,
) -> ExperimentResult:
    """Run T rounds of one policy and collect metrics and the bound trace.

    With `out_dir` set the run's CSVs, summary and plots are written there;
    `keep_models` keeps every global model w_0 .. w_T on the result."""
    scenario = scenario if scenario is not None else build_scenario(cfg, mnist)
    cfg = scenario.cfg
    policy = create_policy(cfg.policy)
    w0 = scenario.task.init_params(derive_stream(scenario.streams, "data", 2))
    initial_loss = global_loss(w0, scenario.task, scenario.datasets)
    logger.info(
        "Running %s on %s: U=%d D=%d T=%d seed=%d",
        cfg.policy,
        cfg.task,
        cfg.num_workers,
        scenario.task.dim,
        cfg.num_iterations,
        cfg.rng_seed,
    )

    started = perf_counter()
    state = SimulationState(t=1, global_model=w0)
    trace = MetricTrace()
    trajectory = [w0] if keep_models else None
    log_every = max(1, cfg.num_iterations // 10)
    for _ in range(cfg.num_iterations):
        state, record = run_iteration(scenario, state, policy, started)
        trace.append(record)
        if trajectory is not None:
            trajectory.append(state.global_model)
        if record.t % log_every == 0:
            logger.info(
                "t=%d loss=%.6g accuracy=%s", record.t, record.loss, record.accuracy
            )

    if scenario.certificate is not None:
        initial_gap = initial_loss - scenario.certificate.optimal_loss
    else:
        # losses are nonnegative, so F(w0) bounds F(w0) - F(w*)
        initial_gap = initial_loss
    initial_gap = max(initial_gap, 0.0)
    bounds = build_bound_trace(
        [r.bound_inputs for r in trace.records],
        initial_gap,
        grad_norms_sq=[r.grad_norm_sq for r in trace.records],
        empirical_gaps=[r.empirical_gap for r in trace.records],
    )
    result = ExperimentResult(
        scenario=scenario,
        trace=trace,
        initial_model=w0,
        final_model=state.global_model,
        initial_loss=initial_loss,
        initial_gap=initial_gap,
        bounds=bounds,
        trajectory=trajectory,
    )
    logger.info(
        "Finished %s: final loss %.6g in %.1fs",
        cfg.policy,
        result.final_loss,
        trace.final.wall_clock,
    )
    if out_dir is not None:
        emit_reports([result], out_dir)
    return result


def apply_sweep_value(cfg: ScenarioConfig, axis: SweepAxis, value: float) -> ScenarioConfig:
    """The config with one axis moved; samples sweep around an average +-20%."""
    if axis == "num_workers":
        if isinstance(cfg.max_power, tuple):
            raise ConfigError(["Sweeping num_workers needs a scalar max_power"])
        return replace(cfg, num_workers=int(value))
    if axis == "noise_variance":
        return replace(cfg, noise_variance=float(value))
    if axis == "samples_per_worker":
        low, high = max(1, round(0.8 * value)), max(1, round(1.2 * value))
        if cfg.task == "mlp_classifier":
            return replace(cfg, mnist_total_samples=(low, high), partition_mode="per_worker")
        return replace(cfg, samples_per_worker=(low, high))
    raise ConfigError([f"Unknown sweep axis {axis!r}"])


def run_sweep(
    cfg: ScenarioConfig,
    axis: SweepAxis,
    values: Sequence[float],
    seeds: Sequence[int],
    policies: Sequence[PolicyKind] = POLICIES,
    mnist: MnistSource | None = None,
) -> pa.Table:
    """One row per (value, policy, seed) with the final train and held-out losses."""
    rows: dict[str, list[Any]] = {
        "value": [],
        "policy": [],
        "seed": [],
        "final_loss": [],
        "final_test_loss": [],
        "final_accuracy": [],
    }
    for value in values:
        for seed in seeds:
            base = replace(apply_sweep_value(cfg, axis, value), rng_seed=seed)
            scenario = build_scenario(base, mnist)
            for policy in policies:
                result = run_experiment(
                    base, scenario=replace(scenario, cfg=replace(base, policy=policy))
                )
                rows["value"].append(float(value))
                rows["policy"].append(policy)
                rows["seed"].append(seed)
                rows["final_loss"].append(result.final_loss)
                rows["final_test_loss"].append(result.final_test_loss)
                rows["final_accuracy"].append(result.final_accuracy)
            logger.info("Sweep %s=%s seed=%d done", axis, value, seed)
    return pa.Table.from_pydict(
        {
            "value": pa.array(rows["value"], type=pa.float64()),
            "policy": pa.array(rows["policy"], type=pa.string()),
            "seed": pa.array(rows["seed"], type=pa.int64()),
            "final_loss": pa.array(rows["final_loss"], type=pa.float64()),
            "final_test_loss": pa.array(rows["final_test_loss"], type=pa.float64()),
            "final_accuracy": pa.array(rows["final_accuracy"], type=pa.float64()),
        }
    )


def summarize_sweep(table: pa.Table) -> pa.Table:
    """Seed means and medians per (value, policy), sorted by policy then value.

    Channel noise is heavy tailed under fading, so a single deep fade can move
    a seed mean; the medians track the typical run."""
    return (
        table.group_by(["policy", "value"])
        .aggregate(
            [
                ("final_loss", "mean"),
                ("final_test_loss", "mean"),
                ("final_accuracy", "mean"),
                ("final_loss", "approximate_median"),
                ("final_test_loss", "approximate_median"),
            ]
        )
        .sort_by([("policy", "ascending"), ("value", "ascending")])
    )


def policy_means(summary: pa.Table, policy: PolicyKind, column: str) -> list[float]:
    rows = summary.filter(pc.equal(summary["policy"], policy))
    return [float(v) for v in rows[column].to_pylist()]


def count_inversions(
    values: Sequence[float], direction: Literal["nonincreasing", "nondecreasing"]
) -> int:
    """Adjacent pairs that break the expected trend."""
    sign = -1.0 if direction == "nonincreasing" else 1.0
    return sum(
        1 for prev, nxt in zip(values, values[1:]) if sign * (nxt - prev) < 0
    )
