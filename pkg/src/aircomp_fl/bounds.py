"""Convergence analytics for a simulated trace.

Per iteration the expected optimality gap obeys gap_t <= A_t gap_{t-1} + B_t in
the strongly convex case. A_t grows with deselected entries, B_t collects the
channel-noise and exclusion offsets. Everything here conditions on the realised
channels: (b, beta) are taken as given per iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import numpy.typing as npt
import pyarrow as pa

from aircomp_fl.channel import SchedulingDecision
from aircomp_fl.core import ModelParams, ScenarioConfig
from aircomp_fl.errors import ConfigError, ShapeError, UnboundedGapError
from aircomp_fl.learning import Dataset, LinearRegressionTask, TaskModel

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

BOUND_TRACE_COLUMNS = (
    "t",
    "A_t",
    "B_t",
    "Delta_t",
    "cumulative_bound",
    "empirical_gap",
    "convex_flag",
    "nonconvex_flag",
)


class BoundConstants(NamedTuple):
    lipschitz: float
    strong_convexity: float
    noise_variance: float
    rho1: float
    rho2: float
    grad_norm_scale: float

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> BoundConstants:
        return cls(
            lipschitz=cfg.lipschitz,
            strong_convexity=cfg.strong_convexity,
            noise_variance=cfg.noise_variance,
            rho1=cfg.rho1,
            rho2=cfg.effective_rho2,
            grad_norm_scale=cfg.effective_grad_norm_scale,
        )


@dataclass(frozen=True)
class IterationBoundInputs:
    """The parts of one iteration's (b_t, beta_t) that A_t and B_t depend on.

    `deselected` holds ||1 - beta_{i,t}||^2 per worker, i.e. the count of its
    deselected entries; `inverse_power_sum` holds
    sum_d (sum_i K_i beta_{i,t}^d b_t^d)^-2, or inf if some entry has no worker.
    `noiseless` marks iterations whose aggregation bypassed the channel."""

    deselected: npt.NDArray[np.int64]
    inverse_power_sum: float
    sample_counts: npt.NDArray[np.int64]
    constants: BoundConstants
    noiseless: bool = False

    @classmethod
    def from_decision(
        cls,
        decision: SchedulingDecision | None,
        sample_counts: npt.ArrayLike,
        constants: BoundConstants,
    ) -> IterationBoundInputs:
        counts = np.asarray(sample_counts, dtype=np.int64)
        if decision is None:
            return cls(np.zeros(counts.size, dtype=np.int64), 0.0, counts, constants, True)
        if decision.selection.shape[0] != counts.size:
            raise ShapeError("Selection rows do not match the number of workers")
        deselected = (~decision.selection).sum(axis=1).astype(np.int64)
        return cls(
            deselected,
            inverse_power_sum(decision.selection, decision.scaling, counts),
            counts,
            constants,
        )

    @property
    def total_samples(self) -> int:
        return int(self.sample_counts.sum())


def inverse_power_sum(
    selection: npt.NDArray[np.bool_], scaling: FloatArray, sample_counts: npt.ArrayLike
) -> float:
    counts = np.asarray(sample_counts, dtype=np.int64)
    denominators = (counts @ selection.astype(np.int64)).astype(np.float64) * scaling
    if np.any(denominators == 0):
        return math.inf
    return float(np.sum(1.0 / (denominators * denominators)))


def coeff_A(inp: IterationBoundInputs) -> float:
    """(L - mu)/L + sum_i mu K_i rho2 ||1 - beta_i||^2 / (L K)."""
    c = inp.constants
    weighted = float(inp.sample_counts @ inp.deselected)
    return (c.lipschitz - c.strong_convexity) / c.lipschitz + (
        c.strong_convexity * c.rho2 * weighted
    ) / (c.lipschitz * inp.total_samples)


def coeff_B(inp: IterationBoundInputs) -> float:
    """L sigma^2/2 sum_d (sum_i K_i beta b)^-2 + sum_i K_i rho1 ||1 - beta_i||^2 / (2 L K)."""
    c = inp.constants
    if math.isinf(inp.inverse_power_sum):
        raise UnboundedGapError("An entry has no selected worker; B_t is unbounded")
    noise = 0.0 if inp.noiseless else c.lipschitz * c.noise_variance / 2.0 * inp.inverse_power_sum
    weighted = float(inp.sample_counts @ inp.deselected)
    return noise + c.rho1 * weighted / (2.0 * c.lipschitz * inp.total_samples)


def cumulative_gap(
    coefficients: Sequence[tuple[float, float]], initial_gap: float
) -> list[float]:
    """G_t = Delta_t + (prod_{j<=t} A_j) * initial_gap, Delta_t = A_t Delta_{t-1} + B_t."""
    if initial_gap < 0:
        raise ValueError(f"initial_gap must be nonnegative, got {initial_gap}")
    delta = 0.0
    product = 1.0
    gaps = []
    for a, b in coefficients:
        delta = a * delta + b
        product *= a
        gaps.append(delta + product * initial_gap)
    return gaps


class ConvergenceCheck(NamedTuple):
    converges: bool
    margin: float


def check_convex_convergence(cfg: ScenarioConfig) -> ConvergenceCheck:
    """0 < rho2 <= 1/D guarantees convergence at alpha = 1/L."""
    rho2 = cfg.effective_rho2
    limit = 1.0 / cfg.dim
    return ConvergenceCheck(0 < rho2 <= limit, limit - rho2)


def check_nonconvex_condition(a_t: float, mu: float, grad_norm_scale: float) -> bool:
    """|1 + (A_t - 1) G / (2 mu)| <= 1."""
    if not grad_norm_scale > 0:
        raise ValueError("grad_norm_scale must be positive")
    return abs(1.0 + (a_t - 1.0) * grad_norm_scale / (2.0 * mu)) <= 1.0


def nonconvex_gap_step(
    prev_gap: float, a_t: float, b_t: float, grad_norm_sq: float, mu: float
) -> float:
    """B_t + (A_t - 1) G_t / (2 mu) + prev_gap."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    return b_t + (a_t - 1.0) * grad_norm_sq / (2.0 * mu) + prev_gap


@dataclass
class BoundTrace:
    a: list[float] = field(default_factory=list)
    b: list[float | None] = field(default_factory=list)
    delta: list[float | None] = field(default_factory=list)
    cumulative: list[float | None] = field(default_factory=list)
    nonconvex: list[float | None] = field(default_factory=list)
    empirical_gap: list[float | None] = field(default_factory=list)
    convex_flag: list[bool] = field(default_factory=list)
    nonconvex_flag: list[bool] = field(default_factory=list)
    unbounded: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.a)

    def to_table(self) -> pa.Table:
        return pa.Table.from_pydict(
            {
                "t": pa.array(range(1, len(self) + 1), type=pa.int64()),
                "A_t": pa.array(self.a, type=pa.float64()),
                "B_t": pa.array(self.b, type=pa.float64()),
                "Delta_t": pa.array(self.delta, type=pa.float64()),
                "cumulative_bound": pa.array(self.cumulative, type=pa.float64()),
                "empirical_gap": pa.array(self.empirical_gap, type=pa.float64()),
                "convex_flag": pa.array(self.convex_flag, type=pa.bool_()),
                "nonconvex_flag": pa.array(self.nonconvex_flag, type=pa.bool_()),
            }
        )


def build_bound_trace(
    inputs: Sequence[IterationBoundInputs],
    initial_gap: float,
    grad_norms_sq: Sequence[float] | None = None,
    empirical_gaps: Sequence[float | None] | None = None,
) -> BoundTrace:
    """Run both recursions over a trace.

    Once some B_t is unbounded every later bound is reported as null and the
    iteration is flagged, never carried as a float infinity."""
    trace = BoundTrace()
    delta = 0.0
    product = 1.0
    nonconvex = initial_gap
    blown = False
    for t, inp in enumerate(inputs):
        c = inp.constants
        a_t = coeff_A(inp)
        trace.a.append(a_t)
        trace.convex_flag.append(a_t <= 1.0)
        trace.nonconvex_flag.append(
            check_nonconvex_condition(a_t, c.strong_convexity, c.grad_norm_scale)
        )
        try:
            b_t: float | None = coeff_B(inp)
        except UnboundedGapError:
            logger.warning("Unbounded B_t at iteration %d", t + 1)
            b_t = None
            blown = True
        trace.unbounded.append(blown)
        if blown or b_t is None:
            trace.b.append(b_t)
            trace.delta.append(None)
            trace.cumulative.append(None)
            trace.nonconvex.append(None)
        else:
            delta = a_t * delta + b_t
            product *= a_t
            trace.b.append(b_t)
            trace.delta.append(delta)
            trace.cumulative.append(delta + product * initial_gap)
            if grad_norms_sq is not None:
                nonconvex = nonconvex_gap_step(
                    nonconvex, a_t, b_t, grad_norms_sq[t], c.strong_convexity
                )
                trace.nonconvex.append(nonconvex)
            else:
                trace.nonconvex.append(None)
        trace.empirical_gap.append(
            empirical_gaps[t] if empirical_gaps is not None else None
        )
    return trace


class QuadraticCertificate(NamedTuple):
    lipschitz: float
    strong_convexity: float
    optimum: ModelParams
    optimal_loss: float


def certify_quadratic_constants(datasets: Sequence[Dataset]) -> QuadraticCertificate:
    """L, mu as the extreme Hessian eigenvalues of the pooled MSE, and w*."""
    task = LinearRegressionTask()
    pooled = Dataset.concat(datasets)
    eigenvalues = np.linalg.eigvalsh(task.hessian(pooled))
    optimum = task.optimum(pooled)
    return QuadraticCertificate(
        lipschitz=float(eigenvalues[-1]),
        strong_convexity=float(eigenvalues[0]),
        optimum=optimum,
        optimal_loss=task.loss(optimum, pooled),
    )


def _upper_hull(points: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Vertices of the upper convex hull of (x, y) rows, by increasing x."""
    ordered = points[np.lexsort((-points[:, 1], points[:, 0]))]
    # only the highest point at each x can be a vertex
    ordered = ordered[np.r_[True, np.diff(ordered[:, 0]) > 0]]
    hull: list[npt.NDArray[np.float64]] = []
    for p in ordered:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) < 0:
                break
            hull.pop()
        hull.append(p)
    return np.asarray(hull)


def _supporting_slope(x: npt.NDArray[np.float64], y: npt.NDArray[np.float64]) -> float:
    """Slope of the upper hull edge above mean(x); the line through it lies on
    or above every point and is lowest at the trajectory's typical ||grad F||^2."""
    hull = _upper_hull(np.column_stack([x, y]))
    if len(hull) < 2:
        return 0.0
    edge = int(np.searchsorted(hull[:, 0], x.mean(), side="left"))
    edge = min(max(edge, 1), len(hull) - 1)
    (x1, y1), (x2, y2) = hull[edge - 1], hull[edge]
    return max(float((y2 - y1) / (x2 - x1)), 0.0)


def measure_gradient_bounds(
    trajectory: Sequence[ModelParams],
    task: TaskModel,
    datasets: Sequence[Dataset],
    inflation: float = 1.1,
) -> tuple[float, float]:
    """(rho1, rho2) with max_n ||grad f(w; x_n, y_n)||^2 <= rho1 + rho2 ||grad F(w)||^2
    at every visited model, both scaled by `inflation`.

    rho2 is the slope of the upper hull of the (||grad F||^2, max ||grad f||^2)
    points over the mean ||grad F||^2; rho1 is then the smallest offset."""
    if not trajectory:
        raise ConfigError(["Measuring gradient bounds needs a nonempty trajectory"])
    if inflation < 1.0:
        raise ConfigError([f"inflation must be at least 1, got {inflation}"])
    counts = np.array([d.size for d in datasets], dtype=np.float64)
    full_sq = np.empty(len(trajectory))
    worst_sq = np.empty(len(trajectory))
    for j, w in enumerate(trajectory):
        per_sample = [task.per_sample_gradients(w, d) for d in datasets]
        full = counts @ np.stack([g.mean(axis=0) for g in per_sample]) / counts.sum()
        full_sq[j] = full @ full
        worst_sq[j] = max(float(np.sum(g * g, axis=1).max()) for g in per_sample)
    rho2 = _supporting_slope(full_sq, worst_sq)
    rho1 = max(float(np.max(worst_sq - rho2 * full_sq)), 0.0)
    logger.debug("Measured rho1=%.6g rho2=%.6g over %d models", rho1, rho2, len(trajectory))
    return inflation * rho1, inflation * rho2
