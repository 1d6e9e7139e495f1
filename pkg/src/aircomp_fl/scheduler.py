"""Joint worker selection and power scaling, one model entry at a time.

For an entry with previous global value w and slack eta, worker i can afford a
common scaling factor b only while b <= b_i^Max = sqrt(P_i) h_i / (K_i (|w| + eta)).
Sweeping b over the U values b_i^Max visits every selection worth considering,
so the line search below is exact for the conservative problem.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import NamedTuple, TypeVar

import numpy as np
import numpy.typing as npt

from aircomp_fl.channel import SchedulingDecision
from aircomp_fl.core import EtaMode
from aircomp_fl.errors import DegenerateEntryError, SchedulerError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

ORACLE_MAX_WORKERS = 20

_Num = TypeVar("_Num", np.float64, FloatArray)


class ObjectiveConstants(NamedTuple):
    lipschitz: float
    noise_variance: float
    rho1: float
    total_samples: int


@dataclass(frozen=True)
class SchedulerInput:
    """Everything the parameter server knows about one entry d at iteration t."""

    prev_entry: float
    eta: float
    gains: FloatArray
    sample_counts: IntArray
    max_powers: FloatArray
    constants: ObjectiveConstants
    b_ceiling: float = 1e6

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise SchedulerError(f"eta must be nonnegative, got {self.eta}")
        if not np.all(self.gains > 0):
            raise SchedulerError("Channel gains must be positive")
        if not (self.gains.shape == self.sample_counts.shape == self.max_powers.shape):
            raise SchedulerError("Per-worker scheduler inputs differ in length")

    @property
    def num_workers(self) -> int:
        return int(self.gains.size)

    @property
    def margin(self) -> float:
        return abs(self.prev_entry) + self.eta


@dataclass(frozen=True)
class FeasiblePoint:
    b: float
    selection: BoolArray
    objective: float


def _objective(
    selected_samples: _Num, b: _Num, constants: ObjectiveConstants
) -> _Num:
    # shared by the scalar and the vectorised paths so both round identically
    signal = selected_samples * b
    excluded = constants.total_samples - selected_samples
    return constants.lipschitz * constants.noise_variance / (
        2.0 * (signal * signal)
    ) + constants.rho1 * excluded / (2.0 * constants.lipschitz * constants.total_samples)


def objective_R(b: float, selection: npt.ArrayLike, inp: SchedulerInput) -> float:
    """Lsigma^2 / (2 (sum_i beta_i K_i b)^2) + sum_i K_i rho1 (1 - beta_i) / (2 L K)."""
    beta = np.asarray(selection, dtype=bool)
    if not beta.any():
        raise SchedulerError("The objective is undefined when no worker is selected")
    if not b > 0:
        raise SchedulerError(f"b must be positive, got {b}")
    selected = np.float64(inp.sample_counts[beta].sum())
    return float(_objective(selected, np.float64(b), inp.constants))


def max_scaling(worker: int, inp: SchedulerInput) -> float:
    """b_k^Max = sqrt(P_k) h_k / (K_k (|w_{t-1}| + eta))."""
    if inp.margin == 0:
        raise DegenerateEntryError("|w_{t-1}| + eta is zero")
    return float(
        np.sqrt(inp.max_powers[worker])
        * inp.gains[worker]
        / (inp.sample_counts[worker] * np.float64(inp.margin))
    )


def max_scalings(inp: SchedulerInput) -> FloatArray:
    if inp.margin == 0:
        raise DegenerateEntryError("|w_{t-1}| + eta is zero")
    return (
        np.sqrt(inp.max_powers)
        * inp.gains
        / (inp.sample_counts * np.float64(inp.margin))
    )


def induced_selection(b: float, inp: SchedulerInput) -> BoolArray:
    """Workers whose cap admits b, i.e. b <= b_i^Max (equality selects)."""
    return max_scalings(inp) >= b


def _better(candidate: FeasiblePoint, k: int, best: FeasiblePoint, best_k: int) -> bool:
    # lower objective, then larger b, then smaller index
    return (candidate.objective, -candidate.b, k) < (best.objective, -best.b, best_k)


def _degenerate_point(inp: SchedulerInput) -> FeasiblePoint:
    selection = np.ones(inp.num_workers, dtype=bool)
    return FeasiblePoint(
        inp.b_ceiling, selection, objective_R(inp.b_ceiling, selection, inp)
    )


def solve_p4(inp: SchedulerInput) -> FeasiblePoint:
    """Line search over the U candidates b^(k) = b_k^Max."""
    if inp.num_workers < 1:
        raise SchedulerError("At least one worker is required")
    try:
        candidates = max_scalings(inp)
    except DegenerateEntryError:
        return _degenerate_point(inp)

    best: FeasiblePoint | None = None
    best_k = -1
    for k, b in enumerate(candidates):
        selection = candidates >= b
        point = FeasiblePoint(float(b), selection, objective_R(float(b), selection, inp))
        if best is None or _better(point, k, best, best_k):
            best, best_k = point, k
    assert best is not None
    return best


def brute_force_oracle(inp: SchedulerInput) -> FeasiblePoint:
    """Exhaustive search over every nonempty worker subset.

    For a subset S the largest admissible b is min_{i in S} b_i^Max."""
    if inp.num_workers > ORACLE_MAX_WORKERS:
        raise SchedulerError(
            f"Refusing a 2^{inp.num_workers} subset search "
            f"(limit {ORACLE_MAX_WORKERS} workers)"
        )
    try:
        caps = max_scalings(inp)
    except DegenerateEntryError:
        return _degenerate_point(inp)

    best: FeasiblePoint | None = None
    best_rank = -1
    rank = 0
    for size in range(1, inp.num_workers + 1):
        for subset in itertools.combinations(range(inp.num_workers), size):
            selection = np.zeros(inp.num_workers, dtype=bool)
            selection[list(subset)] = True
            b = float(caps[selection].min())
            point = FeasiblePoint(b, selection, objective_R(b, selection, inp))
            if best is None or _better(point, rank, best, best_rank):
                best, best_rank = point, rank
            rank += 1
    assert best is not None
    return best


def compute_eta(
    prev_global: FloatArray,
    prev2_global: FloatArray | None,
    mode: EtaMode,
    fallback: float,
) -> FloatArray:
    """Per-entry eta: a constant, or |w_{t-1} - w_{t-2}| once two models exist."""
    if mode == "fixed" or prev2_global is None:
        return np.full(prev_global.shape, float(fallback))
    if mode == "adaptive_diff":
        return np.abs(prev_global - prev2_global)
    raise SchedulerError(f"Unknown eta mode {mode!r}")


class EntrySchedule(NamedTuple):
    decision: SchedulingDecision
    max_scalings: FloatArray  # (U, D), inf on degenerate entries
    degenerate: BoolArray  # (D,)


def entry_caps(
    prev_global: FloatArray,
    eta: FloatArray,
    gains: FloatArray,
    sample_counts: IntArray,
    max_powers: FloatArray,
) -> tuple[FloatArray, BoolArray]:
    margin = np.abs(prev_global) + eta
    degenerate = margin == 0
    safe_margin = np.where(degenerate, 1.0, margin)
    caps = (
        np.sqrt(max_powers)[:, None]
        * gains
        / (sample_counts[:, None] * safe_margin[None, :])
    )
    caps[:, degenerate] = np.inf
    return caps, degenerate


def schedule_entries(
    prev_global: FloatArray,
    eta: FloatArray,
    gains: FloatArray,
    sample_counts: IntArray,
    max_powers: FloatArray,
    constants: ObjectiveConstants,
    b_ceiling: float,
) -> EntrySchedule:
    """`solve_p4` for every entry of one iteration at once."""
    num_workers, dim = gains.shape
    caps, degenerate = entry_caps(prev_global, eta, gains, sample_counts, max_powers)

    objectives = np.empty((num_workers, dim))
    for k in range(num_workers):
        chosen = caps >= caps[k]
        selected = (sample_counts @ chosen.astype(np.int64)).astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            objectives[k] = _objective(selected, caps[k], constants)

    worker_index = np.broadcast_to(np.arange(num_workers)[:, None], caps.shape)
    order = np.lexsort((worker_index, -caps, objectives), axis=0)
    best = order[0]
    entries = np.arange(dim)
    scaling = caps[best, entries]
    selection = caps >= scaling[None, :]

    if np.any(degenerate):
        logger.debug("%d degenerate entries scheduled at b_ceiling", degenerate.sum())
        scaling = np.where(degenerate, b_ceiling, scaling)
        selection[:, degenerate] = True

    return EntrySchedule(SchedulingDecision(scaling, selection), caps, degenerate)


def random_schedule(
    caps: FloatArray, stream: np.random.Generator, b_ceiling: float, floor: float = 0.0
) -> SchedulingDecision:
    """Uniform nonempty subset per entry, then b uniform on
    (floor * limit, limit] where limit is the smallest selected cap.

    A floor of 0 draws b from all of (0, limit]; its 1/b^2 noise gain then has
    no finite mean."""
    if not 0.0 <= floor < 1.0:
        raise SchedulerError(f"scaling floor must lie in [0, 1), got {floor}")
    num_workers, dim = caps.shape
    selection = stream.random((num_workers, dim)) < 0.5
    empty = ~selection.any(axis=0)
    while np.any(empty):
        selection[:, empty] = stream.random((num_workers, int(empty.sum()))) < 0.5
        empty = ~selection.any(axis=0)
    limit = np.minimum(np.where(selection, caps, np.inf).min(axis=0), b_ceiling)
    # 1 - U[0, 1) lies in (0, 1], so b is never zero
    scaling = (floor + (1.0 - floor) * (1.0 - stream.random(dim))) * limit
    return SchedulingDecision(scaling, selection)


class OracleCheckResult(NamedTuple):
    passed: int
    failed: int
    mismatches: list[tuple[float, float]]


def random_instance(
    num_workers: int, stream: np.random.Generator, noise_variance: float | None = None
) -> SchedulerInput:
    """A random scheduling instance: log-uniform powers and gains, K_i in [1, 100]."""
    counts = stream.integers(1, 101, size=num_workers).astype(np.int64)
    sigma2 = (
        noise_variance
        if noise_variance is not None
        else float(10.0 ** stream.uniform(-6.0, 0.0))
    )
    return SchedulerInput(
        prev_entry=float(stream.normal(0.0, 1.0)),
        eta=float(stream.uniform(0.0, 0.5)),
        gains=10.0 ** stream.uniform(-2.0, 1.0, size=num_workers),
        sample_counts=counts,
        max_powers=10.0 ** stream.uniform(-1.0, 2.0, size=num_workers),
        constants=ObjectiveConstants(
            lipschitz=float(10.0 ** stream.uniform(-1.0, 1.0)),
            noise_variance=sigma2,
            rho1=float(10.0 ** stream.uniform(-3.0, 1.0)),
            total_samples=int(counts.sum()),
        ),
    )


def oracle_check(
    num_instances: int,
    worker_range: tuple[int, int],
    stream: np.random.Generator,
) -> OracleCheckResult:
    """Compare `solve_p4` with the exhaustive search on random instances."""
    low, high = worker_range
    if low < 1 or high < low or high > ORACLE_MAX_WORKERS:
        raise SchedulerError(f"Invalid worker range {worker_range}")
    passed = 0
    mismatches: list[tuple[float, float]] = []
    for _ in range(num_instances):
        inp = random_instance(int(stream.integers(low, high + 1)), stream)
        fast, exact = solve_p4(inp), brute_force_oracle(inp)
        if fast.objective == exact.objective:
            passed += 1
        else:
            mismatches.append((fast.objective, exact.objective))
    if mismatches:
        logger.warning("%d oracle mismatches", len(mismatches))
    return OracleCheckResult(passed, len(mismatches), mismatches)
