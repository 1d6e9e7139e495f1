"""Uplink of the analog-aggregation channel.

Signals are real baseband scalars, one per model entry. Channel gains are the
positive amplitudes |h|, with transmit-side phase compensation assumed exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from aircomp_fl.core import ModelParams
from aircomp_fl.errors import AggregationError, ChannelError, ShapeError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

# relative slack when checking amplitude**2 <= P^Max after a sqrt round trip
POWER_CAP_RTOL = 1e-12


@dataclass(frozen=True)
class ChannelRealization:
    gains: FloatArray  # (U, D) amplitudes h_{i,t}^d
    noise_variance: float

    def __post_init__(self) -> None:
        if self.gains.ndim != 2:
            raise ShapeError(f"Channel gains must be (U, D), got {self.gains.shape}")
        if not np.all(np.isfinite(self.gains)) or np.any(self.gains <= 0):
            raise ChannelError("Channel gains must be positive and finite")
        if self.noise_variance < 0:
            raise ChannelError("Noise variance must be nonnegative")

    @property
    def num_workers(self) -> int:
        return int(self.gains.shape[0])

    @property
    def dim(self) -> int:
        return int(self.gains.shape[1])


@dataclass(frozen=True)
class SchedulingDecision:
    scaling: FloatArray  # (D,) b_t^d
    selection: BoolArray  # (U, D) beta_{i,t}^d

    def __post_init__(self) -> None:
        if self.selection.ndim != 2 or self.scaling.shape != (self.selection.shape[1],):
            raise ShapeError(
                f"Scaling {self.scaling.shape} does not match selection "
                f"{self.selection.shape}"
            )
        if not np.all(self.scaling > 0):
            raise AggregationError("Every power scaling factor b must be positive")
        if not np.all(self.selection.any(axis=0)):
            raise AggregationError("Some entry has no selected worker")

    @classmethod
    def select_all(cls, num_workers: int, scaling: FloatArray) -> SchedulingDecision:
        return cls(scaling, np.ones((num_workers, scaling.size), dtype=bool))

    def denominators(self, sample_counts: npt.ArrayLike) -> FloatArray:
        """Sum_i K_i beta_i b per entry, the estimator normaliser."""
        k = np.asarray(sample_counts, dtype=np.int64)
        return (k @ self.selection.astype(np.int64)).astype(np.float64) * self.scaling

    @property
    def selected_counts(self) -> npt.NDArray[np.int64]:
        return self.selection.sum(axis=0)


@dataclass(frozen=True)
class ReceivedSignal:
    values: FloatArray  # (D,) y_t


def draw_channel(
    num_workers: int,
    dim: int,
    stream: np.random.Generator,
    noise_variance: float = 0.0,
    per_entry: bool = True,
) -> ChannelRealization:
    """Rayleigh amplitudes: h^2 is unit-mean exponential, h its positive root.

    With per_entry=False one gain per worker is shared by every entry."""
    shape = (num_workers, dim) if per_entry else (num_workers, 1)
    power = stream.standard_exponential(size=shape)
    # exponential draws can be exactly 0.0; keep the gain strictly positive
    gains = np.sqrt(np.maximum(power, np.finfo(np.float64).tiny))
    if not per_entry:
        gains = np.repeat(gains, dim, axis=1)
    return ChannelRealization(gains, noise_variance)


def transmit_amplitude(
    w_entry: float,
    sample_count: int,
    b: float,
    h: float,
    selected: bool,
    max_power: float,
) -> float:
    """sgn(w) * min(K b |w| / h, sqrt(P^Max)) for a selected worker, else 0."""
    if not h > 0:
        raise ChannelError(f"Channel gain must be positive, got {h}")
    if not b > 0:
        raise ChannelError(f"Power scaling factor must be positive, got {b}")
    if not selected:
        return 0.0
    return float(
        np.sign(w_entry) * min(sample_count * b * abs(w_entry) / h, np.sqrt(max_power))
    )


def transmit_amplitudes(
    local_models: FloatArray,
    sample_counts: npt.ArrayLike,
    decision: SchedulingDecision,
    channel: ChannelRealization,
    max_powers: npt.ArrayLike,
) -> tuple[FloatArray, BoolArray]:
    """Vectorised `transmit_amplitude` over a (U, D) block of local models.

    Returns the amplitudes and a mask of the entries whose power cap clamped."""
    if local_models.shape != channel.gains.shape:
        raise ShapeError(
            f"Local models {local_models.shape} do not match channel "
            f"{channel.gains.shape}"
        )
    k = np.asarray(sample_counts, dtype=np.float64)[:, None]
    cap = np.sqrt(np.asarray(max_powers, dtype=np.float64))[:, None]
    wanted = k * decision.scaling[None, :] * np.abs(local_models) / channel.gains
    clamped = decision.selection & (wanted > cap)
    amplitudes = np.where(
        decision.selection, np.sign(local_models) * np.minimum(wanted, cap), 0.0
    )
    return amplitudes, clamped


def assert_power_cap(amplitudes: FloatArray, max_powers: npt.ArrayLike) -> None:
    """Every (amplitude)^2 must stay within the worker's P^Max."""
    cap = np.asarray(max_powers, dtype=np.float64)[:, None]
    over = amplitudes * amplitudes > cap * (1.0 + POWER_CAP_RTOL)
    if np.any(over):
        worker, entry = np.argwhere(over)[0]
        raise ChannelError(
            f"Power cap exceeded by worker {worker} at entry {entry}: "
            f"{amplitudes[worker, entry] ** 2} > {cap[worker, 0]}"
        )


def superpose(
    amplitudes: FloatArray,
    channel: ChannelRealization,
    stream: np.random.Generator | None,
) -> ReceivedSignal:
    """y^d = sum_i h_i^d a_i^d + z^d with z ~ N(0, sigma^2) per entry."""
    if amplitudes.shape != channel.gains.shape:
        raise ShapeError(
            f"Amplitudes {amplitudes.shape} do not match channel {channel.gains.shape}"
        )
    y = np.sum(channel.gains * amplitudes, axis=0)
    if channel.noise_variance > 0:
        if stream is None:
            raise ChannelError("A noise stream is required when sigma^2 > 0")
        y = y + stream.normal(0.0, np.sqrt(channel.noise_variance), size=y.shape)
    return ReceivedSignal(y)


def ps_estimate(
    y: ReceivedSignal, decision: SchedulingDecision, sample_counts: npt.ArrayLike
) -> ModelParams:
    """w_t^d = y_t^d / sum_i K_i beta_i^d b^d."""
    denominators = decision.denominators(sample_counts)
    if np.any(denominators == 0):
        raise AggregationError("An entry has a zero aggregation denominator")
    return y.values / denominators
