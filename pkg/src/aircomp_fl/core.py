from __future__ import annotations

import logging
import math
import tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal, Mapping, get_args

import numpy as np
import numpy.typing as npt

from aircomp_fl.errors import ConfigError, ShapeError

if TYPE_CHECKING:
    from aircomp_fl.learning import Dataset

logger = logging.getLogger(__name__)

ModelParams = npt.NDArray[np.float64]
"""A flat model vector w of length D."""

PolicyKind = Literal["inflota", "random", "perfect"]
EtaMode = Literal["fixed", "adaptive_diff"]
TaskKind = Literal["linear_regression", "mlp_classifier"]
Profile = Literal["desk", "paper"]
PartitionMode = Literal["pooled", "per_worker"]
StreamLabel = Literal["channel", "noise", "data", "policy"]

STREAM_LABELS: tuple[StreamLabel, ...] = get_args(StreamLabel)

REGRESSION_DIM = 2
MLP_LAYER_SIZES = (784, 64, 10)
MLP_DIM = 784 * 64 + 64 + 64 * 10 + 10


def task_dim(task: TaskKind) -> int:
    return REGRESSION_DIM if task == "linear_regression" else MLP_DIM


@dataclass(frozen=True)
class ScenarioConfig:
    """Every knob of one simulated scenario.

    Power quantities are linear milliwatts. `rho2` and `grad_norm_scale` default
    to 1/D and 2*mu respectively when left as None."""

    task: TaskKind = "linear_regression"
    profile: Profile = "desk"
    num_workers: int = 20
    model_dim: int | None = None
    num_iterations: int = 4000
    learning_rate: float = 0.01
    policy: PolicyKind = "inflota"
    rng_seed: int = 0
    batch_mode: Literal["full"] = "full"

    max_power: float | tuple[float, ...] = 10.0
    noise_variance: float = 1e-4
    per_entry_fading: bool = True

    lipschitz: float = 1.0
    strong_convexity: float = 0.1
    rho1: float = 1.0
    rho2: float | None = None
    grad_norm_scale: float | None = None
    certify: bool = True

    eta_mode: EtaMode = "fixed"
    eta: float = 0.1
    b_ceiling: float = 1e6
    random_scaling_floor: float = 0.2

    samples_per_worker: tuple[int, int] = (20, 60)
    regression_noise_scale: float = 0.4
    regression_test_samples: int = 2000
    mnist_total_samples: tuple[int, int] = (500, 1000)
    partition_mode: PartitionMode = "pooled"
    synthetic_test_samples: int = 2000
    test_limit: int | None = None

    eval_interval: int = 1

    @property
    def dim(self) -> int:
        return self.model_dim if self.model_dim is not None else task_dim(self.task)

    @property
    def effective_rho2(self) -> float:
        return self.rho2 if self.rho2 is not None else 1.0 / self.dim

    @property
    def effective_grad_norm_scale(self) -> float:
        if self.grad_norm_scale is not None:
            return self.grad_norm_scale
        return 2.0 * self.strong_convexity

    def max_powers(self) -> npt.NDArray[np.float64]:
        if isinstance(self.max_power, tuple):
            return np.asarray(self.max_power, dtype=np.float64)
        return np.full(self.num_workers, float(self.max_power), dtype=np.float64)

    def linear_snr(self) -> float:
        """P^Max / sigma^2 using the weakest worker's cap."""
        if self.noise_variance == 0:
            return math.inf
        return float(self.max_powers().min()) / self.noise_variance

    def validated(self) -> ScenarioConfig:
        violations = validate_config(self)
        if violations:
            raise ConfigError(violations)
        return self

    def with_overrides(self, **overrides: Any) -> ScenarioConfig:
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def validate_config(cfg: ScenarioConfig) -> list[str]:
    """Return one message per violated invariant; an empty list means valid."""
    violations: list[str] = []
    for name, allowed in (
        ("task", TaskKind),
        ("profile", Profile),
        ("policy", PolicyKind),
        ("eta_mode", EtaMode),
        ("partition_mode", PartitionMode),
    ):
        value = getattr(cfg, name)
        if value not in get_args(allowed):
            violations.append(f"{name} must be one of {get_args(allowed)}, got {value!r}")

    for name in ("num_workers", "num_iterations", "eval_interval"):
        if getattr(cfg, name) <= 0:
            violations.append(f"{name} must be positive")
    if cfg.dim <= 0:
        violations.append("model_dim must be positive")
    elif cfg.model_dim is not None and cfg.task in get_args(TaskKind):
        if cfg.model_dim != task_dim(cfg.task):
            violations.append(
                f"model_dim {cfg.model_dim} does not match the {cfg.task} layout "
                f"({task_dim(cfg.task)})"
            )
    if not cfg.learning_rate > 0:
        violations.append("learning rate alpha must be positive")
    if cfg.noise_variance < 0:
        violations.append("noise variance must be nonnegative")

    powers = cfg.max_powers()
    if powers.shape != (cfg.num_workers,):
        violations.append(
            f"max_power lists {powers.size} workers, expected {cfg.num_workers}"
        )
    if np.any(~(powers > 0)):
        violations.append("every max_power must be positive")

    if not cfg.lipschitz > 0:
        violations.append("L must be positive")
    if not cfg.strong_convexity > 0:
        violations.append("mu must be positive")
    if cfg.strong_convexity > cfg.lipschitz:
        violations.append("μ ≤ L violated")
    if cfg.rho1 < 0:
        violations.append("rho1 must be nonnegative")
    rho2 = cfg.effective_rho2
    if rho2 < 0:
        violations.append("rho2 must be nonnegative")
    if cfg.certify and cfg.dim > 0 and not 0 < rho2 <= 1.0 / cfg.dim:
        violations.append("ρ₂ ≤ 1/D violated")
    if not cfg.effective_grad_norm_scale > 0:
        violations.append("grad_norm_scale must be positive")

    if cfg.eta < 0:
        violations.append("eta must be nonnegative")
    if not cfg.b_ceiling > 0:
        violations.append("b_ceiling must be positive")
    if not 0.0 <= cfg.random_scaling_floor < 1.0:
        violations.append("random_scaling_floor must lie in [0, 1)")

    for name in ("samples_per_worker", "mnist_total_samples"):
        low, high = getattr(cfg, name)
        if low <= 0 or high < low:
            violations.append(f"{name} must be a nonempty range of positive counts")
    if cfg.regression_noise_scale < 0:
        violations.append("regression_noise_scale must be nonnegative")
    if cfg.regression_test_samples <= 0 or cfg.synthetic_test_samples <= 0:
        violations.append("test split sizes must be positive")
    if cfg.test_limit is not None and cfg.test_limit <= 0:
        violations.append("test_limit must be positive")
    return violations


_PROFILE_DEFAULTS: dict[tuple[TaskKind, Profile], dict[str, Any]] = {
    ("linear_regression", "desk"): {},
    ("linear_regression", "paper"): {"num_iterations": 10000},
    ("mlp_classifier", "desk"): {
        "num_iterations": 100,
        "learning_rate": 0.1,
        "eval_interval": 5,
        "synthetic_test_samples": 2000,
    },
    ("mlp_classifier", "paper"): {
        "num_iterations": 500,
        "learning_rate": 0.1,
        "eval_interval": 1,
    },
}


def default_config(
    task: TaskKind = "linear_regression", profile: Profile = "desk"
) -> ScenarioConfig:
    if (task, profile) not in _PROFILE_DEFAULTS:
        raise ConfigError([f"unknown task/profile pair: {task}/{profile}"])
    return ScenarioConfig(task=task, profile=profile, **_PROFILE_DEFAULTS[(task, profile)])


# TOML section -> the ScenarioConfig fields it may set
CONFIG_SECTIONS: dict[str, tuple[str, ...]] = {
    "scenario": (
        "task",
        "profile",
        "num_workers",
        "model_dim",
        "num_iterations",
        "learning_rate",
        "policy",
        "rng_seed",
        "batch_mode",
    ),
    "channel": ("max_power", "noise_variance", "per_entry_fading"),
    "constants": (
        "lipschitz",
        "strong_convexity",
        "rho1",
        "rho2",
        "grad_norm_scale",
        "certify",
    ),
    "scheduler": ("eta_mode", "eta", "b_ceiling", "random_scaling_floor"),
    "data": (
        "samples_per_worker",
        "regression_noise_scale",
        "regression_test_samples",
        "mnist_total_samples",
        "partition_mode",
        "synthetic_test_samples",
        "test_limit",
    ),
    "metrics": ("eval_interval",),
}

_TUPLE_FIELDS = {"samples_per_worker", "mnist_total_samples"}


def config_from_mapping(raw: Mapping[str, Any]) -> ScenarioConfig:
    """Build a config from nested sections, starting from the task/profile
    defaults named in `[scenario]`."""
    unknown: list[str] = []
    flat: dict[str, Any] = {}
    for section, values in raw.items():
        allowed = CONFIG_SECTIONS.get(section)
        if allowed is None or not isinstance(values, Mapping):
            unknown.append(f"unknown config section [{section}]")
            continue
        for key, value in values.items():
            if key not in allowed:
                unknown.append(f"unknown key {key!r} in [{section}]")
                continue
            if key in _TUPLE_FIELDS or (key == "max_power" and isinstance(value, list)):
                value = tuple(value)
            flat[key] = value
    if unknown:
        raise ConfigError(unknown)

    base = default_config(
        flat.pop("task", "linear_regression"), flat.pop("profile", "desk")
    )
    try:
        return replace(base, **flat)
    except TypeError as e:
        raise ConfigError([str(e)]) from e


def load_config(path: Path | str) -> ScenarioConfig:
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e}"]) from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"{path} is not valid TOML: {e}"]) from e
    cfg = config_from_mapping(raw)
    logger.debug("Loaded config from %s", path)
    return cfg


def config_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    """A JSON-friendly echo of the config, grouped the way the file is."""
    echo: dict[str, dict[str, Any]] = {}
    names = {f.name for f in fields(cfg)}
    for section, keys in CONFIG_SECTIONS.items():
        echo[section] = {
            k: list(v) if isinstance(v := getattr(cfg, k), tuple) else v
            for k in keys
            if k in names
        }
    echo["scenario"]["model_dim"] = cfg.dim
    echo["constants"]["rho2"] = cfg.effective_rho2
    echo["constants"]["grad_norm_scale"] = cfg.effective_grad_norm_scale
    return echo


def snr_db(linear: float) -> float:
    return 10.0 * math.log10(linear) if linear > 0 else -math.inf


def check_model(values: npt.ArrayLike, dim: int) -> ModelParams:
    """Coerce to a float64 vector, enforcing length D and finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (dim,):
        raise ShapeError(f"Expected a model of length {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("Model contains non-finite entries")
    return arr


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: int
    dataset: Dataset
    max_power: float

    @property
    def sample_count(self) -> int:
        return self.dataset.size


@dataclass(frozen=True)
class RngStreams:
    """A root seed from which independent named streams are derived."""

    seed: int
    labels: tuple[str, ...] = field(default=STREAM_LABELS)

    @property
    def entropy(self) -> int:
        # SeedSequence wants a nonnegative integer; keep the full 64 bits
        return self.seed & 0xFFFF_FFFF_FFFF_FFFF


def derive_stream(root: RngStreams, label: str, iteration: int = 0) -> np.random.Generator:
    """A generator that depends only on (seed, label, iteration)."""
    if label not in root.labels:
        raise ConfigError([f"unknown random stream label {label!r}"])
    if iteration < 0:
        raise ConfigError([f"stream iteration must be nonnegative, got {iteration}"])
    seq = np.random.SeedSequence(
        root.entropy, spawn_key=(root.labels.index(label), iteration)
    )
    return np.random.Generator(np.random.PCG64(seq))
