from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import ClassVar, NamedTuple, Sequence

import numpy as np
import numpy.typing as npt

from aircomp_fl.core import MLP_LAYER_SIZES, REGRESSION_DIM, ModelParams, TaskKind
from aircomp_fl.errors import AggregationError, ConfigError, ShapeError

GradientVector = npt.NDArray[np.float64]
FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True)
class Dataset:
    """Rows of inputs x_{i,k} and targets y_{i,k}, both 2-d."""

    inputs: FloatArray
    targets: FloatArray

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ShapeError("Dataset inputs and targets must be 2-d")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(
                f"Dataset has {self.inputs.shape[0]} inputs but "
                f"{self.targets.shape[0]} targets"
            )

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    @classmethod
    def concat(cls, datasets: Sequence[Dataset]) -> Dataset:
        return cls(
            np.concatenate([d.inputs for d in datasets]),
            np.concatenate([d.targets for d in datasets]),
        )


def create_task(kind: TaskKind) -> TaskModel:
    if kind == "linear_regression":
        return LinearRegressionTask()
    if kind == "mlp_classifier":
        return MlpTask()
    raise ConfigError([f"Cannot create a task model of kind {kind!r}"])


class TaskModel(ABC):
    """A loss family f(w; x, y) over flat parameter vectors."""

    kind: ClassVar[TaskKind]

    @property
    @abstractmethod
    def dim(self) -> int:
        """
        D, the length of the flat parameter vector
        """
        pass

    @abstractmethod
    def init_params(self, stream: np.random.Generator) -> ModelParams:
        pass

    @abstractmethod
    def loss(self, params: ModelParams, data: Dataset) -> float:
        """
        Mean per-sample loss over a local dataset
        """
        pass

    @abstractmethod
    def gradient(self, params: ModelParams, data: Dataset) -> GradientVector:
        """
        Exact full-batch gradient of `loss` at params
        """
        pass

    def accuracy(self, params: ModelParams, data: Dataset) -> float | None:
        """
        Classification accuracy, or None for tasks without classes
        """
        return None

    def per_sample_gradients(self, params: ModelParams, data: Dataset) -> FloatArray:
        """
        One gradient row per sample, shape (K_i, D)
        """
        rows = [
            self.gradient(params, Dataset(data.inputs[k : k + 1], data.targets[k : k + 1]))
            for k in range(data.size)
        ]
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def _check(self, params: ModelParams) -> None:
        if params.shape != (self.dim,):
            raise ShapeError(
                f"{self.kind} expects a model of length {self.dim}, "
                f"got shape {params.shape}"
            )


class LinearRegressionTask(TaskModel):
    """y_hat = a*x + c with MSE loss; params are (a, c).

    A chain of two single-neuron linear layers is affinely equivalent to this
    line, so only the reduced pair is simulated."""

    kind: ClassVar[TaskKind] = "linear_regression"

    @property
    def dim(self) -> int:
        return REGRESSION_DIM

    def init_params(self, stream: np.random.Generator) -> ModelParams:
        return np.zeros(REGRESSION_DIM)

    def predict(self, params: ModelParams, inputs: FloatArray) -> FloatArray:
        return params[0] * inputs[:, 0] + params[1]

    def _residuals(self, params: ModelParams, data: Dataset) -> FloatArray:
        self._check(params)
        if data.inputs.shape[1] != 1 or data.targets.shape[1] != 1:
            raise ShapeError("Regression data must have one feature and one target")
        return self.predict(params, data.inputs) - data.targets[:, 0]

    def loss(self, params: ModelParams, data: Dataset) -> float:
        r = self._residuals(params, data)
        return float(np.mean(r * r))

    def gradient(self, params: ModelParams, data: Dataset) -> GradientVector:
        r = self._residuals(params, data)
        return np.array(
            [2.0 * np.mean(r * data.inputs[:, 0]), 2.0 * np.mean(r)], dtype=np.float64
        )

    def per_sample_gradients(self, params: ModelParams, data: Dataset) -> FloatArray:
        r = self._residuals(params, data)
        return np.column_stack([2.0 * r * data.inputs[:, 0], 2.0 * r])

    def hessian(self, data: Dataset) -> FloatArray:
        """The MSE Hessian, constant in the params."""
        design = np.column_stack([data.inputs[:, 0], np.ones(data.size)])
        return 2.0 * design.T @ design / data.size

    def optimum(self, data: Dataset) -> ModelParams:
        """Closed-form least-squares minimiser."""
        design = np.column_stack([data.inputs[:, 0], np.ones(data.size)])
        solution, *_ = np.linalg.lstsq(design, data.targets[:, 0], rcond=None)
        return np.asarray(solution, dtype=np.float64)


class MlpLayers(NamedTuple):
    w1: FloatArray
    b1: FloatArray
    w2: FloatArray
    b2: FloatArray


class MlpTask(TaskModel):
    """784-64-10 perceptron, ReLU hidden layer, softmax + cross-entropy.

    The flat vector is laid out as W1 (784x64, row-major), b1, W2 (64x10), b2."""

    kind: ClassVar[TaskKind] = "mlp_classifier"

    def __init__(self, sizes: tuple[int, int, int] = MLP_LAYER_SIZES) -> None:
        self.n_in, self.n_hidden, self.n_out = sizes
        self._shapes = [
            (self.n_in, self.n_hidden),
            (self.n_hidden,),
            (self.n_hidden, self.n_out),
            (self.n_out,),
        ]

    @property
    def dim(self) -> int:
        return sum(int(np.prod(s)) for s in self._shapes)

    def unflatten(self, params: ModelParams) -> MlpLayers:
        """Views into params, one per layer tensor."""
        self._check(params)
        parts = []
        offset = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            parts.append(params[offset : offset + size].reshape(shape))
            offset += size
        return MlpLayers(*parts)

    def init_params(self, stream: np.random.Generator) -> ModelParams:
        params = np.zeros(self.dim)
        layers = self.unflatten(params)
        for w in (layers.w1, layers.w2):
            fan_in, fan_out = w.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = stream.uniform(-limit, limit, size=w.shape)
        return params

    def _check_data(self, data: Dataset) -> None:
        if data.inputs.shape[1] != self.n_in or data.targets.shape[1] != self.n_out:
            raise ShapeError(
                f"MLP data must be (N, {self.n_in}) -> (N, {self.n_out}), got "
                f"{data.inputs.shape} -> {data.targets.shape}"
            )

    def _forward(
        self, layers: MlpLayers, inputs: FloatArray
    ) -> tuple[FloatArray, FloatArray, FloatArray]:
        pre = inputs @ layers.w1 + layers.b1
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ layers.w2 + layers.b2
        return pre, hidden, logits

    @staticmethod
    def _log_softmax(logits: FloatArray) -> FloatArray:
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def predict(self, params: ModelParams, inputs: FloatArray) -> FloatArray:
        _, _, logits = self._forward(self.unflatten(params), inputs)
        return np.exp(self._log_softmax(logits))

    def loss(self, params: ModelParams, data: Dataset) -> float:
        self._check_data(data)
        _, _, logits = self._forward(self.unflatten(params), data.inputs)
        log_probs = self._log_softmax(logits)
        return float(-np.sum(data.targets * log_probs) / data.size)

    def gradient(self, params: ModelParams, data: Dataset) -> GradientVector:
        self._check_data(data)
        layers = self.unflatten(params)
        pre, hidden, logits = self._forward(layers, data.inputs)
        # softmax minus one-hot, averaged over the batch
        delta_out = (np.exp(self._log_softmax(logits)) - data.targets) / data.size
        delta_hidden = (delta_out @ layers.w2.T) * (pre > 0.0)
        return np.concatenate(
            [
                (data.inputs.T @ delta_hidden).ravel(),
                delta_hidden.sum(axis=0),
                (hidden.T @ delta_out).ravel(),
                delta_out.sum(axis=0),
            ]
        )

    def accuracy(self, params: ModelParams, data: Dataset) -> float | None:
        self._check_data(data)
        _, _, logits = self._forward(self.unflatten(params), data.inputs)
        hits = np.argmax(logits, axis=1) == np.argmax(data.targets, axis=1)
        return float(np.mean(hits))


def local_loss(model: ModelParams, task: TaskModel, data: Dataset) -> float:
    return task.loss(model, data)


def local_gradient(model: ModelParams, task: TaskModel, data: Dataset) -> GradientVector:
    return task.gradient(model, data)


def local_update(
    global_model: ModelParams, task: TaskModel, data: Dataset, alpha: float
) -> ModelParams:
    """One full-batch gradient step w_i = w - alpha * grad F_i(w); the input is
    left untouched."""
    if not alpha > 0:
        raise ConfigError([f"learning rate must be positive, got {alpha}"])
    return global_model - alpha * task.gradient(global_model, data)


def ideal_global_aggregate(
    locals_: Sequence[ModelParams], weights: Sequence[int] | npt.ArrayLike
) -> ModelParams:
    """Sum_i K_i w_i / K, entry-wise."""
    if len(locals_) == 0:
        raise AggregationError("Cannot aggregate an empty list of local models")
    k = np.asarray(weights, dtype=np.float64)
    stacked = np.stack([np.asarray(w, dtype=np.float64) for w in locals_])
    if k.shape != (stacked.shape[0],):
        raise ShapeError(
            f"Got {stacked.shape[0]} local models but {k.size} sample counts"
        )
    return k @ stacked / k.sum()


def global_loss(
    model: ModelParams, task: TaskModel, datasets: Sequence[Dataset]
) -> float:
    """F(w) = sum_i K_i F_i(w) / K."""
    counts = np.array([d.size for d in datasets], dtype=np.float64)
    losses = np.array([task.loss(model, d) for d in datasets])
    return float(counts @ losses / counts.sum())
