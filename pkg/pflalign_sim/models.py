"""
Small differentiable models with analytic loss and gradient.

Parameters live in one flat ParamVector; `unpack` exposes per-layer views in
the fixed order returned by `ModelSpec.layer_shapes`.
"""

from dataclasses import dataclass
from pflalign_sim._compat import StrEnum
from typing import Protocol

import numpy as np
from numpy.typing import NDArray
from scipy import special

from .errors import NonFiniteError, ShapeMismatchError
from .params import ParamVector, freeze


class ModelKind(StrEnum):
    LINEAR_REGRESSION = "linear-regression"
    MULTINOMIAL_LOGISTIC = "multinomial-logistic"
    MLP = "mlp-1hidden"


class LossKind(StrEnum):
    MSE = "mse"
    CROSS_ENTROPY = "cross-entropy"


class Activation(StrEnum):
    TANH = "tanh"


DEFAULT_LOSS: dict[ModelKind, LossKind] = {
    ModelKind.LINEAR_REGRESSION: LossKind.MSE,
    ModelKind.MULTINOMIAL_LOGISTIC: LossKind.CROSS_ENTROPY,
    ModelKind.MLP: LossKind.CROSS_ENTROPY,
}


@dataclass(kw_only=True, frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    output_dim: int
    hidden_dim: int | None = None
    activation: Activation = Activation.TANH
    loss: LossKind | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        loss = DEFAULT_LOSS[self.kind] if self.loss is None else LossKind(self.loss)
        object.__setattr__(self, "loss", loss)
        if self.input_dim < 1 or self.output_dim < 1:
            raise ShapeMismatchError("input_dim and output_dim must be positive")
        if self.kind == ModelKind.MLP:
            if self.hidden_dim is None or self.hidden_dim < 1:
                raise ShapeMismatchError("mlp-1hidden needs a positive hidden_dim")
        elif self.hidden_dim is not None:
            raise ShapeMismatchError(f"hidden_dim is only valid for {ModelKind.MLP}")
        if self.kind == ModelKind.MULTINOMIAL_LOGISTIC and loss != LossKind.CROSS_ENTROPY:
            raise ShapeMismatchError("multinomial-logistic uses cross-entropy")

    @property
    def is_classifier(self) -> bool:
        return self.loss == LossKind.CROSS_ENTROPY

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == ModelKind.MLP:
            assert self.hidden_dim is not None
            return [
                ("w1", (self.hidden_dim, self.input_dim)),
                ("b1", (self.hidden_dim,)),
                ("w2", (self.output_dim, self.hidden_dim)),
                ("b2", (self.output_dim,)),
            ]
        return [
            ("w", (self.output_dim, self.input_dim)),
            ("b", (self.output_dim,)),
        ]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "kind": str(self.kind),
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dim": self.hidden_dim,
            "activation": str(self.activation),
            "loss": str(self.loss),
        }


@dataclass(kw_only=True, frozen=True)
class Minibatch:
    """A batch of examples. Targets are float rows (mse) or integer labels (cross-entropy)."""

    inputs: NDArray[np.float64]
    targets: NDArray

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise ShapeMismatchError("inputs must be a nonempty (batch, input_dim) matrix")
        if len(self.targets) != len(self.inputs):
            raise ShapeMismatchError(
                f"{len(self.inputs)} inputs but {len(self.targets)} targets"
            )

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, indices: NDArray[np.int64]) -> "Minibatch":
        return Minibatch(inputs=self.inputs[indices], targets=self.targets[indices])

    def concat(self, other: "Minibatch") -> "Minibatch":
        return Minibatch(
            inputs=np.concatenate([self.inputs, other.inputs]),
            targets=np.concatenate([self.targets, other.targets]),
        )


class HasSplits(Protocol):
    train: Minibatch
    test: Minibatch


def unpack(spec: ModelSpec, params: ParamVector) -> dict[str, NDArray[np.float64]]:
    if len(params) != spec.num_params:
        raise ShapeMismatchError(
            f"model {spec.kind} expects {spec.num_params} parameters, got {len(params)}"
        )
    layers = {}
    offset = 0
    for name, shape in spec.layer_shapes():
        size = int(np.prod(shape))
        layers[name] = params[offset : offset + size].reshape(shape)
        offset += size
    return layers


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    chunks = []
    fan_in = spec.input_dim
    for name, shape in spec.layer_shapes():
        if name.startswith("w"):
            fan_in = shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return freeze(np.concatenate(chunks))


def _check_batch(spec: ModelSpec, batch: Minibatch) -> None:
    if batch.inputs.shape[1] != spec.input_dim:
        raise ShapeMismatchError(
            f"batch has input_dim {batch.inputs.shape[1]}, model expects {spec.input_dim}"
        )
    if spec.is_classifier:
        if batch.targets.ndim != 1:
            raise ShapeMismatchError("classification targets must be a label vector")
        if np.any(batch.targets < 0) or np.any(batch.targets >= spec.output_dim):
            raise ShapeMismatchError("label out of range")
    elif batch.targets.ndim != 2 or batch.targets.shape[1] != spec.output_dim:
        raise ShapeMismatchError(
            f"regression targets must have shape (batch, {spec.output_dim})"
        )


def _forward(
    spec: ModelSpec, layers: dict[str, NDArray[np.float64]], inputs: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64] | None]:
    if spec.kind == ModelKind.MLP:
        hidden = np.tanh(inputs @ layers["w1"].T + layers["b1"])
        return hidden @ layers["w2"].T + layers["b2"], hidden
    return inputs @ layers["w"].T + layers["b"], None


def _loss_and_output_grad(
    spec: ModelSpec, outputs: NDArray[np.float64], targets: NDArray
) -> tuple[float, NDArray[np.float64]]:
    batch_size = len(outputs)
    if spec.loss == LossKind.MSE:
        residual = outputs - targets
        loss = float(np.mean(residual**2))
        return loss, 2.0 * residual / residual.size
    log_norm = special.logsumexp(outputs, axis=1, keepdims=True)
    log_probs = outputs - log_norm
    rows = np.arange(batch_size)
    loss = float(-np.mean(log_probs[rows, targets]))
    dout = np.exp(log_probs)
    dout[rows, targets] -= 1.0
    return loss, dout / batch_size


def loss_and_grad(
    spec: ModelSpec, params: ParamVector, batch: Minibatch
) -> tuple[float, ParamVector]:
    """Mean batch loss and its exact gradient with respect to the flat parameters."""
    layers = unpack(spec, params)
    _check_batch(spec, batch)
    outputs, hidden = _forward(spec, layers, batch.inputs)
    loss, dout = _loss_and_output_grad(spec, outputs, batch.targets)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")

    if spec.kind == ModelKind.MLP:
        assert hidden is not None
        dhidden = (dout @ layers["w2"]) * (1.0 - hidden**2)
        grads = [
            dhidden.T @ batch.inputs,
            dhidden.sum(axis=0),
            dout.T @ hidden,
            dout.sum(axis=0),
        ]
    else:
        grads = [dout.T @ batch.inputs, dout.sum(axis=0)]
    return loss, freeze(np.concatenate([g.ravel() for g in grads]), "gradient")


def evaluate(
    spec: ModelSpec,
    params: ParamVector,
    dataset: Minibatch | HasSplits,
    split: str = "test",
) -> tuple[float, float | None]:
    """Full-dataset mean loss and, for classifiers, accuracy (ties go to the lowest class)."""
    batch = dataset if isinstance(dataset, Minibatch) else getattr(dataset, split)
    layers = unpack(spec, params)
    _check_batch(spec, batch)
    outputs, _ = _forward(spec, layers, batch.inputs)
    loss, _ = _loss_and_output_grad(spec, outputs, batch.targets)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    if not spec.is_classifier:
        return loss, None
    accuracy = float(np.mean(np.argmax(outputs, axis=1) == batch.targets))
    return loss, accuracy
