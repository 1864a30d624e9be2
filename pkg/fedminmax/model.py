"""Dense feed-forward classifiers with exact analytical gradients.

Parameters live in one flat float64 vector; each layer contributes its
``fan_in x fan_out`` weight matrix (row-major) followed by its bias.
The output layer is always a softmax.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

# Probabilities are clamped here before the log in cross-entropy.
CE_CLAMP = 1e-12


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class LossKind(str, Enum):
    BRIER = "brier"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes from input dimension to number of classes."""

    layer_sizes: tuple[int, ...]
    hidden_activation: Activation = Activation.RELU

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {list(sizes)}")
        if sizes[-1] < 2:
            raise ValueError("the output layer needs at least two classes")

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden_layers: list[int] | tuple[int, ...],
        num_classes: int,
        activation: Activation | str = Activation.RELU,
    ) -> "MlpSpec":
        return cls((input_dim, *hidden_layers, num_classes), Activation(activation))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.shapes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameter vector tied to the spec that shapes it."""

    spec: MlpSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.spec.num_params:
            raise ValueError(
                f"expected {self.spec.num_params} parameters for layers "
                f"{list(self.spec.layer_sizes)}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, values)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _unflatten(self.spec, self.values)


@dataclass(frozen=True, eq=False)
class WeightedBatch:
    """Samples with per-sample nonnegative weights."""

    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if targets.shape != (features.shape[0],) or weights.shape != (features.shape[0],):
            raise ValueError(
                f"row counts disagree: {features.shape[0]} feature rows, "
                f"{targets.shape} targets, {weights.shape} weights"
            )
        if not np.all(np.isfinite(weights)):
            raise ValueError("sample weights must be finite")
        if np.any(weights < 0):
            raise ValueError("sample weights must be nonnegative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def unweighted(cls, features: np.ndarray, targets: np.ndarray) -> "WeightedBatch":
        return cls(features, targets, np.ones(len(targets)))

    def __len__(self) -> int:
        return self.targets.size


def _unflatten(spec: MlpSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in spec.shapes:
        weight = values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = values[offset : offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.shapes:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(spec, np.concatenate(chunks))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_pass(spec: MlpSpec, values: np.ndarray, features: np.ndarray):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"feature width {x.shape[-1] if x.ndim else 0} does not match "
            f"input dimension {spec.input_dim}"
        )
    layers = _unflatten(spec, values)
    activations = [x]
    pre_activations = []
    a = x
    for i, (weight, bias) in enumerate(layers):
        z = a @ weight + bias
        pre_activations.append(z)
        if i < len(layers) - 1:
            a = _activate(z, spec.hidden_activation)
            activations.append(a)
    return _softmax(pre_activations[-1]), activations, pre_activations


def forward(params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Class-probability rows, one per input row."""
    probs, _, _ = _forward_pass(params.spec, params.values, features)
    return probs


def predict(params: ParamVector, features: np.ndarray) -> np.ndarray:
    return forward(params, features).argmax(axis=1)


def _check_targets(targets: np.ndarray, num_classes: int) -> None:
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise ValueError(f"targets must lie in [0, {num_classes})")


def _one_hot(targets: np.ndarray, num_classes: int) -> np.ndarray:
    _check_targets(targets, num_classes)
    encoded = np.zeros((targets.size, num_classes))
    encoded[np.arange(targets.size), targets] = 1.0
    return encoded


def per_sample_loss(probs: np.ndarray, targets: np.ndarray, kind: LossKind) -> np.ndarray:
    kind = LossKind(kind)
    targets = np.asarray(targets, dtype=np.int64)
    if kind is LossKind.BRIER:
        diff = probs - _one_hot(targets, probs.shape[1])
        return np.sum(diff * diff, axis=1)
    _check_targets(targets, probs.shape[1])
    picked = probs[np.arange(targets.size), targets]
    return -np.log(np.maximum(picked, CE_CLAMP))


def _resolve_divisor(batch: WeightedBatch, divisor: float | None) -> float:
    if len(batch) == 0:
        raise ValueError("cannot evaluate a loss on an empty batch")
    if divisor is None:
        total = float(batch.weights.sum())
        if total <= 0:
            raise ValueError("sample weights sum to zero; pass an explicit divisor")
        return total
    if divisor <= 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    return float(divisor)


def _backprop(
    spec: MlpSpec,
    values: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    coef: np.ndarray,
    kind: LossKind,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and the gradient of ``sum_i coef_i * loss_i``."""
    probs, activations, pre_activations = _forward_pass(spec, values, features)
    onehot = _one_hot(targets, spec.num_classes)
    if kind is LossKind.BRIER:
        residual = probs - onehot
        losses = np.sum(residual * residual, axis=1)
        upstream = 2.0 * residual
        delta = probs * (upstream - np.sum(upstream * probs, axis=1, keepdims=True))
    else:
        picked = probs[np.arange(targets.size), targets]
        losses = -np.log(np.maximum(picked, CE_CLAMP))
        delta = probs - onehot
        # the clamped loss is flat in the parameters
        delta[picked < CE_CLAMP] = 0.0
    delta = delta * coef[:, None]

    layers = _unflatten(spec, values)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        weight, _ = layers[i]
        grads.append((activations[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ weight.T) * _activation_grad(
                pre_activations[i - 1], activations[i], spec.hidden_activation
            )
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return losses, flat


def backprop(
    params: ParamVector,
    batch: WeightedBatch,
    kind: LossKind,
    divisor: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and the raw gradient of the weighted loss.

    The gradient is returned as a plain array so callers can inspect it
    for non-finite entries before building a new :class:`ParamVector`.
    """
    div = _resolve_divisor(batch, divisor)
    return _backprop(
        params.spec, params.values, batch.features, batch.targets, batch.weights / div, LossKind(kind)
    )


def weighted_loss(
    params: ParamVector,
    batch: WeightedBatch,
    kind: LossKind,
    divisor: float | None = None,
) -> float:
    """``sum_i w_i * loss_i / divisor``.

    With ``divisor=None`` the loss is normalized by the weight total;
    otherwise the caller picks the denominator (``n_{a,k}`` for a group
    risk, ``n_k`` for an importance-weighted client risk).
    """
    div = _resolve_divisor(batch, divisor)
    probs = forward(params, batch.features)
    losses = per_sample_loss(probs, batch.targets, LossKind(kind))
    return float(np.dot(batch.weights, losses) / div)


def loss_gradient(
    params: ParamVector,
    batch: WeightedBatch,
    kind: LossKind,
    divisor: float | None = None,
) -> ParamVector:
    _, grad = backprop(params, batch, kind, divisor)
    return params.replace(grad)
