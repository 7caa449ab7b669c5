"""
Dense multilayer-perceptron learner used by every simulated device.

Parameters travel as one flat float64 vector (``ModelParams.values``). Per
layer the weight matrix (fan_in x fan_out, row-major) comes first, then the
bias vector; layers follow each other input to output. Hidden layers use
ReLU, the output layer softmax, and the loss is mean cross-entropy in nats.

Every function here is pure: results depend only on the arguments and the
seed, so devices can be trained concurrently.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    EmptyDatasetError,
    NonFiniteParametersError,
    TrainingDivergenceError,
)

logger = logging.getLogger(__name__)


def parameter_count(layer_dims):
    """Number of weights and biases implied by a width list"""
    return sum(d_in * d_out + d_out for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]))


def _validate_dims(layer_dims):
    try:
        dims = tuple(int(d) for d in layer_dims)
    except (TypeError, ValueError):
        raise DimensionMismatchError(f"layer_dims must be a list of integers, got {layer_dims!r}")
    if len(dims) < 2:
        raise DimensionMismatchError("layer_dims needs at least an input and an output width")
    if any(d < 1 for d in dims):
        raise DimensionMismatchError(f"layer widths must be >= 1, got {list(dims)}")
    return dims


def _frozen_vector(values, expected_size, what):
    vector = np.array(values, dtype=np.float64).reshape(-1)
    if vector.size != expected_size:
        raise DimensionMismatchError(f"{what} has {vector.size} entries, layout needs {expected_size}")
    if not np.all(np.isfinite(vector)):
        raise NonFiniteParametersError(f"{what} contains NaN or Inf")
    vector.setflags(write=False)
    return vector


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus the layer widths that give it shape"""
    layer_dims: tuple
    values: np.ndarray

    def __post_init__(self):
        dims = _validate_dims(self.layer_dims)
        object.__setattr__(self, 'layer_dims', dims)
        object.__setattr__(self, 'values', _frozen_vector(self.values, parameter_count(dims), 'ModelParams.values'))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.layer_dims == other.layer_dims and np.array_equal(self.values, other.values)

    __hash__ = None

    def __len__(self):
        return self.values.size

    @property
    def num_parameters(self):
        return self.values.size

    def layers(self):
        """(W, b) views per layer, W shaped (fan_in, fan_out)"""
        return _unflatten(self.values, self.layer_dims)

    def same_layout(self, other):
        return self.layer_dims == other.layer_dims


@dataclass(frozen=True, eq=False)
class FisherDiag:
    """Diagonal Fisher information, same layout as the model it was computed at"""
    values: np.ndarray

    def __post_init__(self):
        vector = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise NonFiniteParametersError("FisherDiag contains NaN or Inf")
        if np.any(vector < 0):
            raise ValueError("FisherDiag entries must be >= 0")
        vector.setflags(write=False)
        object.__setattr__(self, 'values', vector)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class TrainConfig:
    """Local training hyper-parameters (E epochs, λ for EWC)"""
    learning_rate: float = 0.05
    local_epochs: int = 1
    batch_size: int = 16
    ewc_lambda: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.local_epochs) != self.local_epochs or self.local_epochs < 1:
            raise ValueError(f"local_epochs must be an integer >= 1, got {self.local_epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if not self.ewc_lambda >= 0:
            raise ValueError(f"ewc_lambda must be >= 0, got {self.ewc_lambda}")


@dataclass(frozen=True)
class EvalResult:
    mean_loss: float  # nats
    accuracy: float  # percent
    num_examples: int = 0


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------

def _unflatten(vector, dims):
    parts = []
    offset = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights = vector[offset:offset + d_in * d_out].reshape(d_in, d_out)
        offset += d_in * d_out
        bias = vector[offset:offset + d_out]
        offset += d_out
        parts.append((weights, bias))
    return parts


def _flatten(parts):
    return np.concatenate([np.ravel(p) for p in parts])


def _check_dataset(model, dataset):
    features = np.asarray(dataset.features)
    labels = np.asarray(dataset.labels)
    if features.ndim != 2:
        raise DimensionMismatchError(f"features must be a 2-D matrix, got shape {features.shape}")
    if features.shape[0] == 0:
        raise EmptyDatasetError("dataset has no examples")
    if features.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(
            f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
        )
    if features.shape[1] != model.layer_dims[0]:
        raise DimensionMismatchError(
            f"dataset has {features.shape[1]} features, model input width is {model.layer_dims[0]}"
        )
    if labels.min() < 0 or labels.max() >= model.layer_dims[-1]:
        raise DimensionMismatchError(
            f"labels must lie in [0, {model.layer_dims[-1]}), got [{labels.min()}, {labels.max()}]"
        )
    return features, labels


def _check_same_length(*vectors_and_names):
    sizes = {name: vec.size for vec, name in vectors_and_names}
    if len(set(sizes.values())) != 1:
        detail = ', '.join(f"{name}={size}" for name, size in sizes.items())
        raise DimensionMismatchError(f"vector lengths differ: {detail}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward(vector, dims, features):
    """Returns (layer inputs, hidden pre-activations, logits)"""
    layers = _unflatten(vector, dims)
    inputs = []
    pre_activations = []
    a = features
    for i, (weights, bias) in enumerate(layers):
        inputs.append(a)
        z = a @ weights + bias
        if i < len(layers) - 1:
            pre_activations.append(z)
            a = np.maximum(z, 0.0)
        else:
            return inputs, pre_activations, z


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(_log_softmax(np.atleast_2d(logits)))


def _output_delta(logits, labels):
    # d(-log p_y)/d logits, one row per example
    delta = np.exp(_log_softmax(logits))
    delta[np.arange(labels.shape[0]), labels] -= 1.0
    return delta


def _backward(vector, dims, inputs, pre_activations, delta_out):
    """Per-layer (layer input, per-example delta) pairs, deltas not averaged"""
    layers = _unflatten(vector, dims)
    deltas = [None] * len(layers)
    delta = delta_out
    for index in range(len(layers) - 1, -1, -1):
        deltas[index] = delta
        if index > 0:
            delta = (delta @ layers[index][0].T) * (pre_activations[index - 1] > 0)
    return list(zip(inputs, deltas))


def _batch_loss_and_gradient(vector, dims, features, labels):
    inputs, pre_activations, logits = _forward(vector, dims, features)
    n = labels.shape[0]
    loss = float(-_log_softmax(logits)[np.arange(n), labels].mean())
    pairs = _backward(vector, dims, inputs, pre_activations, _output_delta(logits, labels))
    parts = []
    for layer_input, delta in pairs:
        parts.append(layer_input.T @ delta / n)
        parts.append(delta.sum(axis=0) / n)
    return loss, _flatten(parts)


def loss_and_gradient(model, dataset, anchor=None, fisher=None, ewc_lambda=0.0):
    """
    Mean cross-entropy over the whole dataset and its gradient.

    With an anchor and Fisher diagonal the EWC term
    λ·Σ F_i (θ_i - θ*_i)² and its gradient are added.
    """
    features, labels = _check_dataset(model, dataset)
    loss, gradient = _batch_loss_and_gradient(model.values, model.layer_dims, features, labels)
    if anchor is not None and fisher is not None and ewc_lambda > 0:
        _check_same_length((model.values, 'model'), (anchor.values, 'anchor'), (fisher.values, 'fisher'))
        diff = model.values - anchor.values
        loss += ewc_lambda * float(np.dot(fisher.values, diff * diff))
        gradient = gradient + 2.0 * ewc_lambda * fisher.values * diff
    return loss, gradient


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def init_model(layer_dims, seed):
    """He-scaled normal weights (std sqrt(2/fan_in)), zero biases"""
    dims = _validate_dims(layer_dims)
    rng = np.random.default_rng(seed)
    parts = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        parts.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        parts.append(np.zeros(d_out))
    return ModelParams(dims, _flatten(parts))


def predict(model, features):
    """Top-1 class per row; ties go to the lowest class index"""
    _, _, logits = _forward(model.values, model.layer_dims, np.asarray(features, dtype=np.float64))
    return np.argmax(logits, axis=1)


def forward_eval(model, dataset):
    """Mean cross-entropy (nats) and top-1 accuracy (percent)"""
    features, labels = _check_dataset(model, dataset)
    _, _, logits = _forward(model.values, model.layer_dims, features)
    n = labels.shape[0]
    losses = -_log_softmax(logits)[np.arange(n), labels]
    correct = np.argmax(logits, axis=1) == labels
    return EvalResult(
        mean_loss=max(0.0, float(losses.mean())),
        accuracy=100.0 * float(correct.mean()),
        num_examples=int(n),
    )


def _run_sgd(model, dataset, cfg, seed, anchor=None, fisher=None, ewc_lambda=0.0):
    features, labels = _check_dataset(model, dataset)
    dims = model.layer_dims
    use_ewc = anchor is not None and fisher is not None and ewc_lambda > 0
    if use_ewc:
        _check_same_length((model.values, 'model'), (anchor.values, 'anchor'), (fisher.values, 'fisher'))

    rng = np.random.default_rng(seed)
    theta = model.values.copy()
    n = labels.shape[0]
    with np.errstate(over='ignore', invalid='ignore'):
        for epoch in range(1, cfg.local_epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                loss, gradient = _batch_loss_and_gradient(theta, dims, features[batch], labels[batch])
                if use_ewc:
                    diff = theta - anchor.values
                    loss += ewc_lambda * float(np.dot(fisher.values, diff * diff))
                    gradient = gradient + 2.0 * ewc_lambda * fisher.values * diff
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(epoch, f"loss became {loss}")
                theta -= cfg.learning_rate * gradient
            if not np.all(np.isfinite(theta)):
                raise TrainingDivergenceError(epoch, "parameters became non-finite")
    return ModelParams(dims, theta)


def sgd_epochs(model, dataset, cfg, seed):
    """cfg.local_epochs epochs of mini-batch SGD; the input model is left untouched"""
    return _run_sgd(model, dataset, cfg, seed)


def ewc_sgd_epochs(model, dataset, anchor, fisher, cfg, seed):
    """
    Same as sgd_epochs, plus the EWC pull towards ``anchor``.

    Each mini-batch gradient gains 2·λ·F_i·(θ_i - θ*_i) with λ = cfg.ewc_lambda.
    λ = 0 gives exactly the sgd_epochs result.
    """
    return _run_sgd(model, dataset, cfg, seed, anchor=anchor, fisher=fisher, ewc_lambda=cfg.ewc_lambda)


def ewc_penalty(model, anchor, fisher, ewc_lambda):
    """λ · Σ_i F_i · (θ_i - θ*_i)²"""
    if ewc_lambda < 0:
        raise ValueError(f"ewc_lambda must be >= 0, got {ewc_lambda}")
    _check_same_length((model.values, 'model'), (anchor.values, 'anchor'), (fisher.values, 'fisher'))
    diff = model.values - anchor.values
    return float(ewc_lambda * np.dot(fisher.values, diff * diff))


def compute_fisher_diag(model, dataset):
    """
    Empirical Fisher diagonal at ``model``.

    Mean over examples of the squared gradient of log p(y|x) for the observed
    label. A per-example weight gradient is the outer product of layer input
    and delta, so its elementwise square averages to (A²)ᵀ(D²)/n.
    """
    features, labels = _check_dataset(model, dataset)
    inputs, pre_activations, logits = _forward(model.values, model.layer_dims, features)
    pairs = _backward(model.values, model.layer_dims, inputs, pre_activations, _output_delta(logits, labels))
    n = labels.shape[0]
    parts = []
    for layer_input, delta in pairs:
        delta_sq = delta * delta
        parts.append((layer_input * layer_input).T @ delta_sq / n)
        parts.append(delta_sq.sum(axis=0) / n)
    return FisherDiag(_flatten(parts))


def average_fisher(fishers, weights):
    """n_k-weighted mean of several Fisher diagonals (computed on different devices)"""
    if not fishers:
        raise ValueError("no Fisher diagonals to average")
    if len(fishers) != len(weights):
        raise ValueError(f"{len(fishers)} Fisher diagonals but {len(weights)} weights")
    _check_same_length(*((f.values, f"fisher[{i}]") for i, f in enumerate(fishers)))
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("Fisher weights must be positive")
    stacked = np.stack([f.values for f in fishers])
    return FisherDiag((w / w.sum()) @ stacked)
