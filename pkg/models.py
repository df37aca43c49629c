"""
Small classifiers over a flat parameter vector

Layout of the parameter vector, layer by layer: the weight matrix of
shape (fan_in, fan_out) in row-major order, then the fan_out biases.
A logistic model is the single-layer case.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from utils import DomainError

MODEL_KINDS = ('logistic', 'mlp')


@dataclass(frozen=True)
class ModelArch:
    """Architecture of a multinomial logistic regression or a ReLU MLP"""
    kind: str
    input_dim: int
    num_classes: int
    hidden: Tuple[int, ...] = field(default_factory=tuple)
    activation: str = 'relu'

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise DomainError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise DomainError("num_classes must be at least 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise DomainError("all layer widths must be at least 1")
        if self.kind == 'logistic' and self.hidden:
            raise DomainError("a logistic model has no hidden layers")
        if self.activation != 'relu':
            raise DomainError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, 'hidden', tuple(self.hidden))

    def layer_sizes(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_sizes())


@dataclass
class Batch:
    """Mini-batch of examples"""
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.labels.shape[0])


def unpack_params(theta: np.ndarray, arch: ModelArch) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into the flat vector"""
    if theta.ndim != 1 or theta.size != arch.param_count():
        raise DomainError(
            f"parameter vector has length {theta.size}, architecture expects {arch.param_count()}")
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_sizes():
        w = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_params(arch: ModelArch, seed: int, dtype=np.float64) -> np.ndarray:
    """Weights uniform in ±1/√fan_in, biases zero"""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_sizes():
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks).astype(dtype)


def _check_batch(theta: np.ndarray, arch: ModelArch, batch: Batch):
    x, y = batch.features, batch.labels
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DomainError(f"features must have shape (m, {arch.input_dim}), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise DomainError("labels and features disagree on the number of examples")
    if x.shape[0] == 0:
        raise DomainError("batch is empty")
    if np.any(y < 0) or np.any(y >= arch.num_classes):
        raise DomainError("labels out of range")


def _forward(theta: np.ndarray, arch: ModelArch, x: np.ndarray):
    """Logits plus the per-layer activations needed by backprop"""
    layers = unpack_params(theta, arch)
    x = x.astype(theta.dtype, copy=False)
    activations = [x]
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        if i < len(layers) - 1:
            a = np.maximum(z, 0)
            activations.append(a)
        else:
            a = z
    return a, activations, layers


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def loss(theta: np.ndarray, arch: ModelArch, batch: Batch) -> float:
    """Mean cross-entropy over the batch"""
    _check_batch(theta, arch, batch)
    logits, _, _ = _forward(theta, arch, batch.features)
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def loss_and_gradient(theta: np.ndarray, arch: ModelArch, batch: Batch) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient by backpropagation"""
    _check_batch(theta, arch, batch)
    m = len(batch)
    logits, activations, layers = _forward(theta, arch, batch.features)
    logp = log_softmax(logits)
    value = float(-logp[np.arange(m), batch.labels].mean())

    delta = np.exp(logp)
    delta[np.arange(m), batch.labels] -= 1.0
    delta /= m

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_prev = activations[i]
        grads.append((a_prev.T @ delta, delta.sum(axis=0)))
        if i > 0:
            # ReLU subgradient at 0 is 0
            delta = (delta @ w.T) * (a_prev > 0)
    grads.reverse()

    flat = np.concatenate([part for gw, gb in grads for part in (gw.ravel(), gb)])
    return value, flat.astype(theta.dtype, copy=False)


def gradient(theta: np.ndarray, arch: ModelArch, batch: Batch) -> np.ndarray:
    return loss_and_gradient(theta, arch, batch)[1]


def predict(theta: np.ndarray, arch: ModelArch, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index"""
    if features.ndim != 2 or features.shape[1] != arch.input_dim:
        raise DomainError(f"features must have shape (m, {arch.input_dim}), got {features.shape}")
    logits, _, _ = _forward(theta, arch, features)
    return np.argmax(logits, axis=1)


def accuracy(theta: np.ndarray, arch: ModelArch, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of correctly classified rows"""
    if labels.shape != (features.shape[0],):
        raise DomainError("labels and features disagree on the number of examples")
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(theta, arch, features) == labels))
