"""
Feed-forward network with manual backpropagation.

Every layer keeps what its backward pass needs from the last forward call
(the "memory" of a vanilla numpy net) and exposes its parameters and their
gradients as parallel lists so an optimizer can walk them.
"""
from typing import List

import numpy as np

from app.core.errors import DegenerateEmbeddingError, DimensionMismatchError


class Layer:
    """Base layer: identity with no parameters"""
    kind = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> List[np.ndarray]:
        return []

    def grads(self) -> List[np.ndarray]:
        return []


class AffineLayer(Layer):
    """y = x W^T + b for a batch of row vectors"""
    kind = "affine"

    def __init__(self, weights: np.ndarray, biases: np.ndarray):
        weights = np.array(weights, dtype=np.float64)
        biases = np.array(biases, dtype=np.float64)
        if weights.ndim != 2 or biases.shape != (weights.shape[0],):
            raise DimensionMismatchError(
                f"affine layer needs W (out, in) and b (out,), got {weights.shape} and {biases.shape}"
            )
        self.weights = weights
        self.biases = biases
        self.grad_weights = np.zeros_like(weights)
        self.grad_biases = np.zeros_like(biases)
        self._inputs = None

    @classmethod
    def he_uniform(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "AffineLayer":
        limit = np.sqrt(6.0 / fan_in)
        return cls(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out))

    @property
    def fan_in(self) -> int:
        return int(self.weights.shape[1])

    @property
    def fan_out(self) -> int:
        return int(self.weights.shape[0])

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.fan_in:
            raise DimensionMismatchError(f"affine layer expects {self.fan_in} inputs, got {x.shape[-1]}")
        self._inputs = x
        return x @ self.weights.T + self.biases

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grad_weights = grad_out.T @ self._inputs
        self.grad_biases = grad_out.sum(axis=0)
        return grad_out @ self.weights

    def params(self) -> List[np.ndarray]:
        return [self.weights, self.biases]

    def grads(self) -> List[np.ndarray]:
        return [self.grad_weights, self.grad_biases]


class ReluLayer(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad_out, 0.0)


class NormalizeLayer(Layer):
    """z = x / ||x||; the backward pass projects onto the tangent space at z"""
    kind = "normalize"

    def __init__(self):
        self._outputs = None
        self._norms = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateEmbeddingError("pre-normalization activation is the zero vector")
        self._norms = norms
        self._outputs = x / norms
        return self._outputs

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        z = self._outputs
        radial = np.sum(grad_out * z, axis=-1, keepdims=True)
        return (grad_out - radial * z) / self._norms


class FeedForwardNetwork:
    """An ordered stack of layers operating on (n, features) batches"""

    def __init__(self, layers: List[Layer]):
        if not layers:
            raise ValueError("a network needs at least one layer")
        self.layers = layers

    @property
    def dim_in(self) -> int:
        for layer in self.layers:
            if isinstance(layer, AffineLayer):
                return layer.fan_in
        raise ValueError("network has no affine layer")

    @property
    def dim_out(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, AffineLayer):
                return layer.fan_out
        raise ValueError("network has no affine layer")

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(output); fills every layer's grads and returns d(loss)/d(input)"""
        grad = grad_out
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> List[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def weight_mask(self) -> List[bool]:
        """True for weight matrices (decayed), False for biases"""
        return [p.ndim == 2 for p in self.params()]


def build_mlp(
    dim_in: int,
    hidden_width: int,
    hidden_layers: int,
    rng: np.random.Generator,
) -> List[Layer]:
    """affine -> rectifier blocks shared by the encoder and the CE twin"""
    layers: List[Layer] = []
    fan_in = dim_in
    for _ in range(hidden_layers):
        layers.append(AffineLayer.he_uniform(fan_in, hidden_width, rng))
        layers.append(ReluLayer())
        fan_in = hidden_width
    return layers


class SgdMomentum:
    """Heavy-ball SGD with L2 weight decay on weight matrices, updating arrays in place"""

    def __init__(self, params: List[np.ndarray], momentum: float, weight_decay: float, decay_mask: List[bool]):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: List[np.ndarray], lr: float) -> None:
        for param, grad, velocity, decay in zip(self.params, grads, self.velocity, self.decay_mask):
            if decay and self.weight_decay:
                grad = grad + self.weight_decay * param
            velocity *= self.momentum
            velocity += grad
            param -= lr * velocity
