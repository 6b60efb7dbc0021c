"""Two-layer sigmoid MLP with hand-written backpropagation.

Parameters live in one flat vector laid out as ``[W1, b1, W2, b2]`` with
``W1`` of shape (hidden, d_in) and ``W2`` of shape (d_out, hidden), both
row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


@dataclass(frozen=True)
class MLPShape:
    d_in: int
    hidden: int
    d_out: int

    @property
    def size(self) -> int:
        return self.hidden * self.d_in + self.hidden + self.d_out * self.hidden + self.d_out

    def unpack(self, params):
        h, d, o = self.hidden, self.d_in, self.d_out
        i = 0
        W1 = params[i:i + h * d].reshape(h, d)
        i += h * d
        b1 = params[i:i + h]
        i += h
        W2 = params[i:i + o * h].reshape(o, h)
        i += o * h
        b2 = params[i:i + o]
        return W1, b1, W2, b2

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Weights ~ N(0, 1/fan_in), biases zero."""
        W1 = rng.normal(0.0, 1.0 / np.sqrt(max(self.d_in, 1)), size=(self.hidden, self.d_in))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(self.hidden), size=(self.d_out, self.hidden))
        return np.concatenate([W1.ravel(), np.zeros(self.hidden), W2.ravel(), np.zeros(self.d_out)])


def forward(shape: MLPShape, params, X):
    """Return (outputs, hidden activations) for inputs ``X`` of shape (n, d_in)."""
    W1, b1, W2, b2 = shape.unpack(params)
    H = sigmoid(X @ W1.T + b1)
    return H @ W2.T + b2, H


def backward(shape: MLPShape, params, X, H, grad_out, per_sample=False):
    """Backpropagate ``grad_out`` (n, d_out) to parameter gradients.

    Returns the summed gradient, or an (n, size) matrix when ``per_sample``.
    """
    _, _, W2, _ = shape.unpack(params)
    delta = (grad_out @ W2) * H * (1.0 - H)
    if per_sample:
        n = X.shape[0]
        gW1 = (delta[:, :, None] * X[:, None, :]).reshape(n, -1)
        gW2 = (grad_out[:, :, None] * H[:, None, :]).reshape(n, -1)
        return np.concatenate([gW1, delta, gW2, grad_out], axis=1)
    return np.concatenate([(delta.T @ X).ravel(), delta.sum(0), (grad_out.T @ H).ravel(), grad_out.sum(0)])
