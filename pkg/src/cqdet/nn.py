"""Minimal numpy building blocks: affine layers and activations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True, eq=False)
class Affine:
    """y = x @ weight + bias, with ``weight`` stored as (in, out)."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"affine weight must be 2-D, got shape {w.shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (w.shape[1],):
                raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
            object.__setattr__(self, "bias", b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"expected input width {self.in_features}, got {x.shape[-1]}")
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    @classmethod
    def zeros(cls, n_in: int, n_out: int, bias: bool = True) -> "Affine":
        return cls(np.zeros((n_in, n_out)), np.zeros(n_out) if bias else None)

    @classmethod
    def random(cls, n_in: int, n_out: int, rng: np.random.Generator,
               scale: float | None = None, bias: bool = True) -> "Affine":
        if scale is None:
            scale = 1.0 / np.sqrt(n_in)
        w = rng.normal(0.0, scale, size=(n_in, n_out))
        b = rng.normal(0.0, 0.1 * scale, size=n_out) if bias else None
        return cls(w, b)


def relu(x):
    return np.maximum(x, 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_jacobian(x):
    """Jacobian ds_i/dx_j = s_i (delta_ij - s_j) of a 1-D softmax."""
    s = softmax(np.asarray(x, dtype=np.float64).ravel())
    return np.diag(s) - np.outer(s, s)
