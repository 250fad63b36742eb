"""Small helpers for creating and applying linear-layer parameters."""

import numpy as np

from . import tensor as T


def linear_params(rng: np.random.Generator, fan_in: int, fan_out: int):
    """Weight uniform in +/- 1/sqrt(fan_in), bias zero."""
    bound = 1.0 / np.sqrt(fan_in)
    w = T.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = T.Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


def linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.matmul(x, w) + b
