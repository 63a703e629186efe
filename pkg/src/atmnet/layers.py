"""Small parameter containers and initialisation shared by all models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Array


@dataclass
class Linear:
    weight: Array
    bias: Array | None = None

    def __call__(self, x):
        return E.affine(x, self.weight, self.bias)


# Name suffix -> constant initial value. Everything else is a weight and gets
# fan-in scaled uniform init.
_CONSTANT_INIT = {
    ".bias": 0.0,
    ".beta": 0.0,
    ".gamma": 1.0,
    "peg.kernel": 0.0,   # PEG starts as the identity
    ".scale": 1.0,       # FPN top-down weights
    "offset_w.weight": 0.0,  # offset predictors start at "sample the query"
    "offset_h.weight": 0.0,
}


def init_param(rng: np.random.Generator, name: str, shape: tuple, dtype=np.float32) -> Array:
    for suffix, value in _CONSTANT_INIT.items():
        if name.endswith(suffix):
            return Array(np.full(shape, value, dtype=dtype), requires_grad=True)
    fan_in = int(np.prod(shape[:-1]))
    bound = 1.0 / np.sqrt(fan_in)
    return Array(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def no_weight_decay(name: str) -> bool:
    """Norm gains/shifts and biases are exempt from weight decay."""
    return name.endswith((".bias", ".beta", ".gamma"))
