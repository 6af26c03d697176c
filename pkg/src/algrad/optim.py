"""SGD with classical momentum and the global gradient norm."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np

from .layers import ParameterSet


def zeros_like(params: ParameterSet) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((name, np.zeros(t.shape)) for name, t in params.items())


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float,
             momentum: float, velocity: Mapping[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    """In-place heavy-ball update: v <- momentum*v + g, p <- p - lr*v.

    Only parameters present in ``grads`` are touched. Returns the new velocity
    record. Nothing is modified if any gradient is non-finite.
    """
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape or velocity[name].shape != g.shape:
            raise ValueError(f"shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step refused")
    new_velocity = OrderedDict(velocity)
    for name, g in grads.items():
        v = momentum * velocity[name] + g
        new_velocity[name] = v
        p = params[name]
        p.data = p.data - lr * v
    return new_velocity


def frobenius_norm(grads: Mapping[str, np.ndarray] | Iterable[np.ndarray]) -> float:
    arrays = grads.values() if isinstance(grads, Mapping) else grads
    total = 0.0
    for g in arrays:
        g = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)
