"""Hidden-layer activations with their derivatives."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("sigmoid", "tanh", "relu")


def activation_apply(kind, a):
    """Return ``(f(a), f'(a))`` elementwise."""
    a = np.asarray(a, dtype=np.float64)
    if kind == "sigmoid":
        s = expit(a)
        return s, s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(a)
        return t, 1.0 - t * t
    if kind == "relu":
        return np.maximum(a, 0.0), (a > 0).astype(np.float64)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_value(kind, a):
    return activation_apply(kind, a)[0]


def derivative_from_value(kind, a, h):
    """f'(a) reusing the already computed h = f(a)."""
    if kind == "sigmoid":
        return h * (1.0 - h)
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (a > 0).astype(np.float64)
    raise ValueError(f"unknown activation {kind!r}")
