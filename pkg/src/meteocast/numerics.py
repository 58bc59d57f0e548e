"""Dense float64 array helpers, activations, seeded RNG and a gradient oracle.

Arrays are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Only scalar broadcasting and broadcasting over the last axis are used
anywhere in the package.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

from .exceptions import ConfigurationError, NumericError, ShapeError

RNG_ALGORITHM = "numpy.PCG64"


def as_tensor(x, shape=None) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array, optionally checking its shape."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the algorithm is recorded as :data:`RNG_ALGORITHM`."""
    if seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "linear": lambda x: np.array(x, dtype=np.float64, copy=True),
}


def activate(x, kind: str) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(as_tensor(x))


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``f`` receives a perturbed copy of ``x`` for every coordinate, so it may
    keep a reference to its argument without seeing later perturbations.
    """
    if h <= 0:
        raise ConfigurationError(f"step h must be positive, got {h}")
    x = as_tensor(x).copy()
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
