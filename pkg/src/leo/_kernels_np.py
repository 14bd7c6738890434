"""Pure-numpy implementations of the array kernels behind the autodiff graph.

This is the reference backend; ``leo._ckernels`` provides compiled fast paths
for the same functions. Every function takes C-contiguous float64 arrays and
returns a C-contiguous float64 array. Division by zero and log of non-positive
inputs follow the propagate-NaN policy instead of raising.
"""

import numpy as np


def add(a, b):
    return np.add(a, b)


def sub(a, b):
    return np.subtract(a, b)


def mul(a, b):
    return np.multiply(a, b)


def div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.divide(a, b)


def neg(a):
    return np.negative(a)


def exp(a):
    with np.errstate(over="ignore"):
        return np.exp(a)


def log(a):
    # Non-positive inputs are recorded as NaN (including 0, by contract).
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    if np.any(a <= 0.0):
        out = np.where(a > 0.0, out, np.nan)
    return out


def relu(a):
    return np.maximum(a, 0.0)


def square(a):
    return np.square(a)


def sqrt(a):
    with np.errstate(invalid="ignore"):
        return np.sqrt(a)


def matmul(a, b):
    return np.matmul(a, b)


def transpose(a):
    return np.ascontiguousarray(a.T)


def reduce_sum(a, axes):
    """Sum over the given axes (tuple) or everything when axes is None."""
    if axes is None:
        return np.asarray(a.sum())
    return a.sum(axis=axes)


def broadcast_to(a, shape):
    # reshape restores 0-d outputs that ascontiguousarray promotes to 1-d
    return np.ascontiguousarray(np.broadcast_to(a, shape)).reshape(shape)
