"""Finite-difference oracles and random smooth expressions shared by the tests."""
from __future__ import annotations

import numpy as np

from mbcritic import diffcore as dc


def fd_step(x: float) -> float:
    return 1e-6 * max(1.0, abs(x))


def central_diff(f, x: np.ndarray) -> np.ndarray:
    """Central differences of a scalar (or array-valued) ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = []
    for i in np.ndindex(x.shape):
        h = fd_step(x[i])
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h))
    return np.reshape(np.array(out), x.shape + np.shape(out[0]))


def rel_err(a, b, floor: float = 1.0) -> float:
    """Largest ``|a - b| / max(|b|, floor)`` entry."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


_UNARY = [
    lambda e: dc.tanh(e),
    lambda e: dc.sin(e),
    lambda e: dc.cos(e),
    lambda e: dc.exp(dc.tanh(e)),
    lambda e: dc.log(1.0 + e * e),
    lambda e: e ** 2,
    lambda e: e / (1.0 + e * e),
]
_BINARY = [
    lambda a, b: a + b,
    lambda a, b: a - b,
    lambda a, b: a * b,
    lambda a, b: a / (2.0 + dc.tanh(b)),
]


def random_expr(rng: np.random.Generator, leaves, depth: int = 4):
    """A random smooth scalar expression over ``leaves`` (bounded growth on [-2, 2])."""
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.15:
            return dc.const(float(rng.uniform(-2, 2)))
        return leaves[int(rng.integers(len(leaves)))]
    if rng.random() < 0.45:
        return _UNARY[int(rng.integers(len(_UNARY)))](random_expr(rng, leaves, depth - 1))
    a = random_expr(rng, leaves, depth - 1)
    b = random_expr(rng, leaves, depth - 1)
    return _BINARY[int(rng.integers(len(_BINARY)))](a, b)
