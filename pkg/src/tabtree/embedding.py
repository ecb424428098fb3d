"""Monotone sigmoid embeddings for ordinal quantile tokens.

Each embedding dimension ``d`` applies a sigmoid with its own slope
``4 * scale_factor(d)`` and shift ``offset(d)`` to the normalised quantile id,
so every dimension is strictly increasing in the id and distances between
embedded vectors order the same way as distances between ids.
"""

from __future__ import annotations

import math

import numpy as np


def scale_factor(d: int) -> int:
    # isqrt keeps the floor exact for large d
    return (1 + math.isqrt(1 + 4 * d)) // 2


def offset(d: int) -> float:
    s = scale_factor(d)
    return (-4.0 * s**3 + (4 * d + 2) * s) / (2 * s - 1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def quantile_embedding_value(i: int, d: int, q: int) -> float:
    if not 0 <= i < q:
        raise ValueError(f"quantile id {i} outside 0..{q - 1}")
    s = scale_factor(d)
    return float(_sigmoid(4 * s * (i / q - 0.5) + offset(d)))


def scale_factors(dim: int) -> np.ndarray:
    return np.array([scale_factor(d) for d in range(dim)], dtype=np.int64)


def offsets(dim: int) -> np.ndarray:
    return np.array([offset(d) for d in range(dim)], dtype=np.float64)


def init_quantile_embedding(q: int, dim: int) -> np.ndarray:
    """``q x dim`` matrix with entry ``[i, d] = sigmoid(4 S_d (i/q - 1/2) + O_d)``."""
    if q < 1 or dim < 1:
        raise ValueError("q and dim must be positive")
    s = scale_factors(dim).astype(np.float64)
    i = np.arange(q, dtype=np.float64)[:, None]
    return _sigmoid(4.0 * s[None, :] * (i / q - 0.5) + offsets(dim)[None, :])


def construction_oracles(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Scale factors and offsets built literally: value ``s`` repeated ``2s`` times,
    offsets evenly spaced over ``[-2s, 2s]`` within each group."""
    n = 1
    while n * (n + 1) < dim:
        n += 1
    ar = np.arange(n) + 1
    scales = np.repeat(ar, 2 * ar)[:dim]
    offs = np.concatenate([np.linspace(-2 * x, 2 * x, 2 * x) for x in ar])[:dim]
    return scales, offs
