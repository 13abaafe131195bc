"""Input checks shared by the estimator, config and CLI layers."""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .env import ChainProblem


def check_problems(X, id_prefix: str = "p") -> list[ChainProblem]:
    """Accept ``ChainProblem`` objects or an ``(n, 2)`` array of ``[target, max_len]`` rows.

    Array rows get ids ``p0000``, ``p0001``, ... in row order.
    """
    if isinstance(X, ChainProblem):
        raise TypeError("expected a sequence of problems, got a single ChainProblem")
    if isinstance(X, Sequence) and X and all(isinstance(p, ChainProblem) for p in X):
        problems = list(X)
    else:
        arr = np.asarray(X)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"expected problems or an (n, 2) array of [target, max_len], got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise ValueError("empty problem set")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
                raise ValueError("targets and max_len must be integers")
        problems = [
            ChainProblem(f"{id_prefix}{i:04d}", int(t), int(m)) for i, (t, m) in enumerate(arr.tolist())
        ]
    if not problems:
        raise ValueError("empty problem set")
    ids = [p.problem_id for p in problems]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate problem_id in problem set")
    return problems


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_probability(value, name: str) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return v


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a nonnegative integer, got {seed!r}")
    return int(seed)
