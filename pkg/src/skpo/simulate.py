"""Vectorised completion sampling from many start states at once."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .env import INCREMENT, ChainProblem, EnvState, Token, is_correct, successor_table, window_index
from .policy import PolicyParams

_SUCC_CACHE: dict[int, np.ndarray] = {}


def _succ(window: int) -> np.ndarray:
    t = _SUCC_CACHE.get(window)
    if t is None:
        t = _SUCC_CACHE[window] = successor_table(window)
    return t


def simulate_completions(
    problem: ChainProblem,
    policy: PolicyParams,
    states: Sequence[EnvState],
    K: int,
    seed,
    return_lengths: bool = False,
):
    """Sample ``K`` completions from each state; returns a bool array ``(len(states), K)``.

    Uses the same inverse-CDF rule as :func:`skpo.policy.sample_trajectory`.
    With ``return_lengths`` also returns the generated token counts.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(states)
    cum = np.cumsum(policy.prob_table(problem.problem_id), axis=1)
    succ = _succ(policy.window)

    acc = np.repeat(np.array([s.accumulated for s in states], dtype=np.int64), K)
    steps = np.repeat(np.array([s.steps_used for s in states], dtype=np.int64), K)
    w = np.repeat(np.array([window_index(s.window) for s in states], dtype=np.int64), K)
    done = np.repeat(np.array([s.terminal for s in states]), K)
    correct = np.repeat(np.array([is_correct(problem, s) for s in states]), K)
    gen = np.zeros(n * K, dtype=np.int64)

    live = np.flatnonzero(~done)
    while live.size:
        u = rng.random(live.size)
        tok = np.minimum((cum[w[live]] <= u[:, None]).sum(axis=1), 3)
        acc[live] += INCREMENT[tok]
        steps[live] += 1
        gen[live] += 1
        w[live] = succ[w[live], tok]
        stop = tok == Token.STOP
        correct[live[stop]] = acc[live[stop]] == problem.target
        ended = stop | (steps[live] >= problem.max_len)
        live = live[~ended]
    out = correct.reshape(n, K)
    if return_lengths:
        return out, gen.reshape(n, K)
    return out
