"""Shared fixtures and brute-force reference implementations."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from skpo.env import N_SYMBOLS, ChainProblem, EnvState, is_correct, make_dataset, step
from skpo.policy import PolicyParams

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store and print one acceptance line; the terminal summary repeats all of them."""
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'} - {detail}")


def random_policy(problems, scale: float = 1.0, seed=0, window: int = 3) -> PolicyParams:
    """Gaussian logits on every window of every problem tag."""
    rng = np.random.default_rng(seed)
    pol = PolicyParams(window)
    for p in problems:
        for w in itertools.product(range(N_SYMBOLS), repeat=window):
            pol.set_logits((p.problem_id, w), scale * rng.standard_normal(4))
    return pol


def brute_force_success(problem: ChainProblem, state: EnvState, policy: PolicyParams) -> float:
    """Sum of path probabilities over every completion, enumerated explicitly."""
    total = 0.0
    stack = [(state, 1.0)]
    while stack:
        s, w = stack.pop()
        if s.terminal:
            total += w * is_correct(problem, s)
            continue
        p = policy.probs((problem.problem_id, s.window))
        for a in range(4):
            stack.append((step(s, a), w * p[a]))
    return total


@pytest.fixture(scope="session")
def small_problems():
    return make_dataset(6, (3, 9), (4, 7), seed=3)


@pytest.fixture(scope="session")
def dataset20():
    return make_dataset(20, seed=1)


def path_policy(problem: ChainProblem, tokens, window: int = 3) -> PolicyParams:
    """Emits ``tokens`` from the unconditional prompt with probability exactly 1."""
    from skpo.policy import context_keys

    pol = PolicyParams(window)
    for key, tok in zip(context_keys(pol, problem, list(tokens)), tokens):
        row = np.zeros(4)
        row[tok] = 800.0
        pol.set_logits(key, row)
    return pol
