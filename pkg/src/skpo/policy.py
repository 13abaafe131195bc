"""Tabular softmax policy over (problem tag, context window) rows."""

from __future__ import annotations

import copy
import itertools
from typing import Iterable, Sequence

import numpy as np

from .env import (
    DEFAULT_WINDOW,
    N_ACTIONS,
    N_SYMBOLS,
    UNCONDITIONAL,
    ChainProblem,
    ConditioningContext,
    Mode,
    Token,
    Trajectory,
    _check_emittable,
    context_stream,
    initial_state,
    step,
    window_index,
)

__all__ = [
    "PolicyParams",
    "ConditioningContext",
    "Mode",
    "SparseGrad",
    "sample_trajectory",
    "log_prob",
    "grad_log_prob",
    "kl_divergence",
    "entropy",
    "heuristic_policy",
    "canonical_solution",
]

Key = tuple  # (problem tag, window tuple)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class PolicyParams:
    """Logit table keyed by ``(tag, window)``; unseen rows are all-zero (uniform)."""

    def __init__(self, window: int = DEFAULT_WINDOW, snapshot_id: int = 0):
        self.window = window
        self.snapshot_id = snapshot_id
        self._rows: dict[str, dict[tuple, np.ndarray]] = {}
        self._tables: dict[str, np.ndarray] = {}

    def __repr__(self):
        return f"PolicyParams(window={self.window}, rows={self.n_rows}, snapshot_id={self.snapshot_id})"

    @property
    def n_rows(self) -> int:
        return sum(len(r) for r in self._rows.values())

    def keys(self):
        for tag, rows in self._rows.items():
            for w in rows:
                yield (tag, w)

    def logits(self, key: Key) -> np.ndarray:
        tag, w = key
        row = self._rows.get(tag, {}).get(tuple(w))
        return np.zeros(N_ACTIONS) if row is None else row.copy()

    def set_logits(self, key: Key, row) -> None:
        tag, w = key
        row = np.asarray(row, dtype=float)
        if row.shape != (N_ACTIONS,):
            raise ValueError(f"logit row must have shape ({N_ACTIONS},)")
        if len(w) != self.window:
            raise ValueError("window length does not match the policy")
        self._rows.setdefault(tag, {})[tuple(int(t) for t in w)] = row.copy()
        self._tables.pop(tag, None)

    def probs(self, key: Key) -> np.ndarray:
        tag, w = key
        return self.prob_table(tag)[window_index(w)]

    def prob_table(self, tag: str) -> np.ndarray:
        """Probabilities for every window of ``tag``, shape ``(N_SYMBOLS**W, 4)``."""
        table = self._tables.get(tag)
        if table is None:
            z = np.zeros((N_SYMBOLS**self.window, N_ACTIONS))
            for w, row in self._rows.get(tag, {}).items():
                z[window_index(w)] = row
            table = softmax(z)
            table.setflags(write=False)
            self._tables[tag] = table
        return table

    def snapshot(self) -> "PolicyParams":
        """Frozen copy used as ``pi_old``; keeps the current ``snapshot_id``."""
        return copy.deepcopy(self)

    def apply_gradient(self, grad: "SparseGrad", lr: float) -> None:
        """In-place ascent step; advances ``snapshot_id``."""
        for (tag, w), g in grad.items():
            if not np.any(g):
                continue
            rows = self._rows.setdefault(tag, {})
            cur = rows.get(w)
            rows[w] = (np.zeros(N_ACTIONS) if cur is None else cur) + lr * g
            self._tables.pop(tag, None)
        self.snapshot_id += 1


class SparseGrad(dict):
    """Logit-gradient table keyed like :class:`PolicyParams`; absent rows are zero."""

    def add(self, key: Key, vec) -> None:
        cur = self.get(key)
        if cur is None:
            self[key] = np.array(vec, dtype=float)
        else:
            cur += vec

    def scaled(self, c: float) -> "SparseGrad":
        return SparseGrad({k: c * v for k, v in self.items()})

    def combine(self, other: "SparseGrad", c: float = 1.0) -> "SparseGrad":
        out = SparseGrad({k: v.copy() for k, v in self.items()})
        for k, v in other.items():
            out.add(k, c * v)
        return out

    def dense(self, key: Key) -> np.ndarray:
        g = self.get(key)
        return np.zeros(N_ACTIONS) if g is None else g


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_trajectory(
    policy: PolicyParams,
    problem: ChainProblem,
    ctx: ConditioningContext = UNCONDITIONAL,
    seed=None,
    max_tokens: int | None = None,
    phase: str = "response",
) -> Trajectory:
    """Sample until terminal (or ``max_tokens`` generated), recording log-probs.

    Deterministic for a fixed integer seed or ``SeedSequence``.
    """
    rng = _rng(seed)
    tag = problem.problem_id
    table = policy.prob_table(tag)
    state = initial_state(problem, ctx, policy.window)
    traj = Trajectory(tag, ctx, phase=phase)
    budget = problem.max_len if max_tokens is None else max_tokens
    u = rng.random(problem.max_len)
    i = 0
    while not state.terminal and len(traj.tokens) < budget:
        p = table[window_index(state.window)]
        c = np.cumsum(p)
        tok = min(int(np.searchsorted(c, u[i], side="right")), N_ACTIONS - 1)
        traj.keys.append((tag, state.window))
        traj.logprobs.append(float(np.log(p[tok])))
        traj.tokens.append(tok)
        state = step(state, tok)
        i += 1
    traj.state = state
    return traj


def context_keys(policy: PolicyParams, problem: ChainProblem, tokens, ctx=UNCONDITIONAL) -> list[Key]:
    state = initial_state(problem, ctx, policy.window)
    keys = []
    for t in tokens:
        keys.append((problem.problem_id, state.window))
        state = step(state, t)
    return keys


def log_prob(policy: PolicyParams, trajectory: Trajectory, ctx: ConditioningContext | None = None) -> np.ndarray:
    """Per-token log-probabilities of ``trajectory`` under ``policy``.

    Keys are rebuilt from the tokens and context, so this does not trust the
    keys stored on the trajectory.
    """
    ctx = trajectory.context if ctx is None else ctx
    tag = trajectory.problem_id
    table = policy.prob_table(tag)
    out = np.empty(len(trajectory.tokens))
    stream = (int(Token.PAD),) * policy.window
    win = (stream + tuple(int(t) for t in context_stream(ctx)))[-policy.window :]
    for i, t in enumerate(trajectory.tokens):
        t = _check_emittable(t)
        out[i] = np.log(table[window_index(win)][t])
        win = win[1:] + (t,)
    return out


def grad_log_prob(policy: PolicyParams, key: Key, token) -> SparseGrad:
    """Score function of one row: ``one_hot(token) - softmax(row)``."""
    t = _check_emittable(token)
    g = -policy.probs(key).copy()
    g[t] += 1.0
    return SparseGrad({(key[0], tuple(key[1])): g})


def _require(sample) -> list:
    sample = list(sample)
    if not sample:
        raise ValueError("visitation sample is empty")
    return sample


def row_kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def row_entropy(p: np.ndarray) -> float:
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask])))


def kl_divergence(p: PolicyParams, q: PolicyParams, visitation: Iterable[Key]) -> float:
    """Mean of exact per-row ``KL(p || q)`` over the visited context keys."""
    keys = _require(visitation)
    return max(0.0, sum(row_kl(p.probs(k), q.probs(k)) for k in keys) / len(keys))


def entropy(policy: PolicyParams, visitation: Iterable[Key]) -> float:
    keys = _require(visitation)
    return sum(row_entropy(policy.probs(k)) for k in keys) / len(keys)


def _visible_generated(window: Sequence[int]) -> int:
    """Tokens generated since the last problem tag, capped at the window size."""
    w = list(window)
    tags = [i for i, t in enumerate(w) if t == Token.QTAG]
    return len(w) - 1 - tags[-1] if tags else len(w)


def canonical_solution(problem: ChainProblem, window: int = DEFAULT_WINDOW) -> tuple[int, ...]:
    """A shortest correct response, preferring one whose context windows never repeat.

    Distinct windows let a window-limited policy follow the path exactly; when
    no such path exists (e.g. ``target = 3 * (max_len - 1)``) a path with
    repeats is returned. Adds close to ``target / n`` are tried first.
    """
    for distinct in (True, False):
        for n_add in range(max(1, -(-problem.target // 3)), problem.max_len):
            mean_step = problem.target / n_add
            order = sorted(range(3), key=lambda a: (abs(a + 1 - mean_step), -a))
            path = _dfs_path(problem, n_add, order, window, distinct)
            if path is not None:
                return path
    raise ValueError(f"target of {problem.problem_id} is unreachable")  # pragma: no cover


def _dfs_path(problem, n_add, order, window, distinct):
    start = initial_state(problem, window=window)

    def rec(state, left, seen, out):
        if distinct and state.window in seen:
            return None
        seen = seen | {state.window}
        if left == 0:
            return tuple(out) + (int(Token.STOP),) if state.accumulated == problem.target else None
        for a in order:
            remaining = problem.target - state.accumulated - (a + 1)
            if not (left - 1) <= remaining <= 3 * (left - 1):
                continue
            got = rec(step(state, a), left - 1, seen, out + [a])
            if got is not None:
                return got
        return None

    return rec(start, n_add, frozenset(), [])


def _fresh_view(w: Sequence[int]) -> tuple[int, ...]:
    """The window as it would look right after a fresh prompt (tokens before the tag -> PAD)."""
    w = tuple(int(t) for t in w)
    tags = [i for i, t in enumerate(w) if t == Token.QTAG]
    if not tags:
        return w
    k = tags[-1]
    return (int(Token.PAD),) * k + w[k:]


def heuristic_policy(
    problems: Sequence[ChainProblem],
    window: int = DEFAULT_WINDOW,
    noise: float = 0.0,
    seed=0,
    sharpness: float = 0.7,
    fidelity: float | None = 0.8,
) -> PolicyParams:
    """A crude "pretrained" base policy.

    Off the problem's :func:`canonical_solution` path, ADD tokens are drawn
    around the step size that would reach ``target`` in about ``target/2``
    adds and STOP becomes likelier once a few tokens have been produced. On the
    path the next canonical token gets probability ``fidelity`` (``None``
    disables the path). Rows depend only on tokens after the problem tag (plus
    optional seeded noise), so a base policy reads ``[s, q]`` like a fresh
    prompt.
    """
    rng = np.random.default_rng(seed)
    policy = PolicyParams(window)
    symbols = range(len(Token))
    for prob in problems:
        n_add = max(1, int(np.ceil(prob.target / 2)))
        n_add = min(n_add, prob.max_len - 1)
        mean_step = float(np.clip(prob.target / n_add, 1.0, 3.0))
        add_logits = -((np.arange(1, 4) - mean_step) ** 2) / (2 * sharpness**2)
        tail_hazard = 1.0 / (max(1, n_add - 2) + 1)
        hazards = (0.02, 0.05, 0.15)
        on_path = {}
        if fidelity is not None:
            if not 0.25 <= fidelity < 1.0:
                raise ValueError("fidelity must lie in [0.25, 1)")
            state, clash = initial_state(prob, window=window), set()
            for tok in canonical_solution(prob, window):
                if on_path.setdefault(state.window, tok) != tok:
                    clash.add(state.window)
                state = step(state, tok)
            for w in clash:
                del on_path[w]
        for w in itertools.product(symbols, repeat=window):
            if Token.PAD in w and Token.QTAG not in w:
                continue
            tok = on_path.get(_fresh_view(w))
            if tok is not None:
                row = np.full(N_ACTIONS, (1.0 - fidelity) / (N_ACTIONS - 1))
                row[tok] = fidelity
                row = np.log(row)
            else:
                c = _visible_generated(w)
                h = hazards[c] if c < len(hazards) else tail_hazard
                row = np.empty(N_ACTIONS)
                row[:3] = np.log(softmax(add_logits) * (1.0 - h))
                row[3] = np.log(h)
            row -= row.mean()
            if noise:
                row = row + noise * rng.standard_normal(N_ACTIONS)
            policy.set_logits((prob.problem_id, w), row)
    return policy
