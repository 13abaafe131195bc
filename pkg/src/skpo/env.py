"""Synthetic verifiable-reasoning environment.

A :class:`ChainProblem` asks the policy to emit ``ADD1``/``ADD2``/``ADD3``
tokens summing exactly to ``target`` and then ``STOP``, within ``max_len``
tokens. The policy only sees a short window of recent tokens, so the task is
stochastic for any window-limited policy and success probabilities are
non-trivial.

:class:`SuccessOracle` computes the exact probability of success from any
state by backward dynamic programming over (accumulated, steps_used, window).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .policy import PolicyParams

DEFAULT_WINDOW = 3


class ContractViolation(ValueError):
    """Raised when an operation is called outside its precondition."""


class Token(enum.IntEnum):
    ADD1 = 0
    ADD2 = 1
    ADD3 = 2
    STOP = 3
    PAD = 4  # context filler, never emitted
    QTAG = 5  # problem statement, generation conditioned on q


EMITTABLE = (Token.ADD1, Token.ADD2, Token.ADD3, Token.STOP)
N_ACTIONS = len(EMITTABLE)
N_SYMBOLS = len(Token)
INCREMENT = np.array([1, 2, 3, 0], dtype=np.int64)


class Mode(str, enum.Enum):
    UNCONDITIONAL = "unconditional"
    CONTINUAL = "continual"
    SKIP = "skip"


@dataclass(frozen=True)
class ChainProblem:
    """Reach ``target`` with ADD tokens, then STOP, in at most ``max_len`` tokens."""

    problem_id: str
    target: int
    max_len: int

    def __post_init__(self):
        if not 1 <= self.target <= 64:
            raise ValueError(f"target must be in [1, 64], got {self.target}")
        if not 2 <= self.max_len <= 16:
            raise ValueError(f"max_len must be in [2, 16], got {self.max_len}")
        if self.target > 3 * (self.max_len - 1):
            raise ValueError(
                f"target {self.target} unreachable with max_len {self.max_len}"
            )

    @property
    def vocab(self) -> tuple[Token, ...]:
        return EMITTABLE

    def to_record(self) -> dict:
        return {"problem_id": self.problem_id, "target": self.target, "max_len": self.max_len}

    @classmethod
    def from_record(cls, rec: dict) -> "ChainProblem":
        return cls(str(rec["problem_id"]), int(rec["target"]), int(rec["max_len"]))


@dataclass(frozen=True)
class EnvState:
    accumulated: int
    steps_used: int
    window: tuple[int, ...]
    max_len: int
    stopped: bool = False

    @property
    def terminal(self) -> bool:
        return self.stopped or self.steps_used >= self.max_len


@dataclass(frozen=True)
class ConditioningContext:
    """How a generation is conditioned: on ``q`` alone, ``s`` as hard prefix, or ``[s, q]``."""

    mode: Mode = Mode.UNCONDITIONAL
    segment: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "segment", tuple(int(t) for t in self.segment))
        for t in self.segment:
            _check_emittable(t)


UNCONDITIONAL = ConditioningContext()


@dataclass
class Trajectory:
    """Generated tokens with the context keys and log-probs they were sampled under."""

    problem_id: str
    context: ConditioningContext
    tokens: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    keys: list[tuple] = field(default_factory=list)
    state: EnvState | None = None
    phase: str = "response"

    def __len__(self):
        return len(self.tokens)

    @property
    def terminal(self) -> bool:
        return self.state is not None and self.state.terminal

    @property
    def prefix(self) -> tuple[int, ...]:
        """Conditioning token stream preceding the generated tokens."""
        return context_stream(self.context)


def _check_emittable(token) -> int:
    t = int(token)
    if t not in (0, 1, 2, 3):
        raise ValueError(f"token {token!r} is not in the vocabulary")
    return t


def context_stream(ctx: ConditioningContext) -> tuple[int, ...]:
    if ctx.mode is Mode.UNCONDITIONAL:
        return (Token.QTAG,)
    if ctx.mode is Mode.SKIP:
        return ctx.segment + (Token.QTAG,)
    return (Token.QTAG,) + ctx.segment


def initial_state(
    problem: ChainProblem,
    ctx: ConditioningContext = UNCONDITIONAL,
    window: int = DEFAULT_WINDOW,
) -> EnvState:
    """State from which generation starts under ``ctx``.

    CONTINUAL resumes the segment's sum and step budget. SKIP and
    UNCONDITIONAL start from zero with the full budget; SKIP differs only in
    what the first windows contain, so once the segment has scrolled out the
    two modes share rows.
    """
    stream = (int(Token.PAD),) * window + tuple(int(t) for t in context_stream(ctx))
    win = stream[-window:]
    if ctx.mode is not Mode.CONTINUAL:
        return EnvState(0, 0, win, problem.max_len)
    seg = ctx.segment
    if len(seg) > problem.max_len:
        raise ContractViolation("segment longer than max_len")
    if Token.STOP in seg[:-1]:
        raise ContractViolation("segment continues past STOP")
    acc = int(sum(INCREMENT[t] for t in seg))
    stopped = bool(seg) and seg[-1] == Token.STOP
    return EnvState(acc, len(seg), win, problem.max_len, stopped)


def step(state: EnvState, token) -> EnvState:
    if state.terminal:
        raise ContractViolation("cannot step a terminal state")
    t = _check_emittable(token)
    return EnvState(
        state.accumulated + int(INCREMENT[t]),
        state.steps_used + 1,
        state.window[1:] + (t,),
        state.max_len,
        t == Token.STOP,
    )


def play(
    problem: ChainProblem,
    tokens: Iterable[int],
    ctx: ConditioningContext = UNCONDITIONAL,
    window: int = DEFAULT_WINDOW,
) -> Trajectory:
    """Replay a fixed token sequence into a :class:`Trajectory` (no log-probs)."""
    state = initial_state(problem, ctx, window)
    traj = Trajectory(problem.problem_id, ctx, state=state)
    for t in tokens:
        traj.keys.append((problem.problem_id, state.window))
        state = step(state, t)
        traj.tokens.append(int(t))
    traj.state = state
    return traj


def is_correct(problem: ChainProblem, state: EnvState) -> bool:
    return state.stopped and state.accumulated == problem.target


def outcome(problem: ChainProblem, traj: Trajectory) -> bool:
    """True iff the trajectory stopped explicitly on exactly ``target``."""
    if not traj.terminal:
        raise ContractViolation("outcome of a non-terminal trajectory")
    return is_correct(problem, traj.state)


# -- window indexing shared by the oracle and the vectorised samplers --------


def window_index(window: Sequence[int]) -> int:
    idx = 0
    for t in window:
        idx = idx * N_SYMBOLS + int(t)
    return idx


def window_from_index(idx: int, window: int) -> tuple[int, ...]:
    out = []
    for _ in range(window):
        idx, r = divmod(idx, N_SYMBOLS)
        out.append(r)
    return tuple(reversed(out))


def successor_table(window: int) -> np.ndarray:
    """``next[w, a]``: index of the window after emitting action ``a`` from window ``w``."""
    n = N_SYMBOLS**window
    base = np.arange(n) % (N_SYMBOLS ** (window - 1))
    return base[:, None] * N_SYMBOLS + np.arange(N_ACTIONS)[None, :]


class SuccessOracle:
    """Exact success probability under a fixed policy, memoised per state.

    The policy's probability table for the problem is copied at construction,
    so later parameter updates do not leak into cached values.
    """

    def __init__(self, problem: ChainProblem, policy: "PolicyParams"):
        self.problem = problem
        self.window = policy.window
        self.table = policy.prob_table(problem.problem_id).copy()
        self.next = successor_table(self.window)
        self._memo: dict[tuple[int, int, int], float] = {}

    def value(self, state: EnvState) -> float:
        if len(state.window) != self.window:
            raise ContractViolation("state window length does not match the policy")
        if state.terminal:
            return 1.0 if is_correct(self.problem, state) else 0.0
        return self._v(state.accumulated, state.steps_used, window_index(state.window))

    def _v(self, acc: int, steps: int, w: int) -> float:
        target = self.problem.target
        if acc > target:
            return 0.0
        key = (acc, steps, w)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        probs = self.table[w]
        # STOP ends the episode: correct only on an exact hit
        v = probs[Token.STOP] if acc == target else 0.0
        if steps + 1 < self.problem.max_len:
            nxt = self.next[w]
            for a in range(3):
                if probs[a] > 0.0 and acc + a + 1 <= target:
                    v += probs[a] * self._v(acc + a + 1, steps + 1, int(nxt[a]))
        self._memo[key] = float(v)
        return float(v)


def oracle_success_prob(problem: ChainProblem, state: EnvState, policy: "PolicyParams") -> float:
    return SuccessOracle(problem, policy).value(state)


def make_dataset(
    n: int,
    target_range: tuple[int, int] = (4, 16),
    max_len_range: tuple[int, int] = (6, 12),
    seed=0,
) -> list[ChainProblem]:
    """Random reachable problems with ids ``p0000``, ``p0001``, ..."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        target = int(rng.integers(target_range[0], target_range[1] + 1))
        max_len = int(rng.integers(max_len_range[0], max_len_range[1] + 1))
        if target > 3 * (max_len - 1):
            continue
        out.append(ChainProblem(f"p{len(out):04d}", target, max_len))
    return out


def save_dataset(problems: Sequence[ChainProblem], path) -> None:
    with open(path, "w") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


def load_dataset(path) -> list[ChainProblem]:
    problems = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                problems.append(ChainProblem.from_record(json.loads(line)))
    ids = [p.problem_id for p in problems]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate problem_id in dataset")
    return problems
