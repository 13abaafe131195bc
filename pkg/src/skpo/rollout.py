"""Single-pass upstream/downstream rollout and token-unit cost accounting.

All ``G`` slots start from ``q`` and are paused at a shared split position.
The segment closest to the median mean-surprisal is kept, every slot is
redirected onto ``[s, q]``, and the ``G`` downstream responses are generated
conditioned on that one prefix. The :class:`CostLedger` counts what a real
inference engine would generate, recompute and dispatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .credit import ConstantDefault, KLAdaptiveTracker
from .env import ChainProblem, ConditioningContext, Mode, Trajectory, play
from .policy import PolicyParams, log_prob, sample_trajectory
from .seeding import child_seed

PROMPT_TOKENS = 1  # q is a single problem-tag token in this environment


@dataclass(frozen=True)
class _MaxLenDefault:
    max_lens: dict
    fallback: float

    def __call__(self, pid) -> float:
        return self.max_lens.get(pid, self.fallback)


class LengthTracker(KLAdaptiveTracker):
    """Per-problem average downstream length; starts at the problem's ``max_len``."""

    def __init__(self, problems: Sequence[ChainProblem] = (), default_length: float | None = None, **kw):
        if default_length is not None:
            default = ConstantDefault(float(default_length))
        else:
            default = _MaxLenDefault({p.problem_id: float(p.max_len) for p in problems}, 16.0)
        super().__init__(default=default, **kw)

    def _check(self, observation: float) -> None:
        if observation <= 0:
            raise ValueError("lengths must be positive")


def update_length_tracker(tracker: LengthTracker, problem_id, downstream_lengths, d_kl: float) -> LengthTracker:
    """Fold the mean total length (segment + continuation) of a group into the tracker."""
    tracker.update(problem_id, float(np.mean(downstream_lengths)), d_kl)
    return tracker


def split_bounds(length: float) -> tuple[int, int]:
    hi = math.floor(length / 2)
    lo = max(1, math.ceil(length / 6))
    if lo > hi:
        lo = hi = max(1, hi)
    return lo, hi


def sample_split_position(tracker: LengthTracker, problem: ChainProblem, seed) -> int:
    """Integer split uniform on ``[ceil(L/6), floor(L/2)]``, at least 1."""
    lo, hi = split_bounds(tracker.get(problem.problem_id))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(rng.integers(lo, hi + 1))


def early_stop_fallback(length: int) -> int:
    if length < 1:
        raise ValueError("segment length must be >= 1")
    return max(1, length // 2)


def segment_deviation(policy: PolicyParams, segment: Trajectory, problem: ChainProblem | None = None) -> float:
    """Mean negative log-probability of the segment under ``policy``."""
    if len(segment.tokens) == 0:
        raise ValueError("empty segment")
    return float(-np.mean(log_prob(policy, segment)))


def select_median_segment(deviations: Sequence[float], tie_tol: float = 1e-12) -> int:
    d = np.asarray(deviations, dtype=float)
    if d.size < 1:
        raise ValueError("need at least one deviation")
    dist = np.abs(d - np.median(d))
    return int(np.flatnonzero(dist <= dist.min() + tie_tol)[0])


@dataclass
class CostLedger:
    generated_tokens: dict = field(default_factory=dict)
    recomputed_prefix_tokens: int = 0
    batch_dispatches: int = 0

    @property
    def total_generated(self) -> int:
        return sum(self.generated_tokens.values())

    def add_generated(self, phase: str, n: int) -> None:
        if n < 0:
            raise ValueError("token counts are nonnegative")
        self.generated_tokens[phase] = self.generated_tokens.get(phase, 0) + int(n)

    def merge(self, other: "CostLedger") -> "CostLedger":
        out = CostLedger(dict(self.generated_tokens), self.recomputed_prefix_tokens, self.batch_dispatches)
        for k, v in other.generated_tokens.items():
            out.add_generated(k, v)
        out.recomputed_prefix_tokens += other.recomputed_prefix_tokens
        out.batch_dispatches += other.batch_dispatches
        return out


@dataclass
class RolloutPlan:
    G: int
    split_position: int
    selected: int
    realized_splits: list[int]
    phases: list[str]


@dataclass
class SinglePassResult:
    plan: RolloutPlan
    segment: Trajectory
    downstream: list[Trajectory]
    ledger: CostLedger
    segments: list[Trajectory]
    deviations: list[float]

    @property
    def shared_prefix(self) -> tuple[int, ...]:
        return self.downstream[0].prefix


def _truncate(problem: ChainProblem, traj: Trajectory, n: int, window: int) -> Trajectory:
    state = play(problem, traj.tokens[:n], traj.context, window).state
    return Trajectory(
        traj.problem_id, traj.context, traj.tokens[:n], traj.logprobs[:n], traj.keys[:n], state, traj.phase
    )


def run_single_pass(
    problem: ChainProblem,
    policy: PolicyParams,
    G: int,
    seed,
    length_tracker: LengthTracker | None = None,
    split_position: int | None = None,
    two_batch: bool = False,
) -> SinglePassResult:
    """One SKPO rollout for ``problem``.

    ``two_batch=True`` models the naive variant that dispatches the segment
    and downstream phases separately; sampling is identical for equal seeds.
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    if split_position is None:
        tracker = length_tracker if length_tracker is not None else LengthTracker([problem])
        split_position = sample_split_position(tracker, problem, child_seed(seed, "split"))
    t_q = int(split_position)

    segments, realized, generated = [], [], 0
    for i in range(G):
        full = sample_trajectory(
            policy, problem, seed=child_seed(seed, "segment", i), max_tokens=t_q, phase="upstream"
        )
        generated += len(full.tokens)
        cut = early_stop_fallback(len(full.tokens)) if full.terminal else len(full.tokens)
        seg = _truncate(problem, full, cut, policy.window)
        segments.append(seg)
        realized.append(cut)

    devs = [segment_deviation(policy, s, problem) for s in segments]
    k = select_median_segment(devs)
    chosen = segments[k]

    ctx = ConditioningContext(Mode.SKIP, tuple(chosen.tokens))
    downstream = [
        sample_trajectory(policy, problem, ctx, seed=child_seed(seed, "downstream", i), phase="downstream")
        for i in range(G)
    ]

    ledger = CostLedger()
    ledger.add_generated("segment", generated)
    ledger.add_generated("downstream", sum(len(o) for o in downstream))
    ledger.recomputed_prefix_tokens = len(chosen.tokens) + PROMPT_TOKENS
    ledger.batch_dispatches = 2 if two_batch else 1

    phases = ["segment" if i == k else "redirected" for i in range(G)]
    plan = RolloutPlan(G, t_q, k, realized, phases)
    return SinglePassResult(plan, chosen, downstream, ledger, segments, devs)


def run_group_rollout(problem: ChainProblem, policy: PolicyParams, G: int, seed) -> tuple[list[Trajectory], CostLedger]:
    """GRPO-style rollout: ``G`` full responses from ``q`` in one dispatch."""
    trajs = [sample_trajectory(policy, problem, seed=child_seed(seed, "response", i)) for i in range(G)]
    ledger = CostLedger()
    ledger.add_generated("response", sum(len(t) for t in trajs))
    ledger.batch_dispatches = 1
    return trajs, ledger
