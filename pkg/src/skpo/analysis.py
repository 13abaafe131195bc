"""Shortcut validation across conditioning strategies and oracle-scored advantage profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Mapping, Sequence

import numpy as np

from .credit import normalize, outcome_reward
from .env import ChainProblem, ConditioningContext, Mode, SuccessOracle, Trajectory, initial_state, play
from .policy import PolicyParams, sample_trajectory
from .parallel import pmap
from .seeding import child_seed

STRATEGIES = (Mode.UNCONDITIONAL, Mode.CONTINUAL, Mode.SKIP)
Z95 = 1.959963984540054


def split_grid(n: int = 6, lo: float = 1 / 6, hi: float = 1 / 2) -> np.ndarray:
    return np.linspace(lo, hi, n)


def cut_position(length: int, rel: float) -> int:
    """Segment length for a relative split; at least 1 and short of the final token."""
    if length < 2:
        raise ValueError("need a reference response of at least 2 tokens")
    return int(min(max(1, math.floor(rel * length)), length - 1))


@dataclass
class Interval:
    mean: float
    half_width: float
    n: int

    @property
    def lo(self) -> float:
        return self.mean - self.half_width

    @property
    def hi(self) -> float:
        return self.mean + self.half_width

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


def mean_ci(x, z: float = Z95) -> Interval:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return Interval(float("nan"), float("nan"), 0)
    se = x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else float("inf")
    return Interval(float(x.mean()), float(z * se), int(x.size))


@dataclass
class ShortcutReport:
    """Per-problem metric arrays keyed by ``(strategy, split index)``.

    Each array has one entry per evaluated problem, in problem order, so
    strategies can be compared with paired intervals.
    """

    splits: np.ndarray
    problem_ids: list[str]
    diversity: dict = field(default_factory=dict)
    zero_rate: dict = field(default_factory=dict)
    length: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    METRICS = ("diversity", "zero_rate", "length")

    def metric(self, name: str, strategy, split: int) -> np.ndarray:
        if name not in self.METRICS:
            raise KeyError(name)
        return getattr(self, name)[(Mode(strategy), split)]

    def summary(self, name: str, strategy, split: int) -> Interval:
        return mean_ci(self.metric(name, strategy, split))

    def paired_difference(self, name: str, a, b, split: int) -> Interval:
        """Interval for ``mean(a - b)`` over problems."""
        return mean_ci(self.metric(name, a, split) - self.metric(name, b, split))

    def rows(self) -> list[dict]:
        out = []
        for strategy in STRATEGIES:
            for j, rel in enumerate(self.splits):
                if (strategy, j) not in self.diversity:
                    continue
                row = {"strategy": strategy.value, "split": float(rel)}
                for name in self.METRICS:
                    ci = self.summary(name, strategy, j)
                    row[name] = ci.mean
                    row[f"{name}_ci"] = ci.half_width
                row["n_problems"] = len(self.problem_ids)
                out.append(row)
        return out


def _reference(problem, policy, seed, tries):
    for k in range(tries):
        ref = sample_trajectory(policy, problem, seed=child_seed(seed, "reference", k))
        if len(ref.tokens) >= 2:
            return ref
    return None


def _strategy_context(strategy: Mode, segment) -> ConditioningContext:
    if strategy is Mode.UNCONDITIONAL:
        return ConditioningContext()
    return ConditioningContext(strategy, tuple(segment))


def shortcut_eval(
    policy: PolicyParams,
    problems: Sequence[ChainProblem],
    strategies: Sequence = STRATEGIES,
    splits: Sequence[float] | None = None,
    G: int = 8,
    seed=0,
    reference_tries: int = 20,
    workers: int = 1,
) -> ShortcutReport:
    """Diversity, advantage-zero rate and length of ``G`` continuations per strategy.

    For each problem a reference response is drawn (redrawn while shorter than
    two tokens; problems that never produce one are listed in ``skipped``) and
    cut at each relative split. The final answer of a continuation is its
    terminal accumulated sum; length excludes the conditioning prefix.
    """
    strategies = [Mode(s) for s in strategies]
    splits = split_grid() if splits is None else np.asarray(splits, dtype=float)
    if G < 1:
        raise ValueError("G must be >= 1")
    unit = partial(_shortcut_problem, policy, strategies, tuple(splits), G, seed, reference_tries)
    per_problem = pmap(unit, list(enumerate(problems)), workers)

    kept = [(p, res) for p, res in zip(problems, per_problem) if res is not None]
    report = ShortcutReport(
        splits, [p.problem_id for p, _ in kept], skipped=[p.problem_id for p, r in zip(problems, per_problem) if r is None]
    )
    for strategy in strategies:
        for si in range(len(splits)):
            key = (strategy, si)
            cols = np.array([res[key] for _, res in kept], dtype=float).reshape(-1, 3)
            report.diversity[key], report.zero_rate[key], report.length[key] = cols[:, 0], cols[:, 1], cols[:, 2]
    return report


def _shortcut_problem(policy, strategies, splits, G, seed, reference_tries, item):
    j, p = item
    ref = _reference(p, policy, child_seed(seed, j), reference_tries)
    if ref is None:
        return None
    out = {}
    for strategy in strategies:
        for si, rel in enumerate(splits):
            seg = ref.tokens[: cut_position(len(ref.tokens), rel)]
            ctx = _strategy_context(strategy, seg)
            outs = [
                sample_trajectory(policy, p, ctx, seed=child_seed(seed, j, strategy.value, si, i)) for i in range(G)
            ]
            correct = [outcome_reward(p, o) > 0 for o in outs]
            out[(strategy, si)] = (
                len({o.state.accumulated for o in outs}),
                float(all(correct) or not any(correct)),
                float(np.mean([len(o.tokens) for o in outs])),
            )
    return out


# -- inter-method advantage profile ----------------------------------------------


def token_bins(length: int, bins: int = 100) -> np.ndarray:
    """Bin index ``floor(bins * t / length)`` of each token position ``t``."""
    if length < 1:
        raise ValueError("empty response")
    return (bins * np.arange(length)) // length


def binned_segment_rewards(
    problem: ChainProblem, response: Trajectory, oracle: SuccessOracle, bins: int = 100
) -> np.ndarray:
    """Oracle reward ``2 V - 1`` of the prefix ending at each bin's last token.

    Bins that hold no token (responses shorter than ``bins``) inherit the
    prefix of the nearest earlier token.
    """
    n = len(response.tokens)
    tb = token_bins(n, bins)
    last = np.full(bins, -1)
    for t, b in enumerate(tb):
        last[b] = t
    last = np.maximum.accumulate(last)
    values = {}
    out = np.empty(bins)
    for b in range(bins):
        plen = int(last[b]) + 1
        if plen not in values:
            state = play(problem, response.tokens[:plen], response.context, oracle.window).state
            values[plen] = 2.0 * oracle.value(state) - 1.0
        out[b] = values[plen]
    return out


@dataclass
class AdvantageProfile:
    methods: list[str]
    bins: int
    mean_advantage: np.ndarray  # (methods, bins), averaged over covered problems
    mean_reward: np.ndarray
    n: int  # problems in which every method had a correct response
    coverage: dict  # method -> problems with at least one correct response
    cell_advantages: np.ndarray  # (covered problems, methods, bins)

    def rows(self) -> list[dict]:
        return [
            {
                "method": m,
                "bin": b,
                "mean_advantage": float(self.mean_advantage[i, b]),
                "mean_reward": float(self.mean_reward[i, b]),
                "n": self.n,
            }
            for i, m in enumerate(self.methods)
            for b in range(self.bins)
        ]


def advantage_profile(
    policies: Mapping[str, PolicyParams],
    problems: Sequence[ChainProblem],
    eval_policy: PolicyParams | None = None,
    bins: int = 100,
    n_responses: int = 8,
    seed=0,
    workers: int = 1,
) -> AdvantageProfile:
    """Per-bin inter-method advantages of oracle-scored correct responses.

    Each method samples ``n_responses`` per problem; only correct ones are
    scored. A method's bin reward for a problem is the mean over its correct
    responses, and advantages are normalised across methods at each
    (problem, bin). Problems where some method has no correct response are
    dropped. ``eval_policy`` defaults to the method policy with the highest
    oracle accuracy on ``problems``.
    """
    methods = sorted(policies)
    if len(methods) < 2:
        raise ValueError("advantage_profile needs at least 2 methods")
    if eval_policy is None:
        eval_policy = _strongest(policies, problems)
    unit = partial(_profile_problem, {m: policies[m] for m in methods}, eval_policy, bins, n_responses, seed)
    per_problem = pmap(unit, list(enumerate(problems)), workers)

    coverage = {m: sum(r[i] is not None for r in per_problem) for i, m in enumerate(methods)}
    rewards = [np.stack(r) for r in per_problem if all(x is not None for x in r)]
    if rewards:
        cell_adv = np.stack([normalize(r, axis=0) for r in rewards])
        mean_adv, mean_rew = cell_adv.mean(axis=0), np.stack(rewards).mean(axis=0)
    else:
        cell_adv = np.zeros((0, len(methods), bins))
        mean_adv = mean_rew = np.full((len(methods), bins), np.nan)
    return AdvantageProfile(methods, bins, mean_adv, mean_rew, len(rewards), coverage, cell_adv)


def _profile_problem(policies, eval_policy, bins, n_responses, seed, item):
    j, p = item
    oracle = SuccessOracle(p, eval_policy)
    out = []
    for m, pol in policies.items():
        resp = [sample_trajectory(pol, p, seed=child_seed(seed, m, j, i)) for i in range(n_responses)]
        good = [o for o in resp if outcome_reward(p, o) > 0]
        out.append(np.mean([binned_segment_rewards(p, o, oracle, bins) for o in good], axis=0) if good else None)
    return out


def _strongest(policies, problems) -> PolicyParams:
    def acc(pol):
        return np.mean([SuccessOracle(p, pol).value(initial_state(p, window=pol.window)) for p in problems])

    return max((policies[m] for m in sorted(policies)), key=acc)


__all__ = [
    "STRATEGIES",
    "ShortcutReport",
    "AdvantageProfile",
    "Interval",
    "advantage_profile",
    "binned_segment_rewards",
    "cut_position",
    "mean_ci",
    "shortcut_eval",
    "split_grid",
    "token_bins",
]
