"""Rewards, advantages and KL-adaptive per-prompt trackers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .env import ChainProblem, Trajectory, outcome

SIGMA_FLOOR = 1e-8
RHO_MIN = 0.875
RHO_MAX = 0.96
TAU_HALF = 8.0
PRIORITY_EPS = 0.05


def outcome_reward(problem: ChainProblem, trajectory: Trajectory) -> float:
    """+1 for a correct trajectory, -1 otherwise."""
    return 1.0 if outcome(problem, trajectory) else -1.0


def upstream_reward(downstream_rewards: Sequence[float]) -> float:
    """Monte Carlo value of a segment: mean of its downstream outcome rewards."""
    if len(downstream_rewards) == 0:
        raise ValueError("upstream_reward needs at least one downstream reward")
    return float(np.mean(downstream_rewards))


def map_reward(r):
    """[-1, 1] -> [0, 1]."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < -1.0) or np.any(r_arr > 1.0):
        raise ValueError(f"reward {r!r} outside [-1, 1]")
    return (r + 1.0) / 2.0


def unmap_reward(v):
    """[0, 1] -> [-1, 1]."""
    v_arr = np.asarray(v, dtype=float)
    if np.any(v_arr < 0.0) or np.any(v_arr > 1.0):
        raise ValueError(f"mapped value {v!r} outside [0, 1]")
    return 2.0 * v - 1.0


@dataclass
class AdvantageBatch:
    raw: np.ndarray
    normalized: np.ndarray
    mean: float
    std: float

    @property
    def all_zero(self) -> bool:
        return not np.any(self.normalized)


def normalize(x, axis: int = -1, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Centre and scale by population std along ``axis``; rows with std < floor become 0."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=axis, keepdims=True)
    dev = x - mu
    sd = np.sqrt(np.mean(dev * dev, axis=axis, keepdims=True))
    ok = sd >= floor
    return np.where(ok, dev / np.where(ok, sd, 1.0), 0.0)


def _standardize(values, what: str) -> AdvantageBatch:
    raw = np.asarray(values, dtype=float)
    if raw.ndim != 1 or raw.size < 2:
        raise ValueError(f"{what} needs at least 2 values, got {raw.size}")
    mu = float(raw.mean())
    sd = float(np.sqrt(np.mean((raw - mu) ** 2)))
    return AdvantageBatch(raw, normalize(raw), mu, sd)


def group_relative_advantages(rewards: Sequence[float]) -> AdvantageBatch:
    """``(R_i - mean) / std`` within one group (population std, zero below 1e-8)."""
    return _standardize(rewards, "group_relative_advantages")


def batch_normalize(advantages: Sequence[float]) -> AdvantageBatch:
    return _standardize(advantages, "batch_normalize")


def forgetting_factor(
    d_kl: float, tau_half: float = TAU_HALF, rho_min: float = RHO_MIN, rho_max: float = RHO_MAX
) -> float:
    if d_kl < 0:
        raise ValueError("d_kl must be nonnegative")
    return float(np.clip(2.0 ** (-d_kl / tau_half), rho_min, rho_max))


@dataclass
class TrackerEntry:
    value: float
    n: float = 0.0
    seen: bool = False


@dataclass(frozen=True)
class ConstantDefault:
    """Picklable ``key -> value`` default."""

    value: float

    def __call__(self, key) -> float:
        return self.value


@dataclass
class KLAdaptiveTracker:
    """Per-key EMA whose step size ``1/(rho*n + 1)`` grows as the policy drifts.

    ``default`` gives the pre-observation value for a key.
    """

    default: Callable[[Hashable], float] = ConstantDefault(0.5)
    tau_half: float = TAU_HALF
    rho_min: float = RHO_MIN
    rho_max: float = RHO_MAX
    entries: dict = field(default_factory=dict)

    def get(self, key) -> float:
        e = self.entries.get(key)
        return self.default(key) if e is None else e.value

    def count(self, key) -> float:
        e = self.entries.get(key)
        return 0.0 if e is None else e.n

    def seen(self, key) -> bool:
        e = self.entries.get(key)
        return e is not None and e.seen

    def step_size(self, key, d_kl: float) -> float:
        rho = forgetting_factor(d_kl, self.tau_half, self.rho_min, self.rho_max)
        return 1.0 / (rho * self.count(key) + 1.0)

    def update(self, key, observation: float, d_kl: float) -> float:
        """Fold one observation in; returns the pre-update value."""
        self._check(observation)
        rho = forgetting_factor(d_kl, self.tau_half, self.rho_min, self.rho_max)
        e = self.entries.get(key)
        if e is None:
            e = self.entries[key] = TrackerEntry(self.default(key))
        pre = e.value
        eta = 1.0 / (rho * e.n + 1.0)
        e.value = pre + eta * (observation - pre)
        e.n = rho * e.n + 1.0
        e.seen = True
        return pre

    def _check(self, observation: float) -> None:
        pass

    def state(self) -> list[tuple]:
        return [(k, e.value, e.n) for k, e in sorted(self.entries.items(), key=lambda kv: str(kv[0]))]


class ValueTracker(KLAdaptiveTracker):
    """Temporal baseline per problem, stored in mapped [0, 1] reward space."""

    def __init__(self, v0: float = 0.5, **kw):
        if not 0.0 <= v0 <= 1.0:
            raise ValueError("v0 must lie in [0, 1]")
        self.v0 = v0
        super().__init__(default=ConstantDefault(v0), **kw)

    def _check(self, observation: float) -> None:
        if not 0.0 <= observation <= 1.0:
            raise ValueError(f"mapped reward {observation} outside [0, 1]")

    def baseline_signed(self, problem_id) -> float:
        return float(unmap_reward(self.get(problem_id)))


def tracker_update(tracker: ValueTracker, problem_id, mapped_reward: float, d_kl: float):
    """Returns ``(pre_update_baseline, tracker)``; the tracker is updated in place."""
    pre = tracker.update(problem_id, mapped_reward, d_kl)
    return pre, tracker


def upstream_advantage(tracker: ValueTracker, problem_id, reward_signed: float) -> float:
    """Signed reward minus the signed pre-update baseline (read-only)."""
    return float(reward_signed) - tracker.baseline_signed(problem_id)


def prioritized_prompt_weights(
    tracker: ValueTracker, prompt_ids: Iterable, eps: float = PRIORITY_EPS
) -> np.ndarray:
    """Sampling weights ``v(1-v) + eps`` normalised to sum to 1."""
    ids = list(prompt_ids)
    if not ids:
        raise ValueError("empty prompt list")
    v = np.array([tracker.get(i) for i in ids])
    w = v * (1.0 - v) + eps
    return w / w.sum()
