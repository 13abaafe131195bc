"""Monte Carlo token-reward estimation and its sign/variance diagnostics.

Two levels of abstraction live here:

* a Bernoulli model of a group of prefixes with known success probabilities,
  used to measure how often sampled group-relative advantages get every sign
  right (:func:`sign_accuracy_experiment`);
* environment-backed profiles where true token rewards come from the exact
  oracle and estimates from sampled completions (:func:`mc_token_reward`,
  :func:`correctness_distribution_profile`, :func:`k_sweep`).

Positions in a trajectory of length ``T`` are reported on a percentile grid of
``bins`` points, ``t_b = round(b * T / (bins - 1))``, so bin 0 is the bare prompt
and the last bin is the finished response.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from .credit import normalize, outcome_reward
from .env import ChainProblem, EnvState, SuccessOracle, Trajectory, is_correct, play
from .policy import PolicyParams, sample_trajectory
from .parallel import pmap
from .seeding import child_seed
from .simulate import simulate_completions

TOL_ZERO = 0.05
DEFAULT_K_VALUES = (8, 64, 512, 4096, 8192)


def three_valued_sign(x, tol: float = TOL_ZERO) -> np.ndarray:
    """-1, 0 or +1 with ``|x| < tol`` mapped to 0."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < tol, 0, np.sign(x)).astype(np.int8)


# -- Bernoulli group model -------------------------------------------------------


@dataclass
class SignExperimentConfig:
    """A group of ``G`` prefixes, each estimated from ``N`` Bernoulli continuations.

    If ``p`` is omitted the probabilities are evenly spaced on
    ``[center - spread, center + spread]``.
    """

    G: int = 8
    N: int = 8
    p: tuple | None = None
    trials: int = 10_000
    spread: float = 0.05
    center: float = 0.5
    tol_zero: float = TOL_ZERO

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.tol_zero < 0:
            raise ValueError("tol_zero must be nonnegative")
        if self.p is not None:
            self.p = tuple(float(v) for v in self.p)
            if len(self.p) != self.G:
                raise ValueError(f"expected {self.G} probabilities, got {len(self.p)}")
        probs = self.probabilities()
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("success probabilities must lie in [0, 1]")

    def probabilities(self) -> np.ndarray:
        if self.p is not None:
            return np.asarray(self.p, dtype=float)
        return np.linspace(self.center - self.spread, self.center + self.spread, self.G)


def sign_accuracy_experiment(cfg: SignExperimentConfig, seed, chunk: int = 50_000) -> float:
    """Fraction of trials in which every one of the ``G`` advantage signs is right.

    Each trial draws ``Binomial(N, p_i) / N`` per prefix, maps it to a signed
    reward, normalises within the group and compares three-valued signs with
    those of the normalised true rewards ``2 p_i - 1``.
    """
    p = cfg.probabilities()
    truth = three_valued_sign(normalize(2.0 * p - 1.0), cfg.tol_zero)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hits, left = 0, cfg.trials
    while left:
        n = min(chunk, left)
        k = rng.binomial(cfg.N, p, size=(n, cfg.G))
        adv = normalize(2.0 * k / cfg.N - 1.0, axis=1)
        hits += int(np.all(three_valued_sign(adv, cfg.tol_zero) == truth, axis=1).sum())
        left -= n
    return hits / cfg.trials


# -- environment-backed token rewards -------------------------------------------


def percentile_positions(length: int, bins: int = 100) -> np.ndarray:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if length < 0:
        raise ValueError("length must be nonnegative")
    return np.rint(np.arange(bins) * length / (bins - 1)).astype(np.int64)


def prefix_state(problem: ChainProblem, trajectory: Trajectory, t: int, window: int) -> EnvState:
    if not 0 <= t <= len(trajectory.tokens):
        raise ValueError(f"position {t} outside [0, {len(trajectory.tokens)}]")
    return play(problem, trajectory.tokens[:t], trajectory.context, window).state


def mc_token_reward(
    problem: ChainProblem, trajectory: Trajectory, t: int, K: int, policy: PolicyParams, seed
) -> float:
    """Mean signed outcome of ``K`` completions sampled from the prefix ``o_{1:t}``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    state = prefix_state(problem, trajectory, t, policy.window)
    if state.terminal:
        return 1.0 if is_correct(problem, state) else -1.0
    wins = simulate_completions(problem, policy, [state], K, seed)
    return float(2.0 * wins.mean() - 1.0)


def _prefix_table(problem, trajectories, positions, window):
    """Distinct prefixes across the group and, per (i, b), which one applies."""
    index, states = {}, []
    ref = np.empty(positions.shape, dtype=np.int64)
    for i, traj in enumerate(trajectories):
        for b, t in enumerate(positions[i]):
            key = (traj.context, tuple(traj.tokens[:t]))
            j = index.get(key)
            if j is None:
                j = index[key] = len(states)
                states.append(prefix_state(problem, traj, int(t), window))
            ref[i, b] = j
    return states, ref


def _group_positions(trajectories, bins):
    return np.stack([percentile_positions(len(t.tokens), bins) for t in trajectories])


def true_token_rewards(problem, policy, trajectories, bins: int = 100) -> np.ndarray:
    """Oracle token rewards ``2 V(prefix) - 1`` on the percentile grid, shape ``(G, bins)``."""
    positions = _group_positions(trajectories, bins)
    states, ref = _prefix_table(problem, trajectories, positions, policy.window)
    oracle = SuccessOracle(problem, policy)
    v = np.array([oracle.value(s) for s in states])
    return 2.0 * v[ref] - 1.0


def mc_token_rewards(problem, policy, trajectories, K: int, seed, bins: int = 100) -> np.ndarray:
    """Sampled token rewards on the percentile grid, shape ``(G, bins)``.

    Identical prefixes (always the case at bin 0) share one estimate, as they
    would if the continuations were drawn once per distinct prefix.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    positions = _group_positions(trajectories, bins)
    states, ref = _prefix_table(problem, trajectories, positions, policy.window)
    wins = simulate_completions(problem, policy, states, K, seed)
    return (2.0 * wins.mean(axis=1) - 1.0)[ref]


@dataclass
class TokenRewardProfile:
    """True and estimated token rewards/advantages for one group, per percentile bin."""

    pattern: tuple[int, int]
    K: int
    true_rewards: np.ndarray
    mc_rewards: np.ndarray
    outcomes: np.ndarray
    tol_zero: float = TOL_ZERO
    true_adv: np.ndarray = field(init=False)
    mc_adv: np.ndarray = field(init=False)
    grpo_adv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.true_adv = normalize(self.true_rewards, axis=0)
        self.mc_adv = normalize(self.mc_rewards, axis=0)
        grpo = normalize(np.where(self.outcomes, 1.0, -1.0))
        self.grpo_adv = np.repeat(grpo[:, None], self.true_rewards.shape[1], axis=1)

    @property
    def bins(self) -> int:
        return self.true_rewards.shape[1]

    def _sign_acc(self, est):
        s_true = three_valued_sign(self.true_adv, self.tol_zero)
        return (three_valued_sign(est, self.tol_zero) == s_true).mean(axis=0)

    @property
    def sign_accuracy_mc(self) -> np.ndarray:
        return self._sign_acc(self.mc_adv)

    @property
    def sign_accuracy_grpo(self) -> np.ndarray:
        return self._sign_acc(self.grpo_adv)

    @property
    def mae_mc(self) -> np.ndarray:
        return np.abs(self.mc_adv - self.true_adv).mean(axis=0)

    @property
    def mae_grpo(self) -> np.ndarray:
        return np.abs(self.grpo_adv - self.true_adv).mean(axis=0)

    @property
    def reward_mse_mc(self) -> np.ndarray:
        return ((self.mc_rewards - self.true_rewards) ** 2).mean(axis=0)

    @property
    def reward_mse_grpo(self) -> np.ndarray:
        broadcast = np.where(self.outcomes, 1.0, -1.0)[:, None]
        return ((broadcast - self.true_rewards) ** 2).mean(axis=0)


def sample_bundle(
    problem: ChainProblem, policy: PolicyParams, G: int, m: int, seed, max_draws: int = 100_000
) -> list[Trajectory]:
    """``G`` independent responses with exactly ``m`` correct, by rejection per slot."""
    if not 0 <= m <= G:
        raise ValueError("need 0 <= m <= G")
    good, bad = [], []
    for d in range(max_draws):
        if len(good) >= m and len(bad) >= G - m:
            break
        traj = sample_trajectory(policy, problem, seed=child_seed(seed, "bundle", d))
        (good if outcome_reward(problem, traj) > 0 else bad).append((d, traj))
    else:
        raise RuntimeError(f"could not draw a {m}/{G} bundle in {max_draws} samples")
    chosen = sorted(good[:m] + bad[: G - m], key=lambda x: x[0])
    return [t for _, t in chosen]


def correctness_distribution_profile(
    problem: ChainProblem,
    policy: PolicyParams,
    bundle: Sequence[Trajectory],
    m: int,
    K: int,
    seed,
    bins: int = 100,
    tol_zero: float = TOL_ZERO,
) -> TokenRewardProfile:
    """Oracle vs. K-sample token rewards for a bundle with exactly ``m`` correct."""
    outcomes = np.array([outcome_reward(problem, t) > 0 for t in bundle])
    if int(outcomes.sum()) != m:
        raise ValueError(f"bundle has {int(outcomes.sum())} correct responses, expected {m}")
    true = true_token_rewards(problem, policy, bundle, bins)
    est = mc_token_rewards(problem, policy, bundle, K, seed, bins)
    return TokenRewardProfile((m, len(bundle)), K, true, est, outcomes, tol_zero)


@dataclass
class KSweepResult:
    rows: list[dict]
    n_groups: int

    def row(self, method: str, K: int | None = None) -> dict:
        for r in self.rows:
            if r["method"] == method and (K is None or r["K"] == K):
                return r
        raise KeyError((method, K))


def _mixed_group(problem, policy, G, seed, max_tries):
    for attempt in range(max_tries):
        trajs = [
            sample_trajectory(policy, problem, seed=child_seed(seed, attempt, i)) for i in range(G)
        ]
        m = sum(outcome_reward(problem, t) > 0 for t in trajs)
        if 0 < m < G:
            return trajs
    return None


def k_sweep(
    problems: Sequence[ChainProblem],
    policy: PolicyParams,
    K_values: Sequence[int] = DEFAULT_K_VALUES,
    seed=0,
    G: int = 8,
    bins: int = 100,
    tol_zero: float = TOL_ZERO,
    max_tries: int = 50,
    workers: int = 1,
) -> KSweepResult:
    """Sign accuracy, reward MSE and advantage MAE of K-sample estimates per K.

    Only mixed groups (between 1 and ``G - 1`` correct) are scored; problems
    where no mixed group turns up within ``max_tries`` draws are skipped. The
    GRPO row broadcasts each response's outcome advantage to all positions and
    is computed once per group. Metrics are averaged over groups.
    """
    K_values = [int(k) for k in K_values]
    if not K_values:
        raise ValueError("empty K list")
    if any(k < 1 for k in K_values):
        raise ValueError("K values must be >= 1")
    unit = partial(_sweep_group, policy, tuple(K_values), seed, G, bins, tol_zero, max_tries)
    per_group = [g for g in pmap(unit, list(enumerate(problems)), workers) if g is not None]
    if not per_group:
        raise ValueError("no mixed groups found")
    rows = [_row("mc", K, *zip(*[g["mc"][ki] for g in per_group])) for ki, K in enumerate(K_values)]
    rows.append(_row("grpo", 0, *zip(*[g["grpo"] for g in per_group])))
    return KSweepResult(rows, len(per_group))


def _sweep_group(policy, K_values, seed, G, bins, tol_zero, max_tries, item):
    j, p = item
    trajs = _mixed_group(p, policy, G, child_seed(seed, "group", j), max_tries)
    if trajs is None:
        return None
    true = true_token_rewards(p, policy, trajs, bins)
    outcomes = np.array([outcome_reward(p, t) > 0 for t in trajs])
    out = {"mc": []}
    for K in K_values:
        est = mc_token_rewards(p, policy, trajs, K, child_seed(seed, "mc", j, K), bins)
        prof = TokenRewardProfile((int(outcomes.sum()), G), K, true, est, outcomes, tol_zero)
        out["mc"].append((prof.sign_accuracy_mc.mean(), prof.mae_mc.mean(), prof.reward_mse_mc.mean()))
        out["grpo"] = (prof.sign_accuracy_grpo.mean(), prof.mae_grpo.mean(), prof.reward_mse_grpo.mean())
    return out


def _row(method, K, acc, mae, mse) -> dict:
    return {
        "method": method,
        "K": K,
        "sign_accuracy": float(np.mean(acc)),
        "mae": float(np.mean(mae)),
        "reward_mse": float(np.mean(mse)),
        "n_groups": len(acc),
    }
