"""Upstream/downstream objectives, their gradients, and the training loops.

Downstream (group-relative, stop-gradient ratio)::

    J_II = mean_groups  1/sum_i|o_i| * sum_{i,t} sg(clip(r_it, lo, hi)) * A_i * log pi(o_it)

Upstream (single-stream clipped surrogate)::

    J_I = mean_i  1/|s_i| * sum_t min(r_it * A~_i, clip(r_it, 1-eps, 1+eps) * A~_i)

Both are maximised with plain gradient ascent on the logit table.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .credit import (
    PRIORITY_EPS,
    RHO_MAX,
    RHO_MIN,
    TAU_HALF,
    ValueTracker,
    batch_normalize,
    group_relative_advantages,
    map_reward,
    outcome_reward,
    prioritized_prompt_weights,
    upstream_reward,
)
from .env import ChainProblem, Trajectory, initial_state
from .policy import PolicyParams, SparseGrad, entropy, kl_divergence
from .rollout import CostLedger, LengthTracker, run_group_rollout, run_single_pass, sample_split_position
from .seeding import child_seed, rng_for
from .simulate import simulate_completions

log = logging.getLogger(__name__)

MODES = ("skpo", "grpo", "spo")


@dataclass
class StepConfig:
    G: int = 8
    prompts_per_step: int = 16
    n_minibatches: int = 4
    clip_eps: float = 0.2
    clip_high: float = 1.28
    w_up: float = 0.5
    w_down: float = 0.5
    kl_beta: float = 0.0
    entropy_coef: float = 0.0
    learning_rate: float = 0.05
    spo_batch_scale: int = 8
    eval_rollouts: int = 32
    priority_eps: float = PRIORITY_EPS
    tau_half: float = TAU_HALF
    rho_min: float = RHO_MIN
    rho_max: float = RHO_MAX

    def __post_init__(self):
        if not (0 < self.clip_eps < 1 and 1 + self.clip_eps <= self.clip_high):
            raise ValueError("clip bounds must satisfy 0 < 1-eps < 1 < 1+eps <= clip_high")
        if self.w_up < 0 or self.w_down < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.kl_beta != 0 or self.entropy_coef != 0:
            raise ValueError("KL penalty and entropy bonus are not supported (must be 0)")
        if self.G < 1 or self.prompts_per_step < 1 or self.n_minibatches < 1:
            raise ValueError("G, prompts_per_step and n_minibatches must be positive")
        if not 0 < self.rho_min <= self.rho_max <= 1:
            raise ValueError("need 0 < rho_min <= rho_max <= 1")

    @property
    def clip_low(self) -> float:
        return 1.0 - self.clip_eps

    def to_dict(self) -> dict:
        return asdict(self)


def _old_logprob(policy_old: PolicyParams | None, traj: Trajectory, t: int) -> float:
    if policy_old is None:
        return traj.logprobs[t]
    return float(np.log(policy_old.probs(traj.keys[t])[traj.tokens[t]]))


def downstream_objective_grad(
    policy: PolicyParams,
    policy_old: PolicyParams | None,
    groups: Sequence[tuple[Sequence[Trajectory], Sequence[float]]],
    clip_low: float = 0.8,
    clip_high: float = 1.28,
    ratio_policy: PolicyParams | None = None,
) -> tuple[float, SparseGrad]:
    """Value and gradient of the downstream objective.

    ``groups`` holds ``(trajectories, advantages)`` pairs. The clipped ratio
    is a constant coefficient; the gradient flows only through
    ``log pi_theta``. ``ratio_policy`` (default: ``policy``) supplies the
    numerator of that ratio, which lets a caller freeze it while perturbing
    ``policy``.
    """
    ratio_policy = policy if ratio_policy is None else ratio_policy
    sizes = {len(trajs) for trajs, _ in groups}
    if len(sizes) > 1:
        raise ValueError(f"mismatched group sizes {sorted(sizes)}")
    obj, grad = 0.0, SparseGrad()
    if not groups:
        return obj, grad
    for trajs, adv in groups:
        if len(trajs) != len(adv):
            raise ValueError("advantages do not match the group size")
        n_tok = sum(len(o) for o in trajs)
        if n_tok == 0:
            continue
        for o, a in zip(trajs, adv):
            if a == 0.0:
                continue
            for t, (key, tok) in enumerate(zip(o.keys, o.tokens)):
                p = policy.probs(key)
                lp_new = math.log(ratio_policy.probs(key)[tok]) if ratio_policy is not policy else math.log(p[tok])
                r = math.exp(lp_new - _old_logprob(policy_old, o, t))
                c = min(max(r, clip_low), clip_high) * a / n_tok
                obj += c * math.log(p[tok])
                g = -c * p
                g[tok] += c
                grad.add(key, g)
    m = len(groups)
    return obj / m, grad.scaled(1.0 / m)


def upstream_objective_grad(
    policy: PolicyParams,
    policy_old: PolicyParams | None,
    segments: Sequence[Trajectory],
    advantages: Sequence[float],
    clip_eps: float = 0.2,
) -> tuple[float, SparseGrad]:
    """Value and gradient of the clipped single-stream surrogate.

    Per token the gradient is ``A * r * grad log pi`` when the unclipped branch
    attains the min, and zero when the constant clipped branch does.
    """
    if len(segments) != len(advantages):
        raise ValueError("one advantage per segment is required")
    obj, grad = 0.0, SparseGrad()
    if not segments:
        return obj, grad
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    for s, a in zip(segments, advantages):
        n = len(s.tokens)
        if n == 0:
            raise ValueError("empty segment in upstream objective")
        for t, (key, tok) in enumerate(zip(s.keys, s.tokens)):
            p = policy.probs(key)
            r = math.exp(math.log(p[tok]) - _old_logprob(policy_old, s, t))
            unclipped = r * a
            clipped = min(max(r, lo), hi) * a
            if unclipped <= clipped:
                obj += unclipped / n
                if a != 0.0:
                    c = a * r / n
                    g = -c * p
                    g[tok] += c
                    grad.add(key, g)
            else:
                obj += clipped / n
    m = len(segments)
    return obj / m, grad.scaled(1.0 / m)


@dataclass
class SKPOBatch:
    """Everything one optimisation step consumes, grouped per prompt."""

    segments: list[Trajectory] = field(default_factory=list)
    upstream_adv: list[float] = field(default_factory=list)
    groups: list[tuple[list[Trajectory], np.ndarray]] = field(default_factory=list)

    def __len__(self):
        return max(len(self.segments), len(self.groups))

    def subset(self, idx) -> "SKPOBatch":
        idx = list(idx)
        return SKPOBatch(
            [self.segments[i] for i in idx] if self.segments else [],
            [self.upstream_adv[i] for i in idx] if self.upstream_adv else [],
            [self.groups[i] for i in idx] if self.groups else [],
        )


def combined_objective_grad(
    policy: PolicyParams,
    policy_old: PolicyParams | None,
    batch: SKPOBatch,
    cfg: StepConfig,
    ratio_policy: PolicyParams | None = None,
) -> tuple[float, float, SparseGrad]:
    """``(J_I, J_II, w_up * grad J_I + w_down * grad J_II)`` for one (mini-)batch."""
    up_obj, up_grad = 0.0, SparseGrad()
    down_obj, down_grad = 0.0, SparseGrad()
    if batch.segments and cfg.w_up:
        up_obj, up_grad = upstream_objective_grad(policy, policy_old, batch.segments, batch.upstream_adv, cfg.clip_eps)
    if batch.groups and cfg.w_down:
        down_obj, down_grad = downstream_objective_grad(
            policy, policy_old, batch.groups, cfg.clip_low, cfg.clip_high, ratio_policy
        )
    grad = up_grad.scaled(cfg.w_up).combine(down_grad, cfg.w_down)
    return up_obj, down_obj, grad


def combined_step(policy: PolicyParams, batch: SKPOBatch, cfg: StepConfig) -> PolicyParams:
    """One optimisation step: snapshot ``pi_old`` once, then ascend per mini-batch."""
    policy_old = policy.snapshot()
    n = len(batch)
    for part in np.array_split(np.arange(n), min(cfg.n_minibatches, max(n, 1))):
        if part.size == 0:
            continue
        _, _, grad = combined_objective_grad(policy, policy_old, batch.subset(part), cfg)
        policy.apply_gradient(grad, cfg.learning_rate)
    return policy


# -- training loops ------------------------------------------------------------


@dataclass
class TrainResult:
    mode: str
    log: list[dict]
    policy: PolicyParams
    value_tracker: ValueTracker
    length_tracker: LengthTracker
    ledgers: list[CostLedger]

    @property
    def total_generated(self) -> int:
        return sum(l.total_generated for l in self.ledgers)


LOG_COLUMNS = (
    "step",
    "mode",
    "mean_acc_32",
    "entropy",
    "upstream_obj",
    "downstream_obj",
    "adv_zero_rate",
    "generated_tokens",
    "dispatches",
    "recomputed_prefix_tokens",
    "kl_batch",
    "kl_segment",
)


def mean_accuracy(policy: PolicyParams, problems: Sequence[ChainProblem], n: int, seed) -> float:
    """Mean success over ``n`` fresh unconditional rollouts per problem."""
    accs = []
    for j, p in enumerate(problems):
        out = simulate_completions(p, policy, [initial_state(p, window=policy.window)], n, child_seed(seed, j))
        accs.append(out.mean())
    return float(np.mean(accs))


def _draw_prompts(rng, n_problems: int, k: int, weights=None) -> np.ndarray:
    replace = k > n_problems
    return rng.choice(n_problems, size=k, replace=replace, p=weights)


def train(
    mode: str,
    problems: Sequence[ChainProblem],
    config: StepConfig | None = None,
    steps: int = 100,
    seed=0,
    policy: PolicyParams | None = None,
    token_budget: int | None = None,
    two_batch: bool = False,
    eval_every: int = 1,
) -> TrainResult:
    """Train with SKPO, GRPO or SPO and log one row per optimisation step.

    With ``token_budget`` the run ends after the first step whose cumulative
    generated tokens reach the budget (``steps`` is then an upper bound).
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"invalid mode {mode!r}; expected one of {MODES}")
    if not problems:
        raise ValueError("empty dataset")
    cfg = config or StepConfig()
    policy = PolicyParams() if policy is None else policy.snapshot()
    tk = dict(tau_half=cfg.tau_half, rho_min=cfg.rho_min, rho_max=cfg.rho_max)
    values = ValueTracker(**tk)
    lengths = LengthTracker(problems, **tk)
    ids = [p.problem_id for p in problems]
    prev: PolicyParams | None = None
    rows, ledgers, used = [], [], 0

    for step_i in range(steps):
        rng = rng_for(seed, "prompts", step_i)
        if mode == "grpo":
            picks = _draw_prompts(rng, len(problems), cfg.prompts_per_step)
        else:
            k = cfg.prompts_per_step * (cfg.spo_batch_scale if mode == "spo" else 1)
            w = prioritized_prompt_weights(values, ids, cfg.priority_eps)
            picks = _draw_prompts(rng, len(problems), k, w)
        batch_problems = [problems[i] for i in picks]
        step_seed = child_seed(seed, "rollout", step_i)

        if mode == "skpo":
            batch, visited, ledger, zero_rate = _skpo_rollouts(policy, batch_problems, cfg, step_seed, lengths, two_batch)
        elif mode == "grpo":
            batch, visited, ledger, zero_rate = _grpo_rollouts(policy, batch_problems, cfg, step_seed)
        else:
            batch, visited, ledger, zero_rate = _spo_rollouts(policy, batch_problems, step_seed)

        d_kl = 0.0 if prev is None else kl_divergence(policy, prev, visited)
        kl_seg = 0.0 if prev is None else _per_prompt_kl(policy, prev, batch)
        if mode == "skpo":
            _skpo_credit(batch, batch_problems, values, lengths, d_kl)
        elif mode == "spo":
            _spo_credit(batch, batch_problems, values, d_kl)
            zero_rate = float(np.mean(np.asarray(batch.upstream_adv) == 0.0))

        ent = entropy(policy, visited)
        up_obj, down_obj, _ = combined_objective_grad(policy, None, batch, _objective_cfg(cfg, mode))
        prev = policy.snapshot()
        combined_step(policy, batch, _objective_cfg(cfg, mode))

        used += ledger.total_generated
        ledgers.append(ledger)
        acc = float("nan")
        if eval_every and (step_i % eval_every == eval_every - 1 or step_i == steps - 1):
            acc = mean_accuracy(policy, problems, cfg.eval_rollouts, child_seed(seed, "eval", step_i))
        rows.append(
            {
                "step": step_i,
                "mode": mode,
                "mean_acc_32": acc,
                "entropy": ent,
                "upstream_obj": up_obj if mode != "grpo" else float("nan"),
                "downstream_obj": down_obj if mode != "spo" else float("nan"),
                "adv_zero_rate": zero_rate,
                "generated_tokens": ledger.total_generated,
                "dispatches": ledger.batch_dispatches,
                "recomputed_prefix_tokens": ledger.recomputed_prefix_tokens,
                "kl_batch": d_kl,
                "kl_segment": kl_seg,
            }
        )
        if token_budget is not None and used >= token_budget:
            if math.isnan(acc) and eval_every:
                rows[-1]["mean_acc_32"] = mean_accuracy(
                    policy, problems, cfg.eval_rollouts, child_seed(seed, "eval", step_i)
                )
            break
    return TrainResult(mode, rows, policy, values, lengths, ledgers)


def _per_prompt_kl(policy, prev, batch) -> float:
    """Mean over prompts of the drift on that prompt's upstream keys (its group for GRPO)."""
    units = [t.keys for t in batch.segments] or [[k for t in g for k in t.keys] for g, _ in batch.groups]
    return float(np.mean([kl_divergence(policy, prev, keys) for keys in units if keys]))


def _objective_cfg(cfg: StepConfig, mode: str) -> StepConfig:
    # GRPO and SPO each use one of the two objectives at full weight
    if mode == "grpo":
        return StepConfig(**{**cfg.to_dict(), "w_up": 0.0, "w_down": 1.0})
    if mode == "spo":
        return StepConfig(**{**cfg.to_dict(), "w_up": 1.0, "w_down": 0.0})
    return cfg


def _skpo_rollouts(policy, probs, cfg, seed, lengths, two_batch):
    batch, visited, ledger, zeros = SKPOBatch(), [], CostLedger(), 0
    for j, p in enumerate(probs):
        t_q = sample_split_position(lengths, p, child_seed(seed, j, "split"))
        res = run_single_pass(p, policy, cfg.G, child_seed(seed, j), split_position=t_q, two_batch=two_batch)
        rewards = [outcome_reward(p, o) for o in res.downstream]
        adv = group_relative_advantages(rewards)
        zeros += adv.all_zero
        batch.segments.append(res.segment)
        batch.groups.append((res.downstream, adv.normalized))
        batch.upstream_adv.append(upstream_reward(rewards))  # replaced by the advantage in _skpo_credit
        for tr in [res.segment, *res.downstream]:
            visited.extend(tr.keys)
        ledger = ledger.merge(res.ledger)
    return batch, visited, ledger, zeros / len(probs)


def _skpo_credit(batch, probs, values, lengths, d_kl):
    raw = []
    pre = {p.problem_id: values.baseline_signed(p.problem_id) for p in probs}
    rewards_by_pid: dict[str, list[float]] = {}
    for p, r_up, (group, _) in zip(probs, batch.upstream_adv, batch.groups):
        raw.append(r_up - pre[p.problem_id])
        rewards_by_pid.setdefault(p.problem_id, []).append(r_up)
        seg_len = len(batch.segments[len(raw) - 1].tokens)
        lengths.update(p.problem_id, float(np.mean([seg_len + len(o) for o in group])), d_kl)
    for pid, rs in rewards_by_pid.items():
        values.update(pid, float(map_reward(float(np.mean(rs)))), d_kl)
    batch.upstream_adv = list(_normalize_batch(raw))


def _normalize_batch(raw):
    if len(raw) < 2:
        return [0.0] * len(raw)
    return batch_normalize(raw).normalized


def _grpo_rollouts(policy, probs, cfg, seed):
    batch, visited, ledger, zeros = SKPOBatch(), [], CostLedger(), 0
    for j, p in enumerate(probs):
        trajs, led = run_group_rollout(p, policy, cfg.G, child_seed(seed, j))
        adv = group_relative_advantages([outcome_reward(p, o) for o in trajs])
        zeros += adv.all_zero
        batch.groups.append((trajs, adv.normalized))
        for tr in trajs:
            visited.extend(tr.keys)
        ledger = ledger.merge(led)
    return batch, visited, ledger, zeros / len(probs)


def _spo_rollouts(policy, probs, seed):
    from .policy import sample_trajectory

    batch, visited, ledger = SKPOBatch(), [], CostLedger()
    n_tok = 0
    for j, p in enumerate(probs):
        o = sample_trajectory(policy, p, seed=child_seed(seed, j, "response", 0))
        batch.segments.append(o)
        batch.upstream_adv.append(outcome_reward(p, o))
        visited.extend(o.keys)
        n_tok += len(o)
    ledger.add_generated("response", n_tok)
    ledger.batch_dispatches = 1
    return batch, visited, ledger, float("nan")


def _spo_credit(batch, probs, values, d_kl):
    pre = {p.problem_id: values.baseline_signed(p.problem_id) for p in probs}
    raw = [r - pre[p.problem_id] for p, r in zip(probs, batch.upstream_adv)]
    by_pid: dict[str, list[float]] = {}
    for p, r in zip(probs, batch.upstream_adv):
        by_pid.setdefault(p.problem_id, []).append(r)
    for pid, rs in by_pid.items():
        values.update(pid, float(map_reward(float(np.mean(rs)))), d_kl)
    batch.upstream_adv = list(_normalize_batch(raw))
