"""Skip-connected policy optimization on a verifiable chain environment.

The environment (:mod:`skpo.env`) has an exact success oracle, so Monte Carlo
token rewards, advantage signs and training comparisons can all be checked
against ground truth.
"""

from .credit import (
    KLAdaptiveTracker,
    ValueTracker,
    batch_normalize,
    group_relative_advantages,
    map_reward,
    outcome_reward,
    prioritized_prompt_weights,
    tracker_update,
    unmap_reward,
    upstream_advantage,
    upstream_reward,
)
from .env import (
    ChainProblem,
    ConditioningContext,
    ContractViolation,
    EnvState,
    Mode,
    SuccessOracle,
    Token,
    Trajectory,
    initial_state,
    make_dataset,
    oracle_success_prob,
    outcome,
    play,
    step,
)
from .estimators import PolicyOptimizer
from .optimize import StepConfig, combined_step, downstream_objective_grad, train, upstream_objective_grad
from .policy import (
    PolicyParams,
    SparseGrad,
    entropy,
    grad_log_prob,
    heuristic_policy,
    kl_divergence,
    log_prob,
    sample_trajectory,
)
from .rollout import CostLedger, LengthTracker, run_single_pass

__version__ = "0.1.0"
