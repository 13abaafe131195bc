"""scikit-learn style wrapper around the training loops."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import SuccessOracle, initial_state, step
from .optimize import MODES, StepConfig, mean_accuracy, train
from .policy import PolicyParams, heuristic_policy
from .validation import check_positive_int, check_problems, check_seed


class PolicyOptimizer(BaseEstimator):
    """Fit a tabular policy to a set of chain problems with SKPO, GRPO or SPO.

    ``fit`` takes ``ChainProblem`` objects or an ``(n, 2)`` array of
    ``[target, max_len]`` rows. ``predict_proba`` returns the exact success
    probability of the fitted policy per problem, ``predict`` the greedy
    decoded final sum, and ``score`` the mean success probability.
    """

    def __init__(
        self,
        mode="skpo",
        steps=200,
        G=8,
        prompts_per_step=16,
        n_minibatches=4,
        learning_rate=0.05,
        w_up=0.5,
        w_down=0.5,
        init="heuristic",
        token_budget=None,
        seed=0,
    ):
        self.mode = mode
        self.steps = steps
        self.G = G
        self.prompts_per_step = prompts_per_step
        self.n_minibatches = n_minibatches
        self.learning_rate = learning_rate
        self.w_up = w_up
        self.w_down = w_down
        self.init = init
        self.token_budget = token_budget
        self.seed = seed

    def _validate_params(self):
        if str(self.mode).lower() not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in ("heuristic", "uniform"):
            raise ValueError(f"init must be 'heuristic' or 'uniform', got {self.init!r}")
        check_positive_int(self.steps, "steps")
        check_seed(self.seed)
        return StepConfig(
            G=check_positive_int(self.G, "G"),
            prompts_per_step=check_positive_int(self.prompts_per_step, "prompts_per_step"),
            n_minibatches=check_positive_int(self.n_minibatches, "n_minibatches"),
            learning_rate=float(self.learning_rate),
            w_up=float(self.w_up),
            w_down=float(self.w_down),
        )

    def fit(self, X, y=None):
        cfg = self._validate_params()
        problems = check_problems(X)
        base = heuristic_policy(problems) if self.init == "heuristic" else PolicyParams()
        result = train(
            self.mode,
            problems,
            cfg,
            steps=self.steps,
            seed=self.seed,
            policy=base,
            token_budget=self.token_budget,
            eval_every=0,
        )
        self.policy_ = result.policy
        self.log_ = result.log
        self.value_tracker_ = result.value_tracker
        self.n_generated_tokens_ = result.total_generated
        self.n_steps_ = len(result.log)
        self.problem_ids_ = [p.problem_id for p in problems]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        problems = check_problems(X)
        return np.array(
            [SuccessOracle(p, self.policy_).value(initial_state(p, window=self.policy_.window)) for p in problems]
        )

    def predict(self, X) -> np.ndarray:
        """Final accumulated sum of the greedy (arg-max) response per problem."""
        check_is_fitted(self, "policy_")
        out = []
        for p in check_problems(X):
            state = initial_state(p, window=self.policy_.window)
            while not state.terminal:
                state = step(state, int(np.argmax(self.policy_.probs((p.problem_id, state.window)))))
            out.append(state.accumulated if state.stopped else -1)
        return np.array(out)

    def score(self, X, y=None) -> float:
        return float(np.mean(self.predict_proba(X)))

    def sampled_accuracy(self, X, n: int = 32, seed=0) -> float:
        """Mean@n accuracy from fresh rollouts, as logged during training."""
        check_is_fitted(self, "policy_")
        return mean_accuracy(self.policy_, check_problems(X), n, seed)


__all__ = ["PolicyOptimizer"]
