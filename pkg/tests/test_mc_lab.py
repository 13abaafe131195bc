import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import path_policy, random_policy
from skpo.env import N_SYMBOLS, ChainProblem, SuccessOracle, Token, initial_state, make_dataset, play
from skpo.mc_lab import (
    SignExperimentConfig,
    TokenRewardProfile,
    correctness_distribution_profile,
    k_sweep,
    mc_token_reward,
    mc_token_rewards,
    percentile_positions,
    prefix_state,
    sample_bundle,
    sign_accuracy_experiment,
    three_valued_sign,
    true_token_rewards,
)
from skpo.policy import PolicyParams, canonical_solution, heuristic_policy, sample_trajectory
from skpo.seeding import child_seed


def always(problem, token) -> PolicyParams:
    """Emits ``token`` from every window with probability exactly 1."""
    pol = PolicyParams()
    row = np.zeros(4)
    row[token] = 800.0
    for w in itertools.product(range(N_SYMBOLS), repeat=3):
        pol.set_logits((problem.problem_id, w), row)
    return pol


# -- signs and the Bernoulli model ---------------------------------------------------


def test_three_valued_sign():
    np.testing.assert_array_equal(three_valued_sign([-0.3, -0.04, 0.0, 0.049, 0.2]), [-1, 0, 0, 0, 1])


def test_sign_config_validation():
    with pytest.raises(ValueError):
        SignExperimentConfig(G=1)
    with pytest.raises(ValueError):
        SignExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        SignExperimentConfig(spread=0.6)
    with pytest.raises(ValueError):
        SignExperimentConfig(G=3, p=(0.1, 0.2))
    np.testing.assert_allclose(SignExperimentConfig(G=3, spread=0.1).probabilities(), [0.4, 0.5, 0.6])


def test_wide_spread_is_reliable():
    cfg = SignExperimentConfig(p=(0.05,) * 4 + (0.95,) * 4, N=8, trials=100_000)
    assert sign_accuracy_experiment(cfg, seed=0) > 0.9


def test_narrow_spread_fails_at_512():
    cfg = SignExperimentConfig(N=512, spread=0.05, trials=10_000)
    assert sign_accuracy_experiment(cfg, seed=1) < 0.5


def test_equal_probabilities_extremes():
    for p in (0.0, 1.0):
        assert sign_accuracy_experiment(SignExperimentConfig(p=(p,) * 8, trials=500), seed=0) == 1.0
    assert sign_accuracy_experiment(SignExperimentConfig(p=(0.5,) * 8, trials=5000), seed=0) < 0.05


def test_accuracy_monotone_in_spread():
    spreads = [0.45, 0.3, 0.2, 0.1, 0.05]
    acc = [sign_accuracy_experiment(SignExperimentConfig(N=32, spread=s, trials=10_000), seed=2) for s in spreads]
    assert all(a >= b for a, b in zip(acc, acc[1:])), acc


def test_sign_experiment_deterministic_and_chunk_free():
    cfg = SignExperimentConfig(N=16, spread=0.2, trials=3000)
    a = sign_accuracy_experiment(cfg, seed=5)
    assert a == sign_accuracy_experiment(cfg, seed=5)
    assert 0.0 <= a <= 1.0


# -- percentile grid ------------------------------------------------------------------


@settings(max_examples=50)
@given(st.integers(0, 16), st.integers(2, 200))
def test_percentile_positions(length, bins):
    pos = percentile_positions(length, bins)
    assert pos[0] == 0 and pos[-1] == length and len(pos) == bins
    assert np.all(np.diff(pos) >= 0)


# -- token rewards -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def setup():
    p = ChainProblem("p", 8, 8)
    pol = random_policy([p], scale=0.7, seed=1)
    return p, pol


def test_terminal_prefix_returns_outcome(setup):
    p, pol = setup
    for seed in range(20):
        traj = sample_trajectory(pol, p, seed=seed)
        expected = 1.0 if traj.state.stopped and traj.state.accumulated == 8 else -1.0
        for K in (1, 8, 100):
            assert mc_token_reward(p, traj, len(traj.tokens), K, pol, seed) == expected


def test_overshoot_prefix_is_minus_one(setup):
    p, pol = setup
    traj = play(p, [Token.ADD3, Token.ADD3, Token.ADD3])
    for K in (1, 8, 512):
        assert mc_token_reward(p, traj, 3, K, pol, seed=K) == -1.0


def test_mc_reward_validation(setup):
    p, pol = setup
    traj = play(p, [Token.ADD1])
    with pytest.raises(ValueError):
        mc_token_reward(p, traj, 1, 0, pol, 0)
    with pytest.raises(ValueError):
        prefix_state(p, traj, 2, 3)


def test_unbiased_within_five_se(setup):
    p, pol = setup
    traj = play(p, [Token.ADD2, Token.ADD1])
    v = SuccessOracle(p, pol).value(prefix_state(p, traj, 2, 3))
    K, n = 16, 3000
    est = np.array([mc_token_reward(p, traj, 2, K, pol, child_seed(0, i)) for i in range(n)])
    se = np.sqrt(4 * v * (1 - v) / K / n)
    assert abs(est.mean() - (2 * v - 1)) <= 5 * se


@pytest.mark.parametrize("K", [64, 256])
def test_variance_law(setup, K):
    p, pol = setup
    traj = play(p, [Token.ADD1])
    v = SuccessOracle(p, pol).value(prefix_state(p, traj, 1, 3))
    est = np.array([mc_token_reward(p, traj, 1, K, pol, child_seed(K, i)) for i in range(2000)])
    ratio = est.var(ddof=1) / (4 * v * (1 - v) / K)
    assert 0.5 <= ratio <= 2.0


def test_prompt_position_estimates_prompt_accuracy(setup):
    p, pol = setup
    trajs = [sample_trajectory(pol, p, seed=i) for i in range(8)]
    true = true_token_rewards(p, pol, trajs)
    v0 = SuccessOracle(p, pol).value(initial_state(p))
    np.testing.assert_allclose(true[:, 0], 2 * v0 - 1, atol=1e-15)
    assert set(np.unique(true[:, -1])) <= {-1.0, 1.0}
    est = mc_token_rewards(p, pol, trajs, 64, seed=3)
    assert np.all(est[:, 0] == est[0, 0])  # the shared prompt gets one estimate
    np.testing.assert_array_equal(est[:, -1], true[:, -1])


# -- correctness patterns ----------------------------------------------------------------


def test_degenerate_groups_are_exactly_zero():
    p = ChainProblem("p", 7, 8)
    for pol, m in ((always(p, Token.STOP), 0), (path_policy(p, canonical_solution(p)), 8)):
        bundle = sample_bundle(p, pol, 8, m, seed=0)
        prof = correctness_distribution_profile(p, pol, bundle, m, K=8, seed=1)
        assert not np.any(prof.grpo_adv) and not np.any(prof.mc_adv) and not np.any(prof.true_adv)
        assert np.all(prof.mae_mc == 0) and np.all(prof.mae_grpo == 0)
        assert np.all(prof.sign_accuracy_mc == 1) and np.all(prof.sign_accuracy_grpo == 1)


def test_intermediate_policy_degenerate_groups_have_zero_grpo():
    p = ChainProblem("p", 7, 8)
    pol = heuristic_policy([p])
    for m in (0, 8):
        bundle = sample_bundle(p, pol, 8, m, seed=2)
        prof = correctness_distribution_profile(p, pol, bundle, m, K=4096, seed=3)
        assert not np.any(prof.grpo_adv)
        assert prof.mae_mc.mean() < 0.35


def test_bundle_count_mismatch_raises():
    p = ChainProblem("p", 7, 8)
    pol = heuristic_policy([p])
    bundle = sample_bundle(p, pol, 8, 3, seed=0)
    assert sum(t.state.stopped and t.state.accumulated == 7 for t in bundle) == 3
    with pytest.raises(ValueError):
        correctness_distribution_profile(p, pol, bundle, 4, K=8, seed=0)
    with pytest.raises(ValueError):
        sample_bundle(p, pol, 8, 9, seed=0)


def test_three_of_eight_early_less_reliable_than_late():
    probs = make_dataset(12, seed=1)
    pol = heuristic_policy(probs)
    early, late = [], []
    for j, p in enumerate(probs):
        try:
            bundle = sample_bundle(p, pol, 8, 3, seed=j, max_draws=400)
        except RuntimeError:
            continue
        prof = correctness_distribution_profile(p, pol, bundle, 3, K=8, seed=child_seed(9, j))
        early.append(prof.sign_accuracy_mc[:20].mean())
        late.append(prof.sign_accuracy_mc[-20:].mean())
    assert len(early) >= 5
    assert np.mean(early) < np.mean(late)


def test_profile_shapes():
    rng = np.random.default_rng(0)
    true = rng.uniform(-1, 1, size=(8, 10))
    prof = TokenRewardProfile((4, 8), 8, true, true.copy(), np.array([1, 0] * 4, dtype=bool))
    assert prof.bins == 10
    np.testing.assert_array_equal(prof.mae_mc, np.zeros(10))
    assert prof.reward_mse_grpo.shape == (10,)


# -- K sweep --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep(dataset20):
    pol = heuristic_policy(dataset20)
    return k_sweep(dataset20, pol, [8, 64, 512, 2048], seed=0, bins=50), pol


def test_k_sweep_improves_with_K(sweep):
    res, _ = sweep
    rows = [res.row("mc", K) for K in (8, 64, 512, 2048)]
    mae = [r["mae"] for r in rows]
    acc = [r["sign_accuracy"] for r in rows]
    mse = [r["reward_mse"] for r in rows]
    assert all(a >= b for a, b in zip(mae, mae[1:])), mae
    assert all(a >= b for a, b in zip(mse, mse[1:])), mse
    assert all(b >= a - 0.02 for a, b in zip(acc, acc[1:])), acc
    assert res.row("grpo")["mae"] > mae[-1]


def test_k_sweep_grpo_row_independent_of_K(dataset20, sweep):
    res, pol = sweep
    other = k_sweep(dataset20, pol, [8], seed=0, bins=50)
    assert other.row("grpo") == res.row("grpo")
    assert [r["method"] for r in other.rows] == ["mc", "grpo"]


def test_k_sweep_validation(dataset20):
    pol = heuristic_policy(dataset20[:2])
    with pytest.raises(ValueError):
        k_sweep(dataset20[:2], pol, [])
    with pytest.raises(ValueError):
        k_sweep(dataset20[:2], pol, [0])
    p = ChainProblem("p", 7, 8)
    with pytest.raises(ValueError, match="no mixed"):
        k_sweep([p], always(p, Token.STOP), [8], max_tries=3)
