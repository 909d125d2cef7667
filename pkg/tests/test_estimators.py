import numpy as np
import pytest

from conftest import max_abs
from rlhfcheck.core import (
    GenerationSpec,
    Prompt,
    RngStream,
    TabularPolicy,
    completion_array,
    completion_probs,
    grad_logprob,
    logprob,
    token_logprobs,
)
from rlhfcheck.errors import ConfigError, InvalidBatchError
from rlhfcheck.estimators import (
    BaselineKind,
    EstimatorConfig,
    EstimatorKind,
    clip_active,
    compute_advantages,
    draw_batch,
    estimate_gradient,
    estimator_stats,
    expected_gradient,
    group_stats,
    make_batch,
    trial_gradients,
)
from rlhfcheck.rewards import RewardFunction, exact_objective, exact_policy_gradient, exact_kl_shaped_gradient

R = RewardFunction.token_count(2)


# --- advantage arithmetic ----------------------------------------------------------

def test_rloo_pair():
    assert compute_advantages("leave_one_out", [1.0, 0.0]).tolist() == [1.0, -1.0]


def test_rloo_matches_explicit_loop():
    r = np.array([3.0, -1.0, 0.5, 2.0, 7.0])
    expect = [r[i] - np.mean(np.delete(r, i)) for i in range(5)]
    assert max_abs(compute_advantages("leave_one_out", r), expect) < 1e-12


def test_grpo_all_equal_is_zero():
    assert not compute_advantages("group_normalized", [2.0] * 5).any()


def test_grpo_unit_scale():
    adv = compute_advantages("group_normalized", [0.0, 1.0, 2.0, 5.0])
    assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1) < 1e-12


def test_remax_tie_contributes_nothing(spec33):
    pol = TabularPolicy.random(spec33, RngStream(0))
    from rlhfcheck.core import greedy_decode

    y = greedy_decode(pol, 0)
    batch = make_batch(pol, pol, Prompt(0), [y], [R.evaluate_tokens(spec33, y)], float(R.evaluate_tokens(spec33, y)))
    assert not estimate_gradient(EstimatorConfig("remax", group_size=1), pol, pol, pol, batch).any()


def test_remax_needs_greedy_reward():
    with pytest.raises(ConfigError):
        compute_advantages("greedy", [1.0, 2.0])


def test_group_stats_mean_convention():
    s = group_stats([1.0, 2.0, 3.0, 6.0])
    assert s.mean == 3.0 and s.std == pytest.approx(np.sqrt(3.5))
    with pytest.raises(ConfigError):
        group_stats([1.0], BaselineKind.GROUP_NORMALIZED)


def test_config_preconditions():
    with pytest.raises(ConfigError):
        EstimatorConfig("rloo", group_size=1)
    with pytest.raises(ConfigError):
        EstimatorConfig("grpo", group_size=1)
    with pytest.raises(ConfigError):
        EstimatorConfig("reinforce", clip_eps=1.0)
    with pytest.raises(ConfigError):
        EstimatorConfig("reinforce", sigma_floor=0.0)
    with pytest.raises(ConfigError):
        EstimatorConfig("reinforce", gamma=0.0)
    with pytest.raises(ConfigError):
        EstimatorConfig("ppo")


def test_batch_smaller_than_kind_needs(rand_policy):
    batch = draw_batch(rand_policy, Prompt(0), R, RngStream(0), 1)
    with pytest.raises(ConfigError):
        estimate_gradient(EstimatorConfig("rloo", group_size=2), rand_policy, rand_policy, rand_policy, batch)


def test_zero_snapshot_probability_is_invalid(spec33):
    params = np.zeros((1, spec33.n_contexts, 3))
    params[0, 0, 0] = -np.inf
    snap = TabularPolicy(spec33, params)
    pol = TabularPolicy.uniform(spec33)
    batch = make_batch(pol, pol, Prompt(0), [(0, 1, 1), (1, 1, 1)], [1.0, 0.0])
    with pytest.raises(InvalidBatchError):
        estimate_gradient(EstimatorConfig("rloo", group_size=2), pol, snap, pol, batch)


def test_batch_shape_validation():
    with pytest.raises(InvalidBatchError):
        from rlhfcheck.estimators import SampleBatch

        SampleBatch(Prompt(0), np.zeros((2, 3), int), [1.0], np.zeros((2, 3)), np.zeros((2, 3)))


# --- estimator vs hand assembly ----------------------------------------------------

@pytest.mark.parametrize("kind", ["reinforce", "reinforce_baseline", "rloo", "grpo", "remax"])
def test_estimate_matches_hand_sum(rand_policy, kind):
    cfg = EstimatorConfig(kind, group_size=5, baseline=0.7)
    batch = draw_batch(rand_policy, Prompt(0), R, RngStream(3), 5)
    adv = compute_advantages(cfg.baseline_kind, batch.rewards, 0.7, batch.greedy_reward)
    expect = sum(a * grad_logprob(rand_policy, 0, y) for a, y in zip(adv, batch.completions)) / 5
    assert max_abs(estimate_gradient(cfg, rand_policy, rand_policy, rand_policy, batch), expect) < 1e-12


@pytest.mark.parametrize("kind", [k.value for k in EstimatorKind])
def test_vectorised_trials_match_single_batch_path(rand_policy, spec33, kind):
    """The fast trial path draws the same samples and applies the same arithmetic."""
    cfg = EstimatorConfig(kind, group_size=4, baseline=1.0, kl_beta=0.1)
    ref = TabularPolicy.random(spec33, RngStream(2))
    snap = TabularPolicy.random(spec33, RngStream(2, 1), scale=0.3)
    rng = RngStream(8)
    grads = next(trial_gradients(cfg, rand_policy, R, 3, rng, snapshot=snap, ref=ref, chunk=3))
    from rlhfcheck.core import greedy_decode, sample_tokens

    tokens = sample_tokens(snap, 0, rng.generator(), (3, 4))
    greedy = float(R.evaluate_tokens(spec33, greedy_decode(rand_policy, 0)))
    for k in range(3):
        batch = make_batch(rand_policy, snap, Prompt(0), tokens[k], R.evaluate_tokens(spec33, tokens[k]), greedy)
        assert max_abs(grads[k], estimate_gradient(cfg, rand_policy, snap, ref, batch)) < 1e-12


# --- unbiasedness and variance --------------------------------------------------------

@pytest.mark.parametrize("kind", ["reinforce", "reinforce_baseline", "rloo", "remax"])
def test_unbiased_within_clt_band(rand_policy, kind):
    cfg = EstimatorConfig(kind, group_size=4, baseline=1.0)
    rep = estimator_stats(cfg, rand_policy, R, 20_000, RngStream(0, 1))
    assert rep.frac_within >= 0.99
    assert max_abs(rep.exact, exact_policy_gradient(rand_policy, 0, R)) == 0.0


def test_reinforce_pp_unbiased_for_shrunk_target(rand_policy, spec33):
    ref = TabularPolicy.random(spec33, RngStream(5))
    cfg = EstimatorConfig("reinforce_pp", group_size=4, kl_beta=0.1)
    rep = estimator_stats(cfg, rand_policy, R, 20_000, RngStream(0, 2), ref=ref)
    assert rep.frac_within >= 0.99


def test_reinforce_pp_target_is_scaled_shaped_gradient(rand_policy, spec33):
    """With no KL term the expectation is (N-1)/N times the policy gradient."""
    cfg = EstimatorConfig("reinforce_pp", group_size=4)
    assert max_abs(expected_gradient(cfg, rand_policy, R), 0.75 * exact_policy_gradient(rand_policy, 0, R)) < 1e-12
    ref = TabularPolicy.random(spec33, RngStream(5))
    cfg_big = EstimatorConfig("reinforce_pp", group_size=10**9, kl_beta=0.3)
    shaped = exact_kl_shaped_gradient(rand_policy, ref, 0, R, 0.3)
    assert max_abs(expected_gradient(cfg_big, rand_policy, R, ref=ref), shaped) < 1e-8


def test_grpo_direction(rand_policy):
    rep = estimator_stats(EstimatorConfig("grpo", group_size=4), rand_policy, R, 50_000, RngStream(0, 3))
    assert rep.cosine_to_exact >= 0.97


def test_constant_baseline_reduces_variance(rand_policy):
    b = exact_objective(rand_policy, 0, R)
    plain = estimator_stats(EstimatorConfig("reinforce", group_size=1), rand_policy, R, 20_000, RngStream(1))
    based = estimator_stats(
        EstimatorConfig("reinforce_baseline", group_size=1, baseline=b), rand_policy, R, 20_000, RngStream(1)
    )
    assert based.variance <= plain.variance


def test_constant_reward_zero_variance(rand_policy, spec33):
    r = RewardFunction.constant(spec33, 2.5)
    rep = estimator_stats(EstimatorConfig("reinforce_baseline", group_size=3, baseline=2.5), rand_policy, r, 1000, RngStream(0))
    assert rep.variance == 0.0


def test_stats_need_enough_trials(rand_policy):
    with pytest.raises(ConfigError):
        estimator_stats(EstimatorConfig("reinforce"), rand_policy, R, 999, RngStream(0))


def test_stats_reproducible(rand_policy):
    cfg = EstimatorConfig("rloo", group_size=4)
    a = estimator_stats(cfg, rand_policy, R, 2000, RngStream(4))
    b = estimator_stats(cfg, rand_policy, R, 2000, RngStream(4))
    assert np.array_equal(a.mean, b.mean)


# --- baseline cancellation and local properties -------------------------------------

def test_baseline_term_cancels_per_step(rand_policy, spec33):
    """sum_v pi(v|c) B grad log pi(v|c) = 0 at every context, by enumeration."""
    probs = rand_policy.probs(0)
    for c in range(spec33.n_contexts):
        total = np.zeros(3)
        for v in range(3):
            total += probs[c, v] * 3.7 * (np.eye(3)[v] - probs[c])
        assert np.abs(total).max() < 1e-12


def test_one_step_ascent_raises_logprob(rand_policy):
    y = (1, 0, 2)
    before = logprob(rand_policy, 0, y)
    g = (2.0 - 0.5) * grad_logprob(rand_policy, 0, y)
    after = logprob(rand_policy.with_theta(rand_policy.theta + 1e-4 * g), 0, y)
    assert after > before


def test_rloo_own_baseline_independent_of_own_reward():
    r = np.array([1.0, 2.0, 0.0, 4.0])
    base = r - compute_advantages("leave_one_out", r)
    r2 = r.copy()
    r2[1] = 99.0
    base2 = r2 - compute_advantages("leave_one_out", r2)
    assert base2[1] == pytest.approx(base[1], abs=1e-12)
    assert not np.allclose(np.delete(base2, 1), np.delete(base, 1))


def test_clip_plateau():
    ratio = np.array([1.3, 1.3, 0.7, 0.7, 1.0])
    adv = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
    assert clip_active(ratio, adv, 0.2).tolist() == [False, True, True, False, True]


def test_reinforce_pp_clipped_terms_vanish(spec33):
    pol = TabularPolicy.concentrated(spec33, (2, 2, 2), margin=3.0)
    snap = TabularPolicy.uniform(spec33)
    cfg = EstimatorConfig("reinforce_pp", group_size=2)
    batch = make_batch(pol, snap, Prompt(0), [(2, 2, 2), (0, 0, 0)], [3.0, 0.0])
    ratio = np.exp(batch.logprobs_current - batch.logprobs_snapshot)
    assert (ratio[0] > 1.2).all() and (ratio[1] < 0.8).all()
    # Sample 0 has A > 0 with a high ratio and sample 1 has A < 0 with a low ratio.
    assert not estimate_gradient(cfg, pol, snap, snap, batch).any()
