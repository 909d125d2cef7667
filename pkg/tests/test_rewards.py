import itertools
import math

import numpy as np
import pytest

from conftest import brute_prob, max_abs
from rlhfcheck.core import (
    GenerationSpec,
    Prompt,
    RngStream,
    TabularPolicy,
    enumerate_completions,
    finite_diff_grad,
    sample_tokens,
)
from rlhfcheck.errors import InvalidInputError, TrainingFailure
from rlhfcheck.rewards import (
    PreferenceDataset,
    PreferencePair,
    RewardFunction,
    RewardModel,
    bt_grad,
    bt_loss,
    evaluate_reward,
    exact_kl,
    exact_kl_shaped_gradient,
    exact_kl_shaped_objective,
    exact_objective,
    exact_policy_gradient,
    kl_shaped_reward,
    load_preferences,
    pairwise_accuracy,
    parse_preferences,
    reward_vector,
    save_preferences,
    synthetic_preferences,
    train_reward_model,
)


def _pref_data(seed=0, n=60):
    spec = GenerationSpec(3, 4)
    return synthetic_preferences(TabularPolicy.uniform(spec), Prompt(0), RewardFunction.token_count(2), n, RngStream(seed))


# --- evaluate_reward ------------------------------------------------------------

def test_token_count():
    assert evaluate_reward(RewardFunction.token_count(2), (2, 0, 2, 1)) == 2.0


def test_pattern_match():
    r = RewardFunction.pattern_match((1, 1))
    assert evaluate_reward(r, (1, 1)) == 1.0
    assert evaluate_reward(r, (0, 1)) == 0.0
    assert evaluate_reward(r, (0, 1, 1)) == 1.0


def test_vectorised_matches_scalar():
    spec = GenerationSpec(3, 3)
    for r in [RewardFunction.token_count(1, 2.0), RewardFunction.pattern_match((2, 0))]:
        vec = reward_vector(r, spec)
        assert vec.tolist() == [evaluate_reward(r, y) for y in enumerate_completions(spec)]


def test_table_matches_independent_map():
    spec = GenerationSpec(2, 3)
    mapping = {y: float(sum(y) ** 2 - y[0]) for y in itertools.product(range(2), repeat=3)}
    values = [mapping[y] for y in sorted(mapping)]
    r = RewardFunction.table(spec, values)
    for y, v in mapping.items():
        assert evaluate_reward(r, y, spec) == v


def test_table_validation():
    with pytest.raises(InvalidInputError):
        RewardFunction.table(GenerationSpec(2, 2), [1.0, 2.0])
    with pytest.raises(InvalidInputError):
        RewardFunction.table(GenerationSpec(2, 1), [1.0, np.inf])
    with pytest.raises(InvalidInputError):
        evaluate_reward(RewardFunction.constant(GenerationSpec(2, 1), 1.0), (0,))


# --- Bradley-Terry ---------------------------------------------------------------

def test_bt_loss_flat_model_is_ln2():
    assert bt_loss(RewardModel.zeros(3), _pref_data()) == pytest.approx(math.log(2), abs=1e-12)


def test_bt_loss_saturates():
    data = PreferenceDataset([PreferencePair(Prompt(0), (1,), (0,))])
    assert bt_loss(RewardModel(np.array([0.0, 50.0])), data) < 1e-20


def test_bt_grad_matches_finite_differences():
    data = _pref_data()
    model = RewardModel(np.array([0.3, -0.7, 1.1]), 0.4)
    fd = finite_diff_grad(lambda p: bt_loss(RewardModel.from_params(p), data), model.params)
    assert max_abs(bt_grad(model, data), fd) < 1e-6


def test_bt_loss_convex_along_segments():
    data = _pref_data(1)
    gen = np.random.default_rng(0)
    for _ in range(50):
        a, b = gen.normal(size=4) * 2, gen.normal(size=4) * 2
        fa = bt_loss(RewardModel.from_params(a), data)
        fb = bt_loss(RewardModel.from_params(b), data)
        for lam in np.linspace(0, 1, 11):
            mid = bt_loss(RewardModel.from_params(lam * a + (1 - lam) * b), data)
            assert mid <= lam * fa + (1 - lam) * fb + 1e-9


def test_training_reaches_full_accuracy_and_loss_never_rises():
    data = _pref_data()
    model = RewardModel.zeros(3)
    losses = [bt_loss(model, data)]
    for _ in range(500):
        model = train_reward_model(model, data, 1, 0.1)
        losses.append(bt_loss(model, data))
    assert np.all(np.diff(losses) <= 1e-15)
    assert pairwise_accuracy(model, data) == 1.0


def test_training_zero_steps_unchanged():
    model = RewardModel(np.array([1.0, 2.0, 3.0]), 0.5)
    assert train_reward_model(model, _pref_data(), 0, 0.1) is model


def test_training_on_flipped_data_reverses_order():
    data = _pref_data()
    fwd = train_reward_model(RewardModel.zeros(3), data, 500, 0.1)
    rev = train_reward_model(RewardModel.zeros(3), data.flipped(), 500, 0.1)
    for pair in data:
        f = fwd.score(pair.prompt, pair.preferred) - fwd.score(pair.prompt, pair.dispreferred)
        b = rev.score(pair.prompt, pair.preferred) - rev.score(pair.prompt, pair.dispreferred)
        assert f > 0 > b


def test_training_divergence_is_reported(monkeypatch):
    # Flip the gradient sign so every step climbs the loss.
    import rlhfcheck.rewards as rewards

    true_grad = rewards.bt_grad
    monkeypatch.setattr(rewards, "bt_grad", lambda m, d: -true_grad(m, d))
    with pytest.raises(TrainingFailure):
        train_reward_model(RewardModel.zeros(3), _pref_data(), 200, 0.1)


def test_training_rejects_nonpositive_lr():
    with pytest.raises(InvalidInputError):
        train_reward_model(RewardModel.zeros(3), _pref_data(), 5, 0.0)


def test_pair_validation():
    with pytest.raises(InvalidInputError):
        PreferencePair(Prompt(0), (1, 2), (1, 2))
    with pytest.raises(InvalidInputError):
        PreferenceDataset([])


def test_preference_file_round_trip(tmp_path):
    data = _pref_data(2, 20)
    path = tmp_path / "prefs.txt"
    save_preferences(path, data)
    assert load_preferences(path) == data
    assert path.read_text().splitlines()[0].count(";") == 2
    with pytest.raises(InvalidInputError):
        parse_preferences("0;1,2\n")


# --- KL shaping ----------------------------------------------------------------

def test_kl_shaped_policy_equals_ref(rand_policy):
    r = RewardFunction.token_count(2)
    y = (2, 1, 2)
    assert kl_shaped_reward(r, rand_policy, rand_policy, 0.7, y) == evaluate_reward(r, y)


def test_kl_shaped_beta_zero(rand_policy, spec33):
    r = RewardFunction.token_count(2)
    ref = TabularPolicy.uniform(spec33)
    assert kl_shaped_reward(r, rand_policy, ref, 0.0, (0, 2, 2)) == 2.0


def test_kl_shaping_expectation_is_beta_kl(rand_policy, spec33):
    """Expected shaping penalty equals beta * KL by a brute-force sum."""
    r = RewardFunction.constant(spec33, 0.0)
    ref = TabularPolicy.random(spec33, RngStream(9))
    beta = 0.3
    ys = enumerate_completions(spec33)
    expect = -sum(brute_prob(rand_policy, 0, y) * kl_shaped_reward(r, rand_policy, ref, beta, y) for y in ys)
    kl = sum(
        brute_prob(rand_policy, 0, y) * math.log(brute_prob(rand_policy, 0, y) / brute_prob(ref, 0, y)) for y in ys
    )
    assert abs(expect - beta * kl) < 1e-10
    assert abs(exact_kl(rand_policy, ref) - kl) < 1e-10


def test_kl_shaping_zero_ref_probability(spec33):
    params = np.zeros((1, spec33.n_contexts, 3))
    params[0, 0, 2] = -np.inf
    ref = TabularPolicy(spec33, params)
    with pytest.raises(InvalidInputError):
        kl_shaped_reward(RewardFunction.token_count(2), TabularPolicy.uniform(spec33), ref, 0.5, (2, 0, 0))


def test_kl_shaping_rejects_negative_beta(rand_policy):
    with pytest.raises(InvalidInputError):
        kl_shaped_reward(RewardFunction.token_count(2), rand_policy, rand_policy, -1.0, (0, 0, 0))


# --- exact objective and gradient ----------------------------------------------

def test_exact_objective_uniform():
    spec = GenerationSpec(2, 2)
    assert exact_objective(TabularPolicy.uniform(spec), 0, RewardFunction.token_count(1)) == pytest.approx(1.0)


def test_exact_objective_deterministic():
    spec = GenerationSpec(2, 2)
    pol = TabularPolicy.concentrated(spec, (1, 1), margin=60.0)
    assert exact_objective(pol, 0, RewardFunction.token_count(1)) == pytest.approx(2.0, abs=1e-12)


def test_exact_objective_matches_monte_carlo(rand_policy, spec33):
    r = RewardFunction.token_count(2)
    vals = r.evaluate_tokens(spec33, sample_tokens(rand_policy, 0, RngStream(4), 100_000))
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - exact_objective(rand_policy, 0, r)) < 4 * se


def test_exact_gradient_constant_reward(rand_policy, spec33):
    assert np.abs(exact_policy_gradient(rand_policy, 0, RewardFunction.constant(spec33, 3.0))).max() < 1e-10


def test_exact_gradient_one_step_case():
    spec = GenerationSpec(2, 1)
    g = exact_policy_gradient(TabularPolicy.uniform(spec), 0, RewardFunction.table(spec, [0.0, 1.0]))
    assert g[1] == pytest.approx(0.25) and g[0] == pytest.approx(-0.25)


def test_exact_gradient_matches_finite_differences(rand_policy):
    r = RewardFunction.token_count(2)
    fd = finite_diff_grad(lambda th: exact_objective(rand_policy.with_theta(th), 0, r), rand_policy.theta)
    assert max_abs(exact_policy_gradient(rand_policy, 0, r), fd) < 1e-6


def test_exact_gradient_baseline_invariant(rand_policy, spec33):
    rv = reward_vector(RewardFunction.token_count(2), spec33)
    for c in (-5.0, 0.3, 100.0):
        assert max_abs(exact_policy_gradient(rand_policy, 0, rv), exact_policy_gradient(rand_policy, 0, rv + c)) < 1e-10


def test_kl_shaped_gradient_matches_finite_differences(rand_policy, spec33):
    ref = TabularPolicy.random(spec33, RngStream(11))
    r = RewardFunction.token_count(1)
    f = lambda th: exact_kl_shaped_objective(rand_policy.with_theta(th), ref, 0, r, 0.4)
    fd = finite_diff_grad(f, rand_policy.theta)
    assert max_abs(exact_kl_shaped_gradient(rand_policy, ref, 0, r, 0.4), fd) < 1e-6
