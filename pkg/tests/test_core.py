import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import brute_conditional, brute_prob, max_abs
from rlhfcheck.core import (
    GenerationSpec,
    Prompt,
    RngStream,
    TabularPolicy,
    completion_array,
    completion_probs,
    enumerate_completions,
    finite_diff_grad,
    grad_logprob,
    greedy_decode,
    logprob,
    sample,
    sample_tokens,
    score_matrix,
    token_logprobs,
)
from rlhfcheck.errors import BudgetExceededError, InvalidInputError


# --- GenerationSpec / Prompt / policy validation -----------------------------

def test_spec_rejects_degenerate_sizes():
    with pytest.raises(InvalidInputError):
        GenerationSpec(1, 3)
    with pytest.raises(InvalidInputError):
        GenerationSpec(3, 0)
    with pytest.raises(InvalidInputError):
        GenerationSpec(3, 3, prompt_count=0)


def test_spec_counts():
    spec = GenerationSpec(3, 3, prompt_count=2)
    assert spec.n_completions == 27
    assert spec.n_contexts == 1 + 3 + 9
    assert spec.n_params == 2 * 13 * 3
    assert [spec.context_offset(d) for d in range(3)] == [0, 1, 4]


def test_policy_rejects_nan_and_bad_role(spec33):
    params = np.zeros((1, spec33.n_contexts, 3))
    params[0, 0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        TabularPolicy(spec33, params)
    with pytest.raises(InvalidInputError):
        TabularPolicy(spec33, np.zeros((1, spec33.n_contexts, 3)), role="critic")
    rows = np.zeros((1, spec33.n_contexts, 3))
    rows[0, 2] = -np.inf
    with pytest.raises(InvalidInputError):
        TabularPolicy(spec33, rows)


def test_policy_params_are_read_only(rand_policy):
    with pytest.raises(ValueError):
        rand_policy.params[0, 0, 0] = 1.0


def test_prompt_out_of_range(spec33):
    pol = TabularPolicy.uniform(spec33)
    with pytest.raises(InvalidInputError):
        logprob(pol, 1, (0, 0, 0))
    with pytest.raises(InvalidInputError):
        logprob(pol, Prompt(0, (5,)), (0, 0, 0))


# --- logprob ------------------------------------------------------------------

def test_logprob_uniform():
    pol = TabularPolicy.uniform(GenerationSpec(3, 2))
    for y in enumerate_completions(pol.spec):
        assert logprob(pol, 0, y) == pytest.approx(-2 * math.log(3), abs=1e-12)


def test_logprob_deterministic_policy(spec33):
    pol = TabularPolicy.concentrated(spec33, (2, 0, 1), margin=50.0)
    assert greedy_decode(pol, 0) == (2, 0, 1)
    assert abs(logprob(pol, 0, (2, 0, 1))) < 1e-12


def test_logprob_matches_brute_force_enumeration():
    spec = GenerationSpec(3, 2)
    pol = TabularPolicy.random(spec, RngStream(0))
    unnorm = {y: brute_prob(pol, 0, y) for y in itertools.product(range(3), repeat=2)}
    total = sum(unnorm.values())
    assert logprob(pol, 0, (0, 1)) == pytest.approx(math.log(unnorm[(0, 1)] / total), abs=1e-12)


def test_logprob_rejects_bad_tokens(spec33):
    pol = TabularPolicy.uniform(spec33)
    with pytest.raises(InvalidInputError):
        logprob(pol, 0, (0, 3, 0))
    with pytest.raises(InvalidInputError):
        logprob(pol, 0, (0, 1))
    with pytest.raises(InvalidInputError):
        logprob(pol, 0, (-1, 0, 0))


def test_logprob_nonpositive_and_normalised(rand_policy):
    lps = [logprob(rand_policy, 0, y) for y in enumerate_completions(rand_policy.spec)]
    assert max(lps) <= 0
    assert abs(sum(math.exp(v) for v in lps) - 1) < 1e-12


def test_context_rows_normalised(spec33x2):
    pol = TabularPolicy.random(spec33x2, RngStream(3), scale=5.0)
    for p in range(2):
        assert max_abs(pol.probs(p).sum(-1), 1.0) < 1e-12


# --- sampling -------------------------------------------------------------------

def test_sample_deterministic_policy(spec33):
    pol = TabularPolicy.concentrated(spec33, (1, 2, 0))
    assert set(sample(pol, 0, RngStream(0), 500)) == {(1, 2, 0)}


def test_sample_uniform_frequency_band():
    pol = TabularPolicy.uniform(GenerationSpec(2, 1))
    draws = sample(pol, 0, RngStream(0), 100_000)
    freq = sum(y == (0,) for y in draws) / len(draws)
    assert 0.494 <= freq <= 0.506


def test_sample_reproducible(rand_policy):
    a = sample(rand_policy, 0, RngStream(7, 3), 50)
    b = sample(rand_policy, 0, RngStream(7, 3), 50)
    c = sample(rand_policy, 0, RngStream(7, 4), 50)
    assert a == b
    assert a != c


def test_sample_frequencies_converge(rand_policy):
    n = 200_000
    tokens = sample_tokens(rand_policy, 0, RngStream(1), n)
    idx = (tokens * np.array([9, 3, 1])).sum(-1)
    freq = np.bincount(idx, minlength=27) / n
    p = completion_probs(rand_policy, 0)
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 5 * se + 1e-12)


def test_sample_rejects_nonpositive_n(rand_policy):
    with pytest.raises(InvalidInputError):
        sample(rand_policy, 0, RngStream(0), 0)


# --- greedy ---------------------------------------------------------------------

def test_greedy_uniform_ties_to_zero(spec33):
    assert greedy_decode(TabularPolicy.uniform(spec33), 0) == (0, 0, 0)


def test_greedy_favouring_token_one(spec33):
    params = np.zeros((1, spec33.n_contexts, 3))
    params[..., 1] = 2.0
    assert greedy_decode(TabularPolicy(spec33, params), 0) == (1, 1, 1)


def test_greedy_is_per_step_argmax_by_enumeration(rand_policy):
    """Conditionals recomputed from enumerated joint probabilities."""
    spec = rand_policy.spec
    ys = enumerate_completions(spec)
    joint = {y: brute_prob(rand_policy, 0, y) for y in ys}
    prefix = ()
    for t in range(spec.seq_len):
        mass = [sum(p for y, p in joint.items() if y[: t + 1] == prefix + (v,)) for v in range(spec.vocab_size)]
        prefix = prefix + (int(np.argmax(mass)),)
    assert greedy_decode(rand_policy, 0) == prefix


# --- gradients -------------------------------------------------------------------

def test_grad_logprob_uniform_two_tokens():
    spec = GenerationSpec(2, 1)
    g = grad_logprob(TabularPolicy.uniform(spec), 0, (0,))
    assert g.tolist() == [0.5, -0.5]


def test_grad_logprob_rows_sum_to_zero(rand_policy):
    for y in [(0, 1, 2), (2, 2, 2), (1, 0, 0)]:
        g = grad_logprob(rand_policy, 0, y).reshape(-1, 3)
        assert np.abs(g.sum(-1)).max() < 1e-12


def test_grad_logprob_unvisited_contexts_zero(rand_policy):
    g = grad_logprob(rand_policy, 0, (1, 2, 0)).reshape(-1, 3)
    visited = {0, 1 + 1, 4 + 1 * 3 + 2}
    for row in range(g.shape[0]):
        if row not in visited:
            assert not g[row].any()


def test_grad_logprob_analytic_entries(rand_policy):
    """Entry (c, w) at a visited context is 1[w = v] - pi(w | c)."""
    y = (2, 1, 0)
    g = grad_logprob(rand_policy, 0, y).reshape(-1, 3)
    for t, row in enumerate([0, 1 + 2, 4 + 2 * 3 + 1]):
        for w in range(3):
            expect = (w == y[t]) - brute_conditional(rand_policy, 0, y[:t], w)
            assert g[row, w] == pytest.approx(expect, abs=1e-12)


def test_grad_logprob_matches_finite_differences(rand_policy):
    for y in enumerate_completions(rand_policy.spec)[::5]:
        fd = finite_diff_grad(lambda th: logprob(rand_policy.with_theta(th), 0, y), rand_policy.theta)
        assert max_abs(grad_logprob(rand_policy, 0, y), fd) < 1e-6


def test_score_function_zero_mean(spec33x2):
    pol = TabularPolicy.random(spec33x2, RngStream(5))
    for p in range(2):
        mean = completion_probs(pol, p) @ score_matrix(pol, p, completion_array(pol.spec))
        assert np.abs(mean).max() < 1e-10


def test_second_prompt_block_only(spec33x2):
    pol = TabularPolicy.random(spec33x2, RngStream(5))
    g = grad_logprob(pol, 1, (0, 0, 0)).reshape(2, -1)
    assert not g[0].any() and g[1].any()


def test_gradients_bit_identical(rand_policy):
    a = grad_logprob(rand_policy, 0, (0, 2, 1))
    b = grad_logprob(TabularPolicy(rand_policy.spec, rand_policy.params.copy()), 0, (0, 2, 1))
    assert np.array_equal(a, b)


# --- enumeration ------------------------------------------------------------------

def test_enumerate_small():
    assert enumerate_completions(GenerationSpec(2, 2)) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_enumerate_three_by_three(spec33):
    ys = enumerate_completions(spec33)
    assert len(ys) == 27 and ys[0] == (0, 0, 0) and ys[-1] == (2, 2, 2)
    assert completion_array(spec33).tolist() == [list(y) for y in ys]


def test_enumeration_budget():
    spec = GenerationSpec(10, 7)
    with pytest.raises(BudgetExceededError):
        enumerate_completions(spec)
    with pytest.raises(BudgetExceededError):
        completion_array(GenerationSpec(3, 3, enumeration_budget=26))


# --- finite differences -------------------------------------------------------------

def test_fd_constant():
    assert not finite_diff_grad(lambda x: 3.0, np.ones(4)).any()


def test_fd_quadratic():
    g = finite_diff_grad(lambda x: float(x @ x), np.array([1.0, 2.0]), h=1e-5)
    assert max_abs(g, [2.0, 4.0]) < 1e-8


def test_fd_rejects_bad_step_and_nonfinite():
    with pytest.raises(InvalidInputError):
        finite_diff_grad(lambda x: 0.0, np.zeros(2), h=0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda x: float("inf"), np.zeros(2))


# --- properties ---------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    scale=st.floats(0.1, 8.0),
    y=st.tuples(*[st.integers(0, 2)] * 3),
)
def test_property_token_logprobs_match_brute_force(seed, scale, y):
    pol = TabularPolicy.random(GenerationSpec(3, 3), RngStream(seed), scale)
    lp = token_logprobs(pol, 0, y)
    for t in range(3):
        assert lp[t] == pytest.approx(math.log(brute_conditional(pol, 0, y[:t], y[t])), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stream=st.integers(0, 2**32 - 1))
def test_property_rng_reproducible(seed, stream):
    a = RngStream(seed, stream).generator().random(4)
    b = RngStream(seed, stream).generator().random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngStream(seed, stream).child(0).generator().random(4))
