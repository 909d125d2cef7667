"""DPO, KTO and CPL losses, their gradients, and REINFORCE-style rewrites.

Losses are minimised; the ``*_grad`` functions return ascent directions on the
corresponding preference likelihoods, so ``grad == -d loss / d theta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from rlhfcheck.core import Prompt, TabularPolicy, grad_logprob, token_logprobs, token_scores
from rlhfcheck.errors import ConfigError, InvalidInputError
from rlhfcheck.rewards import PreferencePair

# Sequence-level preference rewards and baseline used by the REINFORCE rewrites.
R_PREFERRED = 1.0
R_DISPREFERRED = -1.0
PAIR_BASELINE = (R_PREFERRED + R_DISPREFERRED) / 2


@dataclass(frozen=True)
class RlFreeConfig:
    beta: float = 1.0
    cpl_gamma: float = 1.0
    lambda_desirable: float = 1.0
    lambda_undesirable: float = 1.0
    kto_batch: int = 2

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if not 0 < self.cpl_gamma <= 1:
            raise ConfigError("cpl_gamma must lie in (0, 1]")
        if self.lambda_desirable <= 0 or self.lambda_undesirable <= 0:
            raise ConfigError("KTO lambdas must be positive")
        if self.kto_batch < 2:
            raise ConfigError("kto_batch must be >= 2")


@dataclass(frozen=True)
class ImplicitRewards:
    r_hat_plus: float
    r_hat_minus: float

    @property
    def margin(self) -> float:
        return self.r_hat_plus - self.r_hat_minus

    @property
    def weight(self) -> float:
        """``sigmoid(r_hat- - r_hat+)``: how badly the pair is mis-ordered."""
        return float(expit(self.r_hat_minus - self.r_hat_plus))


def _ref_token_logprobs(ref: TabularPolicy, prompt: Prompt, y) -> np.ndarray:
    lp = token_logprobs(ref, prompt, y)
    if np.isneginf(lp).any():
        raise InvalidInputError("reference policy assigns zero probability to the completion")
    return lp


def seq_log_ratio(policy: TabularPolicy, ref: TabularPolicy, prompt: Prompt, y) -> float:
    return float((token_logprobs(policy, prompt, y) - _ref_token_logprobs(ref, prompt, y)).sum())


# ---------------------------------------------------------------------------
# DPO
# ---------------------------------------------------------------------------


def dpo_implicit_rewards(
    policy: TabularPolicy, ref: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig
) -> ImplicitRewards:
    return ImplicitRewards(
        cfg.beta * seq_log_ratio(policy, ref, pair.prompt, pair.preferred),
        cfg.beta * seq_log_ratio(policy, ref, pair.prompt, pair.dispreferred),
    )


def dpo_loss(policy: TabularPolicy, ref: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig) -> float:
    """``-log sigmoid(r_hat+ - r_hat-)``."""
    return float(-log_expit(dpo_implicit_rewards(policy, ref, pair, cfg).margin))


def dpo_grad(policy: TabularPolicy, ref: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig) -> np.ndarray:
    r_hat = dpo_implicit_rewards(policy, ref, pair, cfg)
    diff = grad_logprob(policy, pair.prompt, pair.preferred) - grad_logprob(
        policy, pair.prompt, pair.dispreferred
    )
    return cfg.beta * r_hat.weight * diff


def _pair_reinforce_sum(policy: TabularPolicy, pair: PreferencePair, discount: float) -> np.ndarray:
    # The outer (1/2) sum over i=1,2 repeats the same bracket twice.
    T = policy.spec.seq_len
    steps = discount ** np.arange(T)
    bracket = np.zeros(policy.n_params)
    for y, reward in ((pair.preferred, R_PREFERRED), (pair.dispreferred, R_DISPREFERRED)):
        per_token = token_scores(policy, pair.prompt, y)
        bracket += (reward - PAIR_BASELINE) * (steps @ per_token)
    return 0.5 * sum(bracket for _ in range(2))


def dpo_grad_reinforce_form(
    policy: TabularPolicy, ref: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig
) -> np.ndarray:
    """DPO gradient as a weighted two-sample REINFORCE estimate with ``R = +-1, B = 0``."""
    weight = dpo_implicit_rewards(policy, ref, pair, cfg).weight
    return cfg.beta * weight * _pair_reinforce_sum(policy, pair, 1.0)


# ---------------------------------------------------------------------------
# KTO
# ---------------------------------------------------------------------------


def kto_reference_point(
    policy: TabularPolicy, ref: TabularPolicy, batch_context: Sequence[tuple[Prompt, Sequence[int]]]
) -> float:
    """``max(0, mean_i log pi(y_j|x_i)/pi_ref(y_j|x_i))`` with ``j = (i + 1) mod m``."""
    m = len(batch_context)
    if m < 2:
        raise ConfigError("KTO reference point needs at least two (prompt, completion) pairs")
    total = 0.0
    for i in range(m):
        prompt = batch_context[i][0]
        y = batch_context[(i + 1) % m][1]
        total += seq_log_ratio(policy, ref, prompt, y)
    return max(0.0, total / m)


def kto_token_weights(
    policy: TabularPolicy, ref: TabularPolicy, prompt: Prompt, y, reference_point: float, beta: float
) -> np.ndarray:
    """``sigmoid(z) (1 - sigmoid(z))`` with ``z = beta (r_t - A)`` per token."""
    r_t = token_logprobs(policy, prompt, y) - _ref_token_logprobs(ref, prompt, y)
    s = expit(beta * (r_t - reference_point))
    return s * (1.0 - s)


def _kto_unpack(sample, cfg: RlFreeConfig, prompt):
    """``(y, desirable)`` uses ``prompt``; ``(prompt, y, desirable)`` carries its own."""
    if len(sample) == 3:
        prompt, y, desirable = sample
    else:
        y, desirable = sample
    reward = R_PREFERRED if desirable else R_DISPREFERRED
    lam = cfg.lambda_desirable if desirable else cfg.lambda_undesirable
    return prompt, tuple(int(t) for t in y), reward, lam


def _check_context(batch_context, cfg: RlFreeConfig):
    if len(batch_context) != cfg.kto_batch:
        raise ConfigError(f"batch_context must have kto_batch={cfg.kto_batch} entries")


def kto_grad(
    policy: TabularPolicy,
    ref: TabularPolicy,
    sample: tuple,
    batch_context: Sequence[tuple[Prompt, Sequence[int]]],
    cfg: RlFreeConfig,
    prompt: Prompt | int = 0,
) -> np.ndarray:
    """KTO gradient for one ``(completion, desirable)`` sample; the reference point is held fixed."""
    _check_context(batch_context, cfg)
    prompt, y, reward, lam = _kto_unpack(sample, cfg, prompt)
    a = kto_reference_point(policy, ref, batch_context)
    w = kto_token_weights(policy, ref, prompt, y, a, cfg.beta)
    return cfg.beta * lam * (reward - PAIR_BASELINE) * (w @ token_scores(policy, prompt, y))


def kto_objective(
    policy: TabularPolicy,
    ref: TabularPolicy,
    sample: tuple,
    reference_point: float,
    cfg: RlFreeConfig,
    prompt: Prompt | int = 0,
) -> float:
    """``lambda R(y) sum_t sigmoid(beta (r_t - A))`` at a frozen reference point.

    Its gradient is :func:`kto_grad`; the differentiable surface used by the
    finite-difference checks.
    """
    prompt, y, reward, lam = _kto_unpack(sample, cfg, prompt)
    r_t = token_logprobs(policy, prompt, y) - _ref_token_logprobs(ref, prompt, y)
    return float(lam * (reward - PAIR_BASELINE) * expit(cfg.beta * (r_t - reference_point)).sum())


# ---------------------------------------------------------------------------
# CPL
# ---------------------------------------------------------------------------


def _discounted_logprob(policy: TabularPolicy, prompt: Prompt, y, gamma: float) -> float:
    lp = token_logprobs(policy, prompt, y)
    return float((gamma ** np.arange(lp.size)) @ lp)


def cpl_implicit_rewards(policy: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig) -> ImplicitRewards:
    """``beta * sum_t gamma^t log pi(y_t | .)``, with the first token undiscounted."""
    return ImplicitRewards(
        cfg.beta * _discounted_logprob(policy, pair.prompt, pair.preferred, cfg.cpl_gamma),
        cfg.beta * _discounted_logprob(policy, pair.prompt, pair.dispreferred, cfg.cpl_gamma),
    )


def cpl_loss(policy: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig) -> float:
    """Negative log of the two-way softmax that ranks ``y+`` over ``y-``."""
    return float(-log_expit(cpl_implicit_rewards(policy, pair, cfg).margin))


def cpl_grad(policy: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig) -> np.ndarray:
    r_hat = cpl_implicit_rewards(policy, pair, cfg)
    steps = cfg.cpl_gamma ** np.arange(policy.spec.seq_len)
    plus = steps @ token_scores(policy, pair.prompt, pair.preferred)
    minus = steps @ token_scores(policy, pair.prompt, pair.dispreferred)
    return cfg.beta * r_hat.weight * (plus - minus)


def cpl_grad_reinforce_form(policy: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig) -> np.ndarray:
    weight = cpl_implicit_rewards(policy, pair, cfg).weight
    return cfg.beta * weight * _pair_reinforce_sum(policy, pair, cfg.cpl_gamma)


# ---------------------------------------------------------------------------
# DPO / CPL equivalence under a uniform reference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceReport:
    dpo_loss: float
    cpl_loss: float
    delta: float


def dpo_cpl_equivalence_check(
    policy: TabularPolicy, pair: PreferencePair, cfg: RlFreeConfig
) -> EquivalenceReport:
    """Compare DPO against a uniform reference with CPL at the same ``beta``.

    With equal-length completions the uniform reference adds ``T log V`` to both
    implicit rewards, which cancels in the margin; ``delta`` is generically
    non-zero once ``cpl_gamma < 1``.
    """
    uniform = TabularPolicy.uniform(policy.spec, role="reference")
    d = dpo_loss(policy, uniform, pair, cfg)
    c = cpl_loss(policy, pair, cfg)
    return EquivalenceReport(d, c, abs(d - c))
