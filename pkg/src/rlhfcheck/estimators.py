"""REINFORCE-family gradient estimators and an unbiasedness/variance harness.

All estimators share the form ``(1/N) sum_i sum_t c_{i,t} grad log pi(y^i_t | .)``
and differ only in the coefficient ``c``.  For the sequence-level kinds ``c`` is
an advantage that does not depend on ``t``; REINFORCE++ uses a token-level
return weighted by a clipped importance ratio.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from rlhfcheck.core import (
    Prompt,
    RngStream,
    TabularPolicy,
    as_tokens,
    completion_array,
    completion_index,
    completion_probs,
    greedy_decode,
    sample_tokens,
    score_matrix,
    token_logprobs,
    token_scores,
)
from rlhfcheck.errors import ConfigError, InvalidBatchError
from rlhfcheck.rewards import RewardFunction, exact_policy_gradient, reward_vector


class BaselineKind(str, enum.Enum):
    NONE = "none"
    CONSTANT = "constant"
    LEAVE_ONE_OUT = "leave_one_out"
    GROUP_MEAN = "group_mean"
    GROUP_NORMALIZED = "group_normalized"
    GREEDY = "greedy"


class EstimatorKind(str, enum.Enum):
    REINFORCE = "reinforce"
    REINFORCE_BASELINE = "reinforce_baseline"
    RLOO = "rloo"
    GRPO = "grpo"
    REMAX = "remax"
    REINFORCE_PP = "reinforce_pp"


BASELINE_OF = {
    EstimatorKind.REINFORCE: BaselineKind.NONE,
    EstimatorKind.REINFORCE_BASELINE: BaselineKind.CONSTANT,
    EstimatorKind.RLOO: BaselineKind.LEAVE_ONE_OUT,
    EstimatorKind.GRPO: BaselineKind.GROUP_NORMALIZED,
    EstimatorKind.REMAX: BaselineKind.GREEDY,
    EstimatorKind.REINFORCE_PP: BaselineKind.GROUP_MEAN,
}

MIN_GROUP = {BaselineKind.LEAVE_ONE_OUT: 2, BaselineKind.GROUP_NORMALIZED: 2}

# Kinds whose sample mean is an unbiased estimate of the exact policy gradient.
UNBIASED_KINDS = (
    EstimatorKind.REINFORCE,
    EstimatorKind.REINFORCE_BASELINE,
    EstimatorKind.RLOO,
    EstimatorKind.REMAX,
)


@dataclass(frozen=True)
class GroupStats:
    mean: float
    std: float
    baseline_kind: BaselineKind


def group_stats(rewards, baseline_kind: BaselineKind | str = BaselineKind.GROUP_MEAN) -> GroupStats:
    """Group mean and population standard deviation (divide by N)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    kind = BaselineKind(baseline_kind)
    if kind in MIN_GROUP and rewards.size < MIN_GROUP[kind]:
        raise ConfigError(f"{kind.value} needs at least {MIN_GROUP[kind]} samples")
    return GroupStats(float(rewards.mean()), float(rewards.std()), kind)


@dataclass(frozen=True)
class EstimatorConfig:
    kind: EstimatorKind
    group_size: int = 4
    clip_eps: float = 0.2
    gamma: float = 1.0
    kl_beta: float = 0.0
    sigma_floor: float = 1e-8
    baseline: float = 0.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", EstimatorKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown estimator kind {self.kind!r}") from None
        need = MIN_GROUP.get(self.baseline_kind, 1)
        if self.group_size < need:
            raise ConfigError(f"{self.kind.value} requires group_size >= {need}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be non-negative")

    @property
    def baseline_kind(self) -> BaselineKind:
        return BASELINE_OF[self.kind]


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """``N`` completions of one prompt plus what was recorded while sampling."""

    prompt: Prompt
    completions: np.ndarray
    rewards: np.ndarray
    logprobs_current: np.ndarray
    logprobs_snapshot: np.ndarray
    greedy_reward: float | None = None

    def __post_init__(self):
        completions = np.asarray(self.completions, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=np.float64).ravel()
        n = completions.shape[0]
        if completions.ndim != 2 or n < 1 or rewards.size != n:
            raise InvalidBatchError("batch needs N >= 1 completions with one reward each")
        for name in ("logprobs_current", "logprobs_snapshot"):
            table = np.asarray(getattr(self, name), dtype=np.float64)
            if table.shape != completions.shape:
                raise InvalidBatchError(f"{name} must have shape {completions.shape}")
            object.__setattr__(self, name, table)
        object.__setattr__(self, "completions", completions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def size(self) -> int:
        return self.completions.shape[0]


def make_batch(
    policy: TabularPolicy,
    snapshot: TabularPolicy,
    prompt: Prompt,
    completions,
    rewards,
    greedy_reward: float | None = None,
) -> SampleBatch:
    tokens = as_tokens(policy.spec, completions)
    if tokens.ndim == 1:
        tokens = tokens[None]
    return SampleBatch(
        prompt,
        tokens,
        rewards,
        token_logprobs(policy, prompt, tokens),
        token_logprobs(snapshot, prompt, tokens),
        greedy_reward,
    )


def draw_batch(
    policy: TabularPolicy,
    prompt: Prompt,
    reward: RewardFunction,
    rng: RngStream,
    n: int,
    snapshot: TabularPolicy | None = None,
) -> SampleBatch:
    """Sample ``n`` completions from ``snapshot`` (default: ``policy``) and score them."""
    snapshot = policy if snapshot is None else snapshot
    tokens = sample_tokens(snapshot, prompt, rng, n)
    greedy = float(reward.evaluate_tokens(policy.spec, greedy_decode(policy, prompt)))
    return make_batch(policy, snapshot, prompt, tokens, reward.evaluate_tokens(policy.spec, tokens), greedy)


def compute_advantages(
    baseline_kind: BaselineKind | str,
    rewards,
    baseline: float = 0.0,
    greedy_reward=None,
    sigma_floor: float = 1e-8,
) -> np.ndarray:
    """Sequence-level advantages over the last axis (the group axis).

    Leading axes are independent groups, which lets the harness evaluate many
    trials at once with the same arithmetic as a single batch.
    """
    kind = BaselineKind(baseline_kind)
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.shape[-1]
    if kind in MIN_GROUP and n < MIN_GROUP[kind]:
        raise ConfigError(f"{kind.value} needs at least {MIN_GROUP[kind]} samples per group")
    if kind is BaselineKind.NONE:
        return rewards.copy()
    if kind is BaselineKind.CONSTANT:
        return rewards - baseline
    if kind is BaselineKind.LEAVE_ONE_OUT:
        total = rewards.sum(axis=-1, keepdims=True)
        return rewards - (total - rewards) / (n - 1)
    mean = rewards.mean(axis=-1, keepdims=True)
    if kind is BaselineKind.GROUP_MEAN:
        return rewards - mean
    if kind is BaselineKind.GROUP_NORMALIZED:
        std = np.sqrt(((rewards - mean) ** 2).mean(axis=-1, keepdims=True))
        return (rewards - mean) / np.maximum(std, sigma_floor)
    if greedy_reward is None:
        raise ConfigError("greedy baseline needs the reward of the greedy completion")
    return rewards - np.asarray(greedy_reward, dtype=np.float64)[..., None]


def clip_active(ratio, advantage, eps: float) -> np.ndarray:
    """Where ``min(r A, clip(r, 1-eps, 1+eps) A)`` depends on ``r``.

    The min picks the constant clipped branch exactly when the ratio has moved
    past the band in the direction the advantage favours.
    """
    ratio = np.asarray(ratio)
    advantage = np.asarray(advantage)
    plateau = ((advantage > 0) & (ratio > 1 + eps)) | ((advantage < 0) & (ratio < 1 - eps))
    return ~plateau


def pp_token_returns(
    cfg: EstimatorConfig, rewards, log_ratio_to_ref
) -> np.ndarray:
    """REINFORCE++ token returns, shape ``(..., N, T)``.

    ``R_t = sum_{k>=t} gamma^(k-t) (-kl_beta * l_k) + gamma^(T-1-t) (R - group mean)``
    with ``l_k`` the per-token log-ratio to the reference policy.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    log_ratio = np.asarray(log_ratio_to_ref, dtype=np.float64)
    T = log_ratio.shape[-1]
    centred = compute_advantages(BaselineKind.GROUP_MEAN, rewards)
    out = np.empty_like(log_ratio)
    running = np.zeros(log_ratio.shape[:-1])
    for t in range(T - 1, -1, -1):
        running = -cfg.kl_beta * log_ratio[..., t] + cfg.gamma * running
        out[..., t] = running + cfg.gamma ** (T - 1 - t) * centred
    return out


def pp_coefficients(cfg: EstimatorConfig, rewards, lp_current, lp_snapshot, lp_ref) -> np.ndarray:
    """Per-token REINFORCE++ coefficients ``R_t * r_t * [clip inactive]``."""
    lp_current = np.asarray(lp_current, dtype=np.float64)
    returns = pp_token_returns(cfg, rewards, lp_current - np.asarray(lp_ref))
    ratio = np.exp(lp_current - np.asarray(lp_snapshot))
    return returns * ratio * clip_active(ratio, returns, cfg.clip_eps)


def _check_batch(cfg: EstimatorConfig, snapshot: TabularPolicy, batch: SampleBatch) -> np.ndarray:
    need = MIN_GROUP.get(cfg.baseline_kind, 1)
    if batch.size < need:
        raise ConfigError(f"{cfg.kind.value} needs N >= {need}, batch has {batch.size}")
    lp_snap = token_logprobs(snapshot, batch.prompt, batch.completions)
    if np.isneginf(lp_snap).any():
        raise InvalidBatchError("snapshot policy assigns zero probability to a sampled token")
    return lp_snap


def estimate_gradient(
    cfg: EstimatorConfig,
    policy: TabularPolicy,
    snapshot: TabularPolicy,
    ref: TabularPolicy,
    batch: SampleBatch,
) -> np.ndarray:
    """Monte Carlo policy-gradient estimate for one batch."""
    lp_snap = _check_batch(cfg, snapshot, batch)
    n = batch.size
    if cfg.kind is EstimatorKind.REINFORCE_PP:
        lp_cur = token_logprobs(policy, batch.prompt, batch.completions)
        lp_ref = token_logprobs(ref, batch.prompt, batch.completions)
        coef = pp_coefficients(cfg, batch.rewards, lp_cur, lp_snap, lp_ref)
        scores = token_scores(policy, batch.prompt, batch.completions)
        return np.einsum("nt,ntd->d", coef, scores) / n
    adv = compute_advantages(
        cfg.baseline_kind, batch.rewards, cfg.baseline, batch.greedy_reward, cfg.sigma_floor
    )
    return adv @ score_matrix(policy, batch.prompt, batch.completions) / n


def batch_advantages(cfg: EstimatorConfig, batch: SampleBatch) -> np.ndarray:
    return compute_advantages(
        cfg.baseline_kind, batch.rewards, cfg.baseline, batch.greedy_reward, cfg.sigma_floor
    )


# ---------------------------------------------------------------------------
# Unbiasedness / variance measurement
# ---------------------------------------------------------------------------


def expected_gradient(
    cfg: EstimatorConfig,
    policy: TabularPolicy,
    r: RewardFunction,
    prompt: Prompt | int = 0,
    ref: TabularPolicy | None = None,
) -> np.ndarray:
    """Exact expectation of the estimator at ``theta = theta_old``, by enumeration.

    For the unbiased kinds and GRPO this is the exact policy gradient (GRPO is
    only compared in direction).  For REINFORCE++ the group mean includes the
    sample itself, which shrinks the reward term by ``(N-1)/N``; the KL term is
    a reward-to-go and keeps its full weight.
    """
    if cfg.kind is not EstimatorKind.REINFORCE_PP:
        return exact_policy_gradient(policy, prompt, r)
    ref = policy if ref is None else ref
    spec = policy.spec
    ys = completion_array(spec)
    n = cfg.group_size
    log_ratio = token_logprobs(policy, prompt, ys) - token_logprobs(ref, prompt, ys)
    reward = reward_vector(r, spec)
    T = spec.seq_len
    coef = np.empty_like(log_ratio)
    running = np.zeros(ys.shape[0])
    for t in range(T - 1, -1, -1):
        running = -cfg.kl_beta * log_ratio[:, t] + cfg.gamma * running
        coef[:, t] = running + cfg.gamma ** (T - 1 - t) * (n - 1) / n * reward
    weights = completion_probs(policy, prompt)[:, None] * coef
    return np.einsum("mt,mtd->d", weights, token_scores(policy, prompt, ys))


@dataclass(frozen=True, eq=False)
class EstimatorReport:
    kind: EstimatorKind
    group_size: int
    trials: int
    mean: np.ndarray
    exact: np.ndarray
    component_variance: np.ndarray
    bias_z_scores: np.ndarray

    @property
    def variance(self) -> float:
        """Trace of the per-trial gradient covariance."""
        return float(self.component_variance.sum())

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.bias_z_scores)))

    @property
    def frac_within(self) -> float:
        return float(np.mean(np.abs(self.bias_z_scores) <= 4.0))

    @property
    def cosine_to_exact(self) -> float:
        na, nb = np.linalg.norm(self.mean), np.linalg.norm(self.exact)
        if na == 0 or nb == 0:
            return 1.0 if na == nb else 0.0
        return float(self.mean @ self.exact / (na * nb))


def trial_gradients(
    cfg: EstimatorConfig,
    policy: TabularPolicy,
    r: RewardFunction,
    trials: int,
    rng: RngStream,
    snapshot: TabularPolicy | None = None,
    ref: TabularPolicy | None = None,
    prompt: Prompt | int = 0,
    chunk: int | None = None,
):
    """Yield per-trial gradient estimates in chunks of shape ``(c, n_params)``.

    Uses the same advantage arithmetic as :func:`estimate_gradient` but
    scatters coefficients onto enumerated completions, so a chunk costs one
    matrix product instead of one gradient assembly per trial.
    """
    spec = policy.spec
    snapshot = policy if snapshot is None else snapshot
    ref = policy if ref is None else ref
    ys = completion_array(spec)
    m = ys.shape[0]
    n = cfg.group_size
    rewards_all = reward_vector(r, spec)
    greedy = float(r.evaluate_tokens(spec, greedy_decode(policy, prompt)))
    pp = cfg.kind is EstimatorKind.REINFORCE_PP
    if pp:
        scores = token_scores(policy, prompt, ys)
        lp_cur = token_logprobs(policy, prompt, ys)
        lp_snap = token_logprobs(snapshot, prompt, ys)
        lp_ref = token_logprobs(ref, prompt, ys)
    else:
        scores = score_matrix(policy, prompt, ys)
    chunk = chunk or max(1, 200_000 // (n * (spec.seq_len if pp else 1)))
    gen = rng.generator()
    done = 0
    while done < trials:
        c = min(chunk, trials - done)
        idx = completion_index(spec, sample_tokens(snapshot, prompt, gen, (c, n)))
        rewards = rewards_all[idx]
        flat = (np.arange(c)[:, None] * m + idx).ravel()
        if pp:
            coef = pp_coefficients(cfg, rewards, lp_cur[idx], lp_snap[idx], lp_ref[idx])
            w = np.zeros((c * m, spec.seq_len))
            np.add.at(w, flat, coef.reshape(-1, spec.seq_len))
            grads = np.einsum("cmt,mtd->cd", w.reshape(c, m, spec.seq_len), scores) / n
        else:
            adv = compute_advantages(
                cfg.baseline_kind, rewards, cfg.baseline, np.full(c, greedy), cfg.sigma_floor
            )
            w = np.bincount(flat, weights=adv.ravel(), minlength=c * m).reshape(c, m)
            grads = w @ scores / n
        yield grads
        done += c


def estimator_stats(
    cfg: EstimatorConfig,
    policy: TabularPolicy,
    r: RewardFunction,
    trials: int,
    rng: RngStream,
    snapshot: TabularPolicy | None = None,
    ref: TabularPolicy | None = None,
    prompt: Prompt | int = 0,
    min_trials: int = 1000,
) -> EstimatorReport:
    """Empirical mean, variance and z-scores against the exact expectation."""
    if trials < min_trials:
        raise ConfigError(f"estimator_stats needs at least {min_trials} trials, got {trials}")
    exact = expected_gradient(cfg, policy, r, prompt, ref)
    # Moments are accumulated about the first trial, so identical trials give
    # exactly zero variance.
    shift = None
    total = np.zeros_like(exact)
    total_sq = np.zeros_like(exact)
    for grads in trial_gradients(cfg, policy, r, trials, rng, snapshot, ref, prompt):
        if shift is None:
            shift = grads[0].copy()
        dev = grads - shift
        total += dev.sum(axis=0)
        total_sq += (dev**2).sum(axis=0)
    mean_shifted = total / trials
    var = np.maximum(total_sq / trials - mean_shifted**2, 0.0) * trials / (trials - 1)
    mean_dev = (shift + mean_shifted) - exact
    se = np.sqrt(var / trials)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean_dev / se, np.where(np.abs(mean_dev) < 1e-12, 0.0, np.inf))
    return EstimatorReport(cfg.kind, cfg.group_size, trials, exact + mean_dev, exact, var, z)
