"""Sequence rewards, Bradley-Terry reward models and exact objective oracles.

Everything here works on whole completions: a reward is a function of the
full token sequence, and the exact objective/gradient helpers sum over all
``V^T`` completions of one prompt.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from rlhfcheck.core import (
    GenerationSpec,
    Prompt,
    RngStream,
    TabularPolicy,
    as_tokens,
    completion_array,
    completion_index,
    completion_probs,
    sample_tokens,
    score_matrix,
    token_logprobs,
)
from rlhfcheck.errors import InvalidInputError, TrainingFailure

logger = logging.getLogger(__name__)

REWARD_KINDS = ("token_count", "pattern_match", "table")


@dataclass(frozen=True, eq=False)
class RewardFunction:
    """Rule-based sequence reward.

    ``token_count`` counts occurrences of ``target`` (an int); ``pattern_match``
    returns 1 when the token tuple ``target`` occurs contiguously in ``y``;
    ``table`` looks ``y`` up in ``values``, one entry per enumerated completion.
    """

    kind: str
    target: int | tuple[int, ...] | None = None
    values: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise InvalidInputError(f"unknown reward kind {self.kind!r}")
        if self.kind == "table":
            if self.values is None:
                raise InvalidInputError("table reward needs values")
            values = np.array(self.values, dtype=np.float64).ravel()
            if not np.isfinite(values).all():
                raise InvalidInputError("table reward values must be finite")
            values.flags.writeable = False
            object.__setattr__(self, "values", values)
        elif self.kind == "pattern_match":
            object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        elif self.target is None:
            raise InvalidInputError("token_count reward needs a target token")

    @classmethod
    def token_count(cls, target: int, scale: float = 1.0) -> "RewardFunction":
        return cls("token_count", int(target), scale=scale)

    @classmethod
    def pattern_match(cls, target: Sequence[int], scale: float = 1.0) -> "RewardFunction":
        return cls("pattern_match", tuple(target), scale=scale)

    @classmethod
    def table(cls, spec: GenerationSpec, values, scale: float = 1.0) -> "RewardFunction":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != spec.n_completions:
            raise InvalidInputError(
                f"table reward must cover all {spec.n_completions} completions, got {values.size}"
            )
        return cls("table", values=values, scale=scale)

    @classmethod
    def constant(cls, spec: GenerationSpec, c: float) -> "RewardFunction":
        return cls.table(spec, np.full(spec.n_completions, float(c)))

    def evaluate_tokens(self, spec: GenerationSpec, tokens) -> np.ndarray:
        """Vectorised reward for a stack of completions of shape ``batch + (T,)``."""
        tokens = as_tokens(spec, tokens)
        if self.kind == "token_count":
            raw = (tokens == self.target).sum(axis=-1).astype(np.float64)
        elif self.kind == "pattern_match":
            k = len(self.target)
            if k > spec.seq_len:
                raw = np.zeros(tokens.shape[:-1])
            else:
                pattern = np.asarray(self.target)
                windows = np.lib.stride_tricks.sliding_window_view(tokens, k, axis=-1)
                raw = (windows == pattern).all(axis=-1).any(axis=-1).astype(np.float64)
        else:
            if self.values.size != spec.n_completions:
                raise InvalidInputError("table reward does not match this generation spec")
            raw = self.values[completion_index(spec, tokens)]
        return self.scale * raw


def evaluate_reward(r: RewardFunction, y: Sequence[int], spec: GenerationSpec | None = None) -> float:
    """Reward of a single completion; table rewards need ``spec`` to index ``y``."""
    if r.kind == "table":
        if spec is None:
            raise InvalidInputError("table rewards need the generation spec")
        return float(r.evaluate_tokens(spec, y))
    tokens = tuple(int(t) for t in y)
    if r.kind == "token_count":
        raw = tokens.count(r.target)
    else:
        k = len(r.target)
        raw = any(tokens[i : i + k] == r.target for i in range(len(tokens) - k + 1))
    return r.scale * float(raw)


def reward_vector(r: RewardFunction, spec: GenerationSpec) -> np.ndarray:
    """Reward of every completion in enumeration order."""
    return r.evaluate_tokens(spec, completion_array(spec))


# ---------------------------------------------------------------------------
# Preference data and Bradley-Terry reward models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreferencePair:
    prompt: Prompt
    preferred: tuple[int, ...]
    dispreferred: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "preferred", tuple(int(t) for t in self.preferred))
        object.__setattr__(self, "dispreferred", tuple(int(t) for t in self.dispreferred))
        if self.preferred == self.dispreferred:
            raise InvalidInputError("preferred and dispreferred completions must differ")

    def flipped(self) -> "PreferencePair":
        return PreferencePair(self.prompt, self.dispreferred, self.preferred)


@dataclass(frozen=True)
class PreferenceDataset:
    pairs: tuple[PreferencePair, ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise InvalidInputError("preference dataset must be non-empty")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def flipped(self) -> "PreferenceDataset":
        return PreferenceDataset(tuple(p.flipped() for p in self.pairs))


def format_preferences(data: PreferenceDataset) -> str:
    """One record per line: ``prompt_id;y+ tokens;y- tokens``, tokens comma-separated."""
    lines = []
    for pair in data:
        plus = ",".join(str(t) for t in pair.preferred)
        minus = ",".join(str(t) for t in pair.dispreferred)
        lines.append(f"{pair.prompt.id};{plus};{minus}")
    return "\n".join(lines) + "\n"


def parse_preferences(text: str) -> PreferenceDataset:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(";")
        if len(fields) != 3:
            raise InvalidInputError(f"line {lineno}: expected 3 ';'-separated fields")
        try:
            pid = int(fields[0])
            plus = tuple(int(t) for t in fields[1].split(","))
            minus = tuple(int(t) for t in fields[2].split(","))
        except ValueError as exc:
            raise InvalidInputError(f"line {lineno}: {exc}") from None
        pairs.append(PreferencePair(Prompt(pid), plus, minus))
    return PreferenceDataset(tuple(pairs))


def save_preferences(path: str | Path, data: PreferenceDataset) -> None:
    Path(path).write_text(format_preferences(data))


def load_preferences(path: str | Path) -> PreferenceDataset:
    return parse_preferences(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Linear reward model over per-token count features."""

    weights: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", np.array(self.weights, dtype=np.float64).ravel())

    @classmethod
    def zeros(cls, vocab_size: int) -> "RewardModel":
        return cls(np.zeros(vocab_size), 0.0)

    @property
    def params(self) -> np.ndarray:
        return np.append(self.weights, self.offset)

    @classmethod
    def from_params(cls, params) -> "RewardModel":
        params = np.asarray(params, dtype=np.float64)
        return cls(params[:-1], float(params[-1]))

    def features(self, y) -> np.ndarray:
        tokens = np.asarray(y, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.weights.size):
            raise InvalidInputError("token id outside the reward model's vocabulary")
        return np.bincount(tokens, minlength=self.weights.size).astype(np.float64)

    def score(self, prompt: Prompt, y) -> float:
        return float(self.features(y) @ self.weights + self.offset)


def _pair_features(model: RewardModel, data: PreferenceDataset) -> np.ndarray:
    return np.array([model.features(p.preferred) - model.features(p.dispreferred) for p in data])


def bt_loss(model: RewardModel, data: PreferenceDataset) -> float:
    """Bradley-Terry negative log-likelihood ``-mean log sigmoid(r(y+) - r(y-))``."""
    margins = _pair_features(model, data) @ model.weights
    return float(-log_expit(margins).mean())


def bt_grad(model: RewardModel, data: PreferenceDataset) -> np.ndarray:
    """Gradient of :func:`bt_loss` with respect to ``model.params``.

    The offset cancels inside every margin, so its entry is always zero.
    """
    diffs = _pair_features(model, data)
    margins = diffs @ model.weights
    g_w = -(expit(-margins)[:, None] * diffs).mean(axis=0)
    return np.append(g_w, 0.0)


def pairwise_accuracy(model: RewardModel, data: PreferenceDataset) -> float:
    margins = _pair_features(model, data) @ model.weights
    return float((margins > 0).mean())


def train_reward_model(
    model: RewardModel, data: PreferenceDataset, steps: int, lr: float, patience: int = 10
) -> RewardModel:
    """Full-batch gradient descent on :func:`bt_loss`.

    Raises :class:`TrainingFailure` if the loss rises ``patience`` steps in a row.
    """
    if lr <= 0:
        raise InvalidInputError(f"learning rate must be positive, got {lr}")
    params = model.params
    loss = bt_loss(model, data)
    rising = 0
    for step in range(steps):
        params = params - lr * bt_grad(RewardModel.from_params(params), data)
        new_loss = bt_loss(RewardModel.from_params(params), data)
        if not np.isfinite(new_loss):
            raise TrainingFailure(f"non-finite loss at step {step}")
        rising = rising + 1 if new_loss > loss else 0
        if rising >= patience:
            raise TrainingFailure(f"loss increased {patience} consecutive steps (step {step})")
        loss = new_loss
    logger.debug("reward model trained for %d steps, final loss %.6g", steps, loss)
    return RewardModel.from_params(params) if steps else model


def synthetic_preferences(
    generator: TabularPolicy,
    prompt: Prompt,
    reward: RewardFunction,
    n_pairs: int,
    rng: RngStream,
    max_draws: int | None = None,
) -> PreferenceDataset:
    """Sample completion pairs from ``generator`` and label them by ``reward``.

    Ties are discarded; at most ``max_draws`` candidate pairs are drawn.
    """
    spec = generator.spec
    max_draws = max_draws or 50 * n_pairs
    tokens = sample_tokens(generator, prompt, rng, (max_draws, 2))
    scores = reward.evaluate_tokens(spec, tokens)
    pairs = []
    for (a, b), (ra, rb) in zip(tokens, scores):
        if ra == rb:
            continue
        plus, minus = (a, b) if ra > rb else (b, a)
        pairs.append(PreferencePair(prompt, tuple(plus), tuple(minus)))
        if len(pairs) == n_pairs:
            break
    return PreferenceDataset(tuple(pairs))


# ---------------------------------------------------------------------------
# KL shaping and exact oracles
# ---------------------------------------------------------------------------


def kl_shaped_reward(
    r: RewardFunction,
    policy: TabularPolicy,
    ref: TabularPolicy,
    beta: float,
    y,
    prompt: Prompt | int = 0,
) -> float:
    """``R(y) - beta * log(pi(y|x) / pi_ref(y|x))`` for one sampled completion."""
    if beta < 0:
        raise InvalidInputError(f"beta must be >= 0, got {beta}")
    base = float(r.evaluate_tokens(policy.spec, y))
    if beta == 0:
        return base
    ref_lp = token_logprobs(ref, prompt, y)
    if np.isneginf(ref_lp).any():
        raise InvalidInputError("reference policy assigns zero probability to a visited token")
    return base - beta * float((token_logprobs(policy, prompt, y) - ref_lp).sum())


def exact_kl(policy: TabularPolicy, ref: TabularPolicy, prompt: Prompt | int = 0) -> float:
    """Sequence-level ``KL(pi(.|x) || pi_ref(.|x))`` by enumeration."""
    ys = completion_array(policy.spec)
    lp = token_logprobs(policy, prompt, ys).sum(axis=-1)
    lq = token_logprobs(ref, prompt, ys).sum(axis=-1)
    p = np.exp(lp)
    mask = p > 0
    return float(np.sum(p[mask] * (lp[mask] - lq[mask])))


def exact_objective(policy: TabularPolicy, prompt: Prompt | int, r: RewardFunction) -> float:
    """``sum_y pi(y|x) R(y)`` over all completions."""
    return float(completion_probs(policy, prompt) @ reward_vector(r, policy.spec))


def exact_policy_gradient(policy: TabularPolicy, prompt: Prompt | int, r) -> np.ndarray:
    """``sum_y pi(y|x) R(y) grad log pi(y|x)``.

    ``r`` may be a :class:`RewardFunction` or a per-completion reward vector.
    """
    spec = policy.spec
    ys = completion_array(spec)
    rewards = reward_vector(r, spec) if isinstance(r, RewardFunction) else np.asarray(r, float)
    weights = completion_probs(policy, prompt) * rewards
    return weights @ score_matrix(policy, prompt, ys)


def exact_kl_shaped_objective(
    policy: TabularPolicy, ref: TabularPolicy, prompt: Prompt | int, r: RewardFunction, beta: float
) -> float:
    return exact_objective(policy, prompt, r) - beta * exact_kl(policy, ref, prompt)


def exact_kl_shaped_gradient(
    policy: TabularPolicy, ref: TabularPolicy, prompt: Prompt | int, r: RewardFunction, beta: float
) -> np.ndarray:
    """Gradient of :func:`exact_kl_shaped_objective`.

    The derivative of the log-ratio inside the expectation is ``grad log pi``,
    whose mean is zero, so the score-function form with the shaped reward is exact.
    """
    ys = completion_array(policy.spec)
    log_ratio = token_logprobs(policy, prompt, ys).sum(-1) - token_logprobs(ref, prompt, ys).sum(-1)
    return exact_policy_gradient(policy, prompt, reward_vector(r, policy.spec) - beta * log_ratio)

