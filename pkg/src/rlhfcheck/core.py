"""Enumerable autoregressive token policies.

A :class:`TabularPolicy` keeps one logit row per (prompt, prefix) context, so
every conditional distribution, sequence probability and score-function
gradient can be computed exactly.  Contexts are indexed depth-major: the
empty prefix is row 0, the ``V`` prefixes of length one follow, and so on,
with prefixes of equal length ordered lexicographically.

The flat parameter vector ``theta`` is ``params.ravel()`` for a table of shape
``(prompt_count, n_contexts, vocab_size)``; gradient vectors share that layout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from rlhfcheck.errors import BudgetExceededError, InvalidInputError

DEFAULT_ENUMERATION_BUDGET = 10**6

_MASK64 = (1 << 64) - 1

Completion = tuple[int, ...]


@dataclass(frozen=True)
class GenerationSpec:
    vocab_size: int
    seq_len: int
    prompt_count: int = 1
    enumeration_budget: int = DEFAULT_ENUMERATION_BUDGET

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidInputError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.seq_len < 1:
            raise InvalidInputError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.prompt_count < 1:
            raise InvalidInputError(f"prompt_count must be >= 1, got {self.prompt_count}")

    @property
    def n_completions(self) -> int:
        return self.vocab_size**self.seq_len

    @property
    def n_contexts(self) -> int:
        # 1 + V + ... + V^(T-1)
        return (self.vocab_size**self.seq_len - 1) // (self.vocab_size - 1)

    @property
    def n_params(self) -> int:
        return self.prompt_count * self.n_contexts * self.vocab_size

    def context_offset(self, depth: int) -> int:
        """Row index of the first prefix of length ``depth``."""
        return (self.vocab_size**depth - 1) // (self.vocab_size - 1)

    def check_budget(self) -> None:
        if self.n_completions > self.enumeration_budget:
            raise BudgetExceededError(
                f"{self.vocab_size}^{self.seq_len} = {self.n_completions} completions "
                f"exceeds the enumeration budget of {self.enumeration_budget}"
            )


@dataclass(frozen=True)
class Prompt:
    id: int
    tokens: tuple[int, ...] = ()


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Each call to :meth:`generator` restarts the stream from its first draw, so
    the same key always reproduces the same numbers.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream, e.g. one per trial or per iteration."""
        return RngStream(self.seed, ((self.stream + 1) * 0x9E3779B97F4A7C15 + index) & _MASK64)


def _check_prompt(spec: GenerationSpec, prompt: Prompt | int) -> int:
    pid = prompt.id if isinstance(prompt, Prompt) else int(prompt)
    if not 0 <= pid < spec.prompt_count:
        raise InvalidInputError(f"prompt id {pid} out of range [0, {spec.prompt_count})")
    if isinstance(prompt, Prompt) and any(not 0 <= t < spec.vocab_size for t in prompt.tokens):
        raise InvalidInputError(f"prompt {pid} has a token id outside the vocabulary")
    return pid


def as_tokens(spec: GenerationSpec, completion) -> np.ndarray:
    """Validate one completion (or a stack of them) and return an int array."""
    tokens = np.asarray(completion, dtype=np.int64)
    if tokens.ndim == 0 or tokens.shape[-1] != spec.seq_len:
        raise InvalidInputError(
            f"completion must have length {spec.seq_len}, got shape {tokens.shape}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab_size):
        raise InvalidInputError(f"token id outside [0, {spec.vocab_size})")
    return tokens


def context_indices(spec: GenerationSpec, tokens: np.ndarray) -> np.ndarray:
    """Context row visited at every step; same shape as ``tokens``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.empty_like(tokens)
    prefix = np.zeros(tokens.shape[:-1], dtype=np.int64)
    for t in range(spec.seq_len):
        out[..., t] = spec.context_offset(t) + prefix
        prefix = prefix * spec.vocab_size + tokens[..., t]
    return out


def completion_index(spec: GenerationSpec, tokens: np.ndarray) -> np.ndarray:
    """Position of each completion in :func:`enumerate_completions` order."""
    tokens = np.asarray(tokens, dtype=np.int64)
    index = np.zeros(tokens.shape[:-1], dtype=np.int64)
    for t in range(spec.seq_len):
        index = index * spec.vocab_size + tokens[..., t]
    return index


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    spec: GenerationSpec
    params: np.ndarray
    role: str = "current"

    ROLES = ("current", "reference", "snapshot")

    def __post_init__(self):
        shape = (self.spec.prompt_count, self.spec.n_contexts, self.spec.vocab_size)
        params = np.array(self.params, dtype=np.float64).reshape(shape)
        if np.isnan(params).any() or np.isposinf(params).any():
            raise InvalidInputError("logits must be finite or -inf")
        if np.isneginf(params).all(axis=-1).any():
            raise InvalidInputError("every context needs at least one finite logit")
        if self.role not in self.ROLES:
            raise InvalidInputError(f"unknown policy role {self.role!r}")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    @classmethod
    def uniform(cls, spec: GenerationSpec, role: str = "current") -> "TabularPolicy":
        return cls(spec, np.zeros((spec.prompt_count, spec.n_contexts, spec.vocab_size)), role)

    @classmethod
    def random(
        cls, spec: GenerationSpec, rng: RngStream | int = 0, scale: float = 1.0, role: str = "current"
    ) -> "TabularPolicy":
        if not isinstance(rng, RngStream):
            rng = RngStream(int(rng))
        shape = (spec.prompt_count, spec.n_contexts, spec.vocab_size)
        return cls(spec, scale * rng.generator().standard_normal(shape), role)

    @classmethod
    def concentrated(
        cls, spec: GenerationSpec, completion: Sequence[int], margin: float = 50.0, role: str = "current"
    ) -> "TabularPolicy":
        """Near-deterministic policy: at depth t every context favours ``completion[t]``."""
        tokens = as_tokens(spec, completion)
        params = np.zeros((spec.prompt_count, spec.n_contexts, spec.vocab_size))
        for t in range(spec.seq_len):
            lo, hi = spec.context_offset(t), spec.context_offset(t + 1)
            params[:, lo:hi, tokens[t]] = margin
        return cls(spec, params, role)

    @classmethod
    def from_flat(cls, spec: GenerationSpec, theta: np.ndarray, role: str = "current") -> "TabularPolicy":
        return cls(spec, np.asarray(theta, dtype=np.float64), role)

    @property
    def theta(self) -> np.ndarray:
        return self.params.ravel().copy()

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_theta(self, theta: np.ndarray) -> "TabularPolicy":
        return TabularPolicy.from_flat(self.spec, theta, self.role)

    def as_role(self, role: str) -> "TabularPolicy":
        return TabularPolicy(self.spec, self.params, role)

    @cached_property
    def _log_table(self) -> np.ndarray:
        table = log_softmax(self.params, axis=-1)
        table.flags.writeable = False
        return table

    @cached_property
    def _prob_table(self) -> np.ndarray:
        table = softmax(self.params, axis=-1)
        table.flags.writeable = False
        return table

    def log_probs(self, prompt: Prompt | int) -> np.ndarray:
        """Log-softmax table of shape ``(n_contexts, vocab_size)`` for one prompt."""
        return self._log_table[_check_prompt(self.spec, prompt)]

    def probs(self, prompt: Prompt | int) -> np.ndarray:
        return self._prob_table[_check_prompt(self.spec, prompt)]

    def block(self, prompt: Prompt | int) -> slice:
        """Slice of the flat parameter vector owned by ``prompt``."""
        pid = _check_prompt(self.spec, prompt)
        size = self.spec.n_contexts * self.spec.vocab_size
        return slice(pid * size, (pid + 1) * size)


def token_logprobs(policy: TabularPolicy, prompt: Prompt | int, tokens) -> np.ndarray:
    """Per-step ``log pi(y_t | y_<t, x)``; accepts one completion or a stack."""
    tokens = as_tokens(policy.spec, tokens)
    table = policy.log_probs(prompt)
    return table[context_indices(policy.spec, tokens), tokens]


def logprob(policy: TabularPolicy, prompt: Prompt | int, completion) -> float:
    """Sequence log-probability ``sum_t log pi(y_t | y_<t, x)``."""
    return float(token_logprobs(policy, prompt, completion).sum())


def sequence_logprobs(policy: TabularPolicy, prompt: Prompt | int, tokens) -> np.ndarray:
    return token_logprobs(policy, prompt, tokens).sum(axis=-1)


def sample_tokens(
    policy: TabularPolicy, prompt: Prompt | int, rng: RngStream | np.random.Generator, size
) -> np.ndarray:
    """Ancestral sampling of an array of completions with shape ``size + (T,)``."""
    spec = policy.spec
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    probs = policy.probs(prompt)
    cdf = np.cumsum(probs, axis=-1)
    uniforms = gen.random(size + (spec.seq_len,))
    tokens = np.empty(size + (spec.seq_len,), dtype=np.int64)
    prefix = np.zeros(size, dtype=np.int64)
    for t in range(spec.seq_len):
        rows = cdf[spec.context_offset(t) + prefix]
        tok = (rows < uniforms[..., t, None]).sum(axis=-1)
        tokens[..., t] = np.minimum(tok, spec.vocab_size - 1)
        prefix = prefix * spec.vocab_size + tokens[..., t]
    return tokens


def sample(policy: TabularPolicy, prompt: Prompt | int, rng: RngStream, n: int) -> list[Completion]:
    """Draw ``n`` i.i.d. completions from ``policy``."""
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    return [tuple(int(v) for v in row) for row in sample_tokens(policy, prompt, rng, n)]


def greedy_decode(policy: TabularPolicy, prompt: Prompt | int) -> Completion:
    """Per-step argmax decoding; ties go to the lowest token id."""
    spec = policy.spec
    logits = policy.params[_check_prompt(spec, prompt)]
    prefix, out = 0, []
    for t in range(spec.seq_len):
        tok = int(np.argmax(logits[spec.context_offset(t) + prefix]))
        out.append(tok)
        prefix = prefix * spec.vocab_size + tok
    return tuple(out)


def token_scores(policy: TabularPolicy, prompt: Prompt | int, tokens) -> np.ndarray:
    """Per-step score vectors ``grad log pi(y_t | y_<t, x)``.

    Returns shape ``batch + (T, n_params)`` for ``tokens`` of shape ``batch + (T,)``.
    """
    spec = policy.spec
    tokens = as_tokens(spec, tokens)
    pid = _check_prompt(spec, prompt)
    batch = tokens.shape[:-1]
    flat_tokens = tokens.reshape(-1, spec.seq_len)
    ctx = context_indices(spec, flat_tokens)
    probs = policy.probs(pid)
    m = flat_tokens.shape[0]
    out = np.zeros((m, spec.seq_len, policy.n_params))
    rows = np.arange(m)[:, None]
    vocab = np.arange(spec.vocab_size)
    for t in range(spec.seq_len):
        vals = -probs[ctx[:, t]]
        vals[np.arange(m), flat_tokens[:, t]] += 1.0
        cols = (pid * spec.n_contexts + ctx[:, t])[:, None] * spec.vocab_size + vocab
        out[rows, t, cols] = vals
    return out.reshape(batch + (spec.seq_len, policy.n_params))


def score_matrix(policy: TabularPolicy, prompt: Prompt | int, tokens) -> np.ndarray:
    """Sequence score vectors ``grad log pi(y | x)`` for a stack of completions."""
    return token_scores(policy, prompt, tokens).sum(axis=-2)


def grad_logprob(policy: TabularPolicy, prompt: Prompt | int, completion) -> np.ndarray:
    """Analytic gradient of :func:`logprob` with respect to the flat logits."""
    tokens = as_tokens(policy.spec, completion)
    if tokens.ndim != 1:
        raise InvalidInputError("grad_logprob takes a single completion")
    return token_scores(policy, prompt, tokens).sum(axis=0)


def completion_array(spec: GenerationSpec) -> np.ndarray:
    """All ``V^T`` completions as an int array, lexicographic order."""
    spec.check_budget()
    grids = np.indices((spec.vocab_size,) * spec.seq_len).reshape(spec.seq_len, -1)
    return grids.T.astype(np.int64)


def enumerate_completions(spec: GenerationSpec) -> list[Completion]:
    spec.check_budget()
    return list(itertools.product(range(spec.vocab_size), repeat=spec.seq_len))


def completion_probs(policy: TabularPolicy, prompt: Prompt | int) -> np.ndarray:
    """Exact ``pi(y | x)`` for every completion in enumeration order."""
    return np.exp(sequence_logprobs(policy, prompt, completion_array(policy.spec)))


def finite_diff_grad(f: Callable[[np.ndarray], float], params, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise InvalidInputError(f"step h must be positive, got {h}")
    x = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        f_plus = f(x.copy())
        x[i] = orig - h
        f_minus = f(x.copy())
        x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"objective is not finite near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
