"""Generalized Reinforce Optimization (GRO).

A GRO estimate is ``(1/N) sum_i sum_t w(arg_it) * u(A_i / beta) * grad log pi(y^i_t | .)``
where ``A_i`` is a sequence-level advantage, ``u`` is increasing, and ``w`` is a
dynamic weight of how far a stop-gradient distance ``d_it`` sits from an anchor.
Choosing ``(w, u, d, anchor, baseline)`` recovers RLOO, ReMax, GRPO, REINFORCE++,
DPO, KTO and CPL; :func:`reduction_check` verifies each instantiation against
the native implementation.

Also here: the closed-form maximiser of ``E_pi[A] - beta KL(pi || pi_old)``
and the advantage-weighted likelihood objective it induces.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from rlhfcheck.core import GenerationSpec, Prompt, RngStream, TabularPolicy, sample_tokens, token_logprobs, token_scores
from rlhfcheck.errors import ConfigError, InvalidInputError
from rlhfcheck.estimators import (
    BaselineKind,
    EstimatorConfig,
    SampleBatch,
    compute_advantages,
    draw_batch,
    estimate_gradient,
    make_batch,
)
from rlhfcheck.rewards import PreferencePair, RewardFunction
from rlhfcheck import rlfree


class OmegaKind(str, enum.Enum):
    ONE = "one"
    CLIP = "clip"
    SIGMOID = "sigmoid"
    SIGMOID_COMPLEMENT = "sigmoid_complement"
    SIGMOID_DERIVATIVE = "sigmoid_derivative"


@dataclass(frozen=True)
class Omega:
    kind: OmegaKind = OmegaKind.ONE
    lo: float | None = None
    hi: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", OmegaKind(self.kind))
        if self.kind is OmegaKind.CLIP:
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ConfigError("clip weight needs lo < hi")
            if self.lo < 0:
                raise ConfigError("clip weight must be non-negative (lo >= 0)")

    @classmethod
    def one(cls):
        return cls(OmegaKind.ONE)

    @classmethod
    def clip(cls, lo: float, hi: float):
        return cls(OmegaKind.CLIP, lo, hi)

    @classmethod
    def sigmoid(cls, scale: float = 1.0):
        return cls(OmegaKind.SIGMOID, scale=scale)

    @classmethod
    def sigmoid_complement(cls, scale: float = 1.0):
        return cls(OmegaKind.SIGMOID_COMPLEMENT, scale=scale)

    @classmethod
    def sigmoid_derivative(cls, scale: float = 1.0):
        return cls(OmegaKind.SIGMOID_DERIVATIVE, scale=scale)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind is OmegaKind.ONE:
            return np.ones_like(x)
        if self.kind is OmegaKind.CLIP:
            return np.clip(x, self.lo, self.hi)
        s = self.scale * x
        if self.kind is OmegaKind.SIGMOID:
            return expit(s)
        if self.kind is OmegaKind.SIGMOID_COMPLEMENT:
            return expit(-s)
        p = expit(s)
        return p * (1.0 - p)


class UpsilonKind(str, enum.Enum):
    IDENTITY = "identity"
    EXP = "exp"
    SCALED_EXP = "scaled_exp"


@dataclass(frozen=True)
class Upsilon:
    kind: UpsilonKind = UpsilonKind.IDENTITY
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", UpsilonKind(self.kind))
        if self.temperature <= 0:
            raise ConfigError("upsilon temperature must be positive")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind is UpsilonKind.IDENTITY:
            return x.copy()
        if self.kind is UpsilonKind.EXP:
            return np.exp(x)
        return np.exp(x / self.temperature)


class DistanceKind(str, enum.Enum):
    TOKEN_LOGPROB = "token_logprob"
    SEQ_LOGPROB = "seq_logprob"
    SEQ_LOGRATIO_TO_REF = "seq_logratio_to_ref"
    DISCOUNTED_SEQ_LOGPROB = "discounted_seq_logprob"
    TOKEN_LOGRATIO_TO_REF = "token_logratio_to_ref"
    RATIO_TO_SNAPSHOT = "ratio_to_snapshot"


@dataclass(frozen=True)
class Distance:
    kind: DistanceKind = DistanceKind.TOKEN_LOGPROB
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DistanceKind(self.kind))
        if not 0 < self.gamma <= 1:
            raise ConfigError("distance discount must lie in (0, 1]")

    @property
    def needs_ref(self) -> bool:
        return self.kind in (DistanceKind.SEQ_LOGRATIO_TO_REF, DistanceKind.TOKEN_LOGRATIO_TO_REF)


class AnchorKind(str, enum.Enum):
    CONSTANT = "constant"
    BAND = "band"
    OPPOSITE_SAMPLE = "opposite_sample"
    KTO_REFERENCE = "kto_reference"


@dataclass(frozen=True)
class Anchor:
    """Where the distance is measured from.

    ``band`` passes the distance through unshifted so a clip weight can hold
    it inside ``[1 - eps, 1 + eps]``; ``opposite_sample`` pairs sample ``i``
    with sample ``i ^ 1``; ``kto_reference`` uses the KTO mismatched-pair point.
    """

    kind: AnchorKind = AnchorKind.CONSTANT
    value: float = 0.0
    eps: float = 0.2
    m: int = 2
    signed_by_advantage: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", AnchorKind(self.kind))
        if self.kind is AnchorKind.BAND and not 0 < self.eps < 1:
            raise ConfigError("band anchor needs eps in (0, 1)")
        if self.kind is AnchorKind.KTO_REFERENCE and self.m < 2:
            raise ConfigError("kto_reference anchor needs m >= 2")


@dataclass(frozen=True)
class GroConfig:
    omega: Omega = field(default_factory=Omega)
    upsilon: Upsilon = field(default_factory=Upsilon)
    distance: Distance = field(default_factory=Distance)
    anchor: Anchor = field(default_factory=Anchor)
    alpha: float = 1.0
    beta: float = 1.0
    baseline: BaselineKind = BaselineKind.NONE
    baseline_value: float = 0.0
    sigma_floor: float = 1e-8
    token_discount: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "baseline", BaselineKind(self.baseline))
        if self.beta <= 0:
            raise ConfigError("GRO beta must be positive")
        if not 0 < self.token_discount <= 1:
            raise ConfigError("token_discount must lie in (0, 1]")
        if self.anchor.kind is AnchorKind.BAND:
            band = (1 - self.anchor.eps, 1 + self.anchor.eps)
            if self.omega.kind is not OmegaKind.CLIP or not np.allclose((self.omega.lo, self.omega.hi), band):
                raise ConfigError("band anchor requires omega = clip(1 - eps, 1 + eps)")

    def summary(self) -> str:
        parts = [f"omega={self.omega.kind.value}"]
        if self.omega.kind is OmegaKind.CLIP:
            parts[-1] += f"({self.omega.lo:g},{self.omega.hi:g})"
        parts += [
            f"upsilon={self.upsilon.kind.value}",
            f"distance={self.distance.kind.value}",
            f"anchor={self.anchor.kind.value}" + ("+signed" if self.anchor.signed_by_advantage else ""),
            f"baseline={self.baseline.value}",
            f"alpha={self.alpha:g}",
            f"beta={self.beta:g}",
        ]
        if self.token_discount != 1:
            parts.append(f"token_discount={self.token_discount:g}")
        return " ".join(parts)


def _distances(cfg: GroConfig, policy, snapshot, ref, prompt: Prompt, completions) -> np.ndarray:
    """Stop-gradient distances ``d_it`` of shape ``(N, T)``."""
    kind = cfg.distance.kind
    if cfg.distance.needs_ref and ref is None:
        raise ConfigError(f"{kind.value} distance needs a reference policy")
    lp = token_logprobs(policy, prompt, completions)
    T = lp.shape[-1]
    if kind is DistanceKind.TOKEN_LOGPROB:
        return lp
    if kind is DistanceKind.SEQ_LOGPROB:
        return np.repeat(lp.sum(-1, keepdims=True), T, axis=-1)
    if kind is DistanceKind.DISCOUNTED_SEQ_LOGPROB:
        d = lp @ (cfg.distance.gamma ** np.arange(T))
        return np.repeat(d[:, None], T, axis=-1)
    if kind is DistanceKind.RATIO_TO_SNAPSHOT:
        if snapshot is None:
            raise ConfigError("ratio_to_snapshot distance needs a snapshot policy")
        return np.exp(lp - token_logprobs(snapshot, prompt, completions))
    ratio = lp - token_logprobs(ref, prompt, completions)
    if kind is DistanceKind.TOKEN_LOGRATIO_TO_REF:
        return ratio
    return np.repeat(ratio.sum(-1, keepdims=True), T, axis=-1)


def gro_advantages(cfg: GroConfig, batch: SampleBatch) -> np.ndarray:
    return compute_advantages(
        cfg.baseline, batch.rewards, cfg.baseline_value, batch.greedy_reward, cfg.sigma_floor
    )


def gro_coefficients(
    cfg: GroConfig,
    policy: TabularPolicy,
    snapshot: TabularPolicy | None,
    ref: TabularPolicy | None,
    batch: SampleBatch,
    context: Sequence[tuple[Prompt, Sequence[int]]] | None = None,
) -> np.ndarray:
    """Per-token weights ``w(arg_it) u(A_i / beta) discount^t``, all stop-gradient."""
    adv = gro_advantages(cfg, batch)
    d = _distances(cfg, policy, snapshot, ref, batch.prompt, batch.completions)
    anchor = cfg.anchor
    if anchor.kind is AnchorKind.BAND:
        arg = d
    elif anchor.kind is AnchorKind.CONSTANT:
        arg = cfg.alpha * (d - anchor.value)
    elif anchor.kind is AnchorKind.OPPOSITE_SAMPLE:
        n = batch.size
        if n < 2 or n % 2:
            raise ConfigError("opposite_sample anchor needs a batch of (y+, y-) pairs")
        arg = cfg.alpha * (d - d[np.arange(n) ^ 1])
    else:
        if context is None or len(context) != anchor.m:
            raise ConfigError(f"kto_reference anchor needs a context of m={anchor.m} pairs")
        if ref is None:
            raise ConfigError("kto_reference anchor needs a reference policy")
        arg = cfg.alpha * (d - rlfree.kto_reference_point(policy, ref, context))
    if anchor.signed_by_advantage:
        arg = np.sign(adv)[:, None] * arg
    steps = cfg.token_discount ** np.arange(d.shape[-1])
    return cfg.omega(arg) * cfg.upsilon(adv / cfg.beta)[:, None] * steps


def gro_gradient(
    cfg: GroConfig,
    policy: TabularPolicy,
    snapshot: TabularPolicy | None,
    ref: TabularPolicy | None,
    batch: SampleBatch,
    context=None,
) -> np.ndarray:
    coef = gro_coefficients(cfg, policy, snapshot, ref, batch, context)
    return np.einsum("nt,ntd->d", coef, token_scores(policy, batch.prompt, batch.completions)) / batch.size


def gro_objective(
    cfg: GroConfig,
    policy: TabularPolicy,
    snapshot: TabularPolicy | None,
    ref: TabularPolicy | None,
    batch: SampleBatch,
    context=None,
    weights_from: TabularPolicy | None = None,
) -> float:
    """Sampled weighted log-likelihood whose gradient is :func:`gro_gradient`.

    ``weights_from`` freezes the stop-gradient weights at another parameter
    point; finite differences perturb ``policy`` while holding them fixed.
    """
    frozen = policy if weights_from is None else weights_from
    coef = gro_coefficients(cfg, frozen, snapshot, ref, batch, context)
    lp = token_logprobs(policy, batch.prompt, batch.completions)
    return float((coef * lp).sum() / batch.size)


# ---------------------------------------------------------------------------
# Closed-form KL-regularised optimum and advantage-weighted likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClosedFormResult:
    distribution: np.ndarray
    log_partition: float

    @property
    def partition(self) -> float:
        return float(np.exp(self.log_partition))


def closed_form_policy(pi_old, advantages, beta: float) -> ClosedFormResult:
    """``pi*(a) = pi_old(a) exp(A(a)/beta) / Z``, computed with a max shift."""
    pi_old = np.asarray(pi_old, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if beta <= 0:
        raise InvalidInputError("beta must be positive")
    if pi_old.shape != adv.shape or (pi_old < 0).any() or abs(pi_old.sum() - 1) > 1e-10:
        raise InvalidInputError("pi_old must be a probability vector matching advantages")
    with np.errstate(divide="ignore"):
        logits = np.log(pi_old) + adv / beta
    log_z = float(logsumexp(logits))
    return ClosedFormResult(np.exp(logits - log_z), log_z)


def kl_regularized_value(pi, pi_old, advantages, beta: float) -> float:
    """``sum_a pi(a) (A(a) - beta log(pi(a) / pi_old(a)))``; zero-mass actions contribute 0."""
    pi = np.asarray(pi, dtype=np.float64)
    pi_old = np.asarray(pi_old, dtype=np.float64)
    mask = pi > 0
    penalty = np.zeros_like(pi)
    penalty[mask] = np.log(pi[mask] / pi_old[mask])
    return float(np.sum(pi * (np.asarray(advantages) - beta * penalty)))


def awr_population_objective(pi, pi_old, advantages, beta: float) -> float:
    """``sum_a pi_old(a) exp(A(a)/beta) log pi(a)``."""
    w = np.asarray(pi_old) * np.exp(np.asarray(advantages) / beta)
    return float(w @ np.log(np.asarray(pi)))


def awr_population_maximizer(pi_old, advantages, beta: float, tol: float = 1e-15, max_iter: int = 200) -> np.ndarray:
    """Maximise :func:`awr_population_objective` over the simplex by Newton's method.

    Works in softmax logits with the first logit pinned at zero; the objective
    is concave there and the Hessian is ``-W (diag(p) - p p^T)`` restricted to
    the free coordinates.
    """
    w = np.asarray(pi_old, dtype=np.float64) * np.exp(np.asarray(advantages, dtype=np.float64) / beta)
    total = w.sum()
    k = w.size
    z = np.zeros(k)
    for _ in range(max_iter):
        p = np.exp(z - logsumexp(z))
        grad = (w - total * p)[1:]
        if np.max(np.abs(grad)) <= tol * total:
            break
        hess = -total * (np.diag(p) - np.outer(p, p))[1:, 1:]
        z[1:] -= np.linalg.solve(hess, grad)
    return np.exp(z - logsumexp(z))


def awr_objective(
    policy: TabularPolicy,
    snapshot: TabularPolicy,
    batch: SampleBatch,
    beta: float,
    advantages=None,
) -> float:
    """Sampled ``mean_i sum_t exp(A_i/beta) log pi(y^i_t | .)`` on a snapshot batch.

    ``advantages`` defaults to the batch rewards.
    """
    adv = batch.rewards if advantages is None else np.asarray(advantages, dtype=np.float64)
    lp = token_logprobs(policy, batch.prompt, batch.completions)
    return float((np.exp(adv / beta)[:, None] * lp).sum() / batch.size)


# ---------------------------------------------------------------------------
# Table of reductions
# ---------------------------------------------------------------------------

REDUCTION_METHODS = ("rloo", "remax", "grpo", "reinforce_pp", "dpo", "kto", "cpl")
EXACT, AT_SNAPSHOT = "exact", "at_snapshot"


@dataclass(frozen=True)
class ReductionReport:
    method: str
    config: GroConfig
    max_abs_deviation: float
    regime: str
    draws: int


def reduction_config(
    method: str, beta: float = 1.0, gamma: float = 1.0, eps: float = 0.2, m: int = 2, lam: float = 1.0
) -> GroConfig:
    """GRO parameters reproducing ``method``.

    ``beta``/``gamma`` are the native method's temperature and CPL discount;
    ``lam`` the KTO weight of the sample being reduced.
    """
    if method == "rloo":
        return GroConfig(baseline=BaselineKind.LEAVE_ONE_OUT)
    if method == "remax":
        return GroConfig(baseline=BaselineKind.GREEDY)
    if method in ("grpo", "reinforce_pp"):
        return GroConfig(
            omega=Omega.clip(1 - eps, 1 + eps),
            distance=Distance(DistanceKind.RATIO_TO_SNAPSHOT),
            anchor=Anchor(AnchorKind.BAND, eps=eps),
            baseline=BaselineKind.GROUP_NORMALIZED if method == "grpo" else BaselineKind.GROUP_MEAN,
        )
    if method == "dpo":
        return GroConfig(
            omega=Omega.sigmoid_complement(),
            distance=Distance(DistanceKind.SEQ_LOGRATIO_TO_REF),
            anchor=Anchor(AnchorKind.OPPOSITE_SAMPLE, signed_by_advantage=True),
            alpha=beta,
            beta=1.0 / (2.0 * beta),
        )
    if method == "cpl":
        return GroConfig(
            omega=Omega.sigmoid_complement(),
            distance=Distance(DistanceKind.DISCOUNTED_SEQ_LOGPROB, gamma),
            anchor=Anchor(AnchorKind.OPPOSITE_SAMPLE, signed_by_advantage=True),
            alpha=beta,
            beta=1.0 / (2.0 * beta),
            token_discount=gamma,
        )
    if method == "kto":
        return GroConfig(
            omega=Omega.sigmoid_derivative(),
            distance=Distance(DistanceKind.TOKEN_LOGRATIO_TO_REF),
            anchor=Anchor(AnchorKind.KTO_REFERENCE, m=m),
            alpha=beta,
            beta=1.0 / (beta * lam),
        )
    raise ConfigError(f"unknown reduction method {method!r}")


def _random_pair(spec: GenerationSpec, prompt: Prompt, gen: np.random.Generator) -> PreferencePair:
    while True:
        a, b = gen.integers(0, spec.vocab_size, size=(2, spec.seq_len))
        if (a != b).any():
            return PreferencePair(prompt, tuple(a), tuple(b))


def reduction_check(
    method: str, draws: int = 100, seed: int = 0, spec: GenerationSpec | None = None, group_size: int = 4
) -> ReductionReport:
    """Compare the GRO instantiation of ``method`` to its native gradient on random draws.

    GRPO and REINFORCE++ are checked at ``theta = theta_old``; REINFORCE++ uses
    ``kl_beta = 0`` and ``gamma = 1`` so its token return is sequence-level.
    """
    if method not in REDUCTION_METHODS:
        raise ConfigError(f"unknown reduction method {method!r}")
    spec = spec or GenerationSpec(3, 3, prompt_count=2)
    root = RngStream(seed, stream=REDUCTION_METHODS.index(method))
    reward = RewardFunction.token_count(spec.vocab_size - 1)
    worst = 0.0
    cfg = reduction_config(method)
    for k in range(draws):
        rng = root.child(k)
        gen = rng.generator()
        policy = TabularPolicy.random(spec, rng.child(0))
        ref = TabularPolicy.random(spec, rng.child(1), role="reference")
        prompt = Prompt(int(gen.integers(spec.prompt_count)))
        if method in ("rloo", "remax", "grpo", "reinforce_pp"):
            snapshot = policy.as_role("snapshot")
            batch = draw_batch(policy, prompt, reward, rng.child(2), group_size, snapshot)
            cfg = reduction_config(method)
            native_cfg = EstimatorConfig(method, group_size=group_size)
            native = estimate_gradient(native_cfg, policy, snapshot, ref, batch)
            ours = gro_gradient(cfg, policy, snapshot, ref, batch)
        elif method in ("dpo", "cpl"):
            rl_cfg = rlfree.RlFreeConfig(
                beta=float(gen.uniform(0.1, 2.0)),
                cpl_gamma=float(gen.uniform(0.5, 1.0)) if method == "cpl" else 1.0,
            )
            pair = _random_pair(spec, prompt, gen)
            batch = make_batch(policy, policy, prompt, [pair.preferred, pair.dispreferred], [1.0, -1.0])
            cfg = reduction_config(method, beta=rl_cfg.beta, gamma=rl_cfg.cpl_gamma)
            if method == "dpo":
                native = rlfree.dpo_grad(policy, ref, pair, rl_cfg)
            else:
                native = rlfree.cpl_grad(policy, pair, rl_cfg)
            ours = gro_gradient(cfg, policy, None, ref, batch)
        else:
            m = 4
            rl_cfg = rlfree.RlFreeConfig(
                beta=float(gen.uniform(0.1, 2.0)),
                lambda_desirable=float(gen.uniform(0.5, 2.0)),
                lambda_undesirable=float(gen.uniform(0.5, 2.0)),
                kto_batch=m,
            )
            context = [
                (Prompt(int(gen.integers(spec.prompt_count))), tuple(gen.integers(0, spec.vocab_size, spec.seq_len)))
                for _ in range(m)
            ]
            y = tuple(int(t) for t in gen.integers(0, spec.vocab_size, spec.seq_len))
            desirable = bool(gen.integers(2))
            lam = rl_cfg.lambda_desirable if desirable else rl_cfg.lambda_undesirable
            batch = make_batch(policy, policy, prompt, [y], [1.0 if desirable else -1.0])
            cfg = reduction_config("kto", beta=rl_cfg.beta, m=m, lam=lam)
            native = rlfree.kto_grad(policy, ref, (prompt, y, desirable), context, rl_cfg)
            ours = gro_gradient(cfg, policy, None, ref, batch, context)
        worst = max(worst, float(np.max(np.abs(ours - native))))
    regime = AT_SNAPSHOT if method in ("grpo", "reinforce_pp") else EXACT
    return ReductionReport(method, cfg, worst, regime, draws)
