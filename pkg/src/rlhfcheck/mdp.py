"""Tabular MDP verifier.

Exact policy evaluation and occupancy measures by linear solves, the policy
gradient theorem, the performance-difference identity and its surrogate,
the TV-form improvement bound, conservative policy iteration, the clipped PPO
objective, and the prefix-tree embedding of a token-generation task.

Policies are softmax over a logits table ``[s, a]``; gradients are with respect
to those logits, flattened row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from rlhfcheck.core import GenerationSpec, Prompt, RngStream, TabularPolicy, _check_prompt
from rlhfcheck.errors import BudgetExceededError, InvalidInputError, SolverError
from rlhfcheck.rewards import RewardFunction, reward_vector

PROB_TOL = 1e-12
MAX_DENSE_ENTRIES = 10**8
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """``(P[s, a, s'], r[s, a], d0, gamma)`` plus an optional terminal mask.

    Terminal states have value zero and end the episode; they make ``gamma = 1``
    well posed on finite-horizon tasks.
    """

    P: np.ndarray
    r: np.ndarray
    d0: np.ndarray
    gamma: float
    terminal: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        d0 = np.asarray(self.d0, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2] or d0.shape != P.shape[:1]:
            raise InvalidInputError("need P[s,a,s'], r[s,a], d0[s] with matching sizes")
        if (P < 0).any() or np.abs(P.sum(-1) - 1).max() > PROB_TOL:
            raise InvalidInputError("every P[s,a,:] must be a probability vector")
        if (d0 < 0).any() or abs(d0.sum() - 1) > PROB_TOL:
            raise InvalidInputError("d0 must be a probability vector")
        if not np.isfinite(r).all():
            raise InvalidInputError("rewards must be finite")
        term = None
        if self.terminal is not None:
            term = np.asarray(self.terminal, dtype=bool)
            if term.shape != d0.shape:
                raise InvalidInputError("terminal mask must have one entry per state")
        if not 0 <= self.gamma <= 1 or (self.gamma == 1 and (term is None or not term.any())):
            raise InvalidInputError("gamma must lie in [0, 1); gamma = 1 needs terminal states")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "d0", d0)
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def live(self) -> np.ndarray:
        """Mask of non-terminal states."""
        if self.terminal is None:
            return np.ones(self.n_states, dtype=bool)
        return ~self.terminal


@dataclass(frozen=True, eq=False)
class MdpPolicy:
    logits: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=np.float64)
        if z.ndim != 2 or np.isnan(z).any() or np.isposinf(z).any() or np.isneginf(z).all(-1).any():
            raise InvalidInputError("logits must be a finite [s, a] table (rows may not be all -inf)")
        object.__setattr__(self, "logits", z)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "MdpPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: RngStream | int = 0, scale: float = 1.0) -> "MdpPolicy":
        if not isinstance(rng, RngStream):
            rng = RngStream(int(rng))
        return cls(scale * rng.generator().standard_normal((n_states, n_actions)))

    @classmethod
    def from_probs(cls, probs) -> "MdpPolicy":
        probs = np.asarray(probs, dtype=np.float64)
        if (probs < 0).any() or np.abs(probs.sum(-1) - 1).max() > PROB_TOL:
            raise InvalidInputError("rows of probs must be probability vectors")
        with np.errstate(divide="ignore"):
            return cls(np.log(probs))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @property
    def theta(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def with_theta(self, theta) -> "MdpPolicy":
        return MdpPolicy(np.asarray(theta, dtype=np.float64).reshape(self.logits.shape))


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, MdpPolicy) else np.asarray(policy, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ValueTables:
    V: np.ndarray
    Q: np.ndarray
    adv: np.ndarray


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    rho: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.rho.sum())


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not np.isfinite(a).all() or np.linalg.cond(a) > MAX_CONDITION:
        raise SolverError("linear system is singular or ill-conditioned")
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(str(exc)) from exc


def _induced(mdp: TabularMDP, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state kernel and expected reward under ``pi``, zeroed on terminal states."""
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = (pi * mdp.r).sum(-1)
    live = mdp.live
    return P_pi * live[:, None], r_pi * live


def policy_evaluation(mdp: TabularMDP, policy) -> ValueTables:
    pi = _probs(policy)
    P_pi, r_pi = _induced(mdp, pi)
    V = _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    Q = (mdp.r + mdp.gamma * mdp.P @ V) * mdp.live[:, None]
    return ValueTables(V, Q, Q - V[:, None])


def bellman_residual(mdp: TabularMDP, policy, tables: ValueTables) -> float:
    pi = _probs(policy)
    q_res = (mdp.r + mdp.gamma * mdp.P @ tables.V) * mdp.live[:, None] - tables.Q
    v_res = (pi * tables.Q).sum(-1) - tables.V
    return float(max(np.abs(q_res).max(), np.abs(v_res).max()))


def objective(mdp: TabularMDP, policy) -> float:
    return float(mdp.d0 @ policy_evaluation(mdp, policy).V)


def occupancy(mdp: TabularMDP, policy) -> OccupancyMeasure:
    """Unnormalised discounted visitation ``rho = d0 + gamma P_pi^T rho``."""
    P_pi, _ = _induced(mdp, _probs(policy))
    return OccupancyMeasure(_solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mdp.d0))


def occupancy_series(mdp: TabularMDP, policy, terms: int = 500) -> np.ndarray:
    """Truncated ``sum_k gamma^k (P_pi^T)^k d0``."""
    P_pi, _ = _induced(mdp, _probs(policy))
    term = mdp.d0.copy()
    total = term.copy()
    for _ in range(terms):
        term = mdp.gamma * P_pi.T @ term
        total += term
    return total


@dataclass(frozen=True, eq=False)
class OptimalValues:
    V: np.ndarray
    Q: np.ndarray
    greedy: np.ndarray
    iterations: int

    @property
    def policy(self) -> MdpPolicy:
        return MdpPolicy.from_probs(self.greedy)


def value_iteration(mdp: TabularMDP, tol: float = 1e-13, max_iter: int = 100_000) -> OptimalValues:
    V = np.zeros(mdp.n_states)
    live = mdp.live[:, None]
    for it in range(1, max_iter + 1):
        Q = (mdp.r + mdp.gamma * mdp.P @ V) * live
        V_new = Q.max(-1)
        if np.abs(V_new - V).max() <= tol:
            V = V_new
            break
        V = V_new
    else:
        raise SolverError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")
    Q = (mdp.r + mdp.gamma * mdp.P @ V) * live
    greedy = np.zeros_like(Q)
    greedy[np.arange(mdp.n_states), Q.argmax(-1)] = 1.0
    return OptimalValues(V, Q, greedy, it)


def random_mdp(
    n_states: int = 5, n_actions: int = 3, gamma: float = 0.9, rng: RngStream | int = 0
) -> TabularMDP:
    """Dirichlet(1) transitions and start distribution, U[0, 1) rewards."""
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng))
    gen = rng.generator()
    P = gen.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = gen.uniform(size=(n_states, n_actions))
    d0 = gen.dirichlet(np.ones(n_states))
    return TabularMDP(P / P.sum(-1, keepdims=True), r, d0 / d0.sum(), gamma)


def _draw(gen: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = gen.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(-1), probs.shape[-1] - 1)


def rollout_objective(
    mdp: TabularMDP, policy, episodes: int = 100_000, horizon: int = 200, rng: RngStream | int = 0
) -> tuple[float, float]:
    """Monte Carlo discounted return: ``(mean, standard error)``."""
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng))
    gen = rng.generator()
    pi = _probs(policy)
    states = _draw(gen, np.broadcast_to(mdp.d0, (episodes, mdp.n_states)))
    returns = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    for t in range(horizon):
        alive &= mdp.live[states]
        actions = _draw(gen, pi[states])
        returns += alive * mdp.gamma**t * mdp.r[states, actions]
        states = _draw(gen, mdp.P[states, actions])
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(episodes))


# ---------------------------------------------------------------------------
# Gradients, performance difference, improvement bound
# ---------------------------------------------------------------------------


def pgt_gradient(mdp: TabularMDP, policy: MdpPolicy) -> np.ndarray:
    """``sum_s rho(s) sum_a grad pi(a|s) Q(s, a)`` w.r.t. the logits.

    For softmax logits this is ``rho(s) pi(b|s) A(s, b)`` at entry ``(s, b)``.
    """
    pi = _probs(policy)
    tables = policy_evaluation(mdp, pi)
    rho = occupancy(mdp, pi).rho
    return (rho[:, None] * pi * tables.adv).ravel()


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-state ``KL(p || q)``; states where ``p`` has mass ``q`` lacks are infinite."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(-1)


def _tv_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(-1)


def penalty_constant(mdp: TabularMDP, adv_old: np.ndarray) -> tuple[float, float]:
    """``(eps, C)`` with ``eps = max |A|`` and ``C = 4 eps gamma / (1 - gamma)^2``."""
    if mdp.gamma >= 1:
        raise InvalidInputError("the improvement bound needs gamma < 1")
    eps = float(np.abs(adv_old).max())
    return eps, 4.0 * eps * mdp.gamma / (1.0 - mdp.gamma) ** 2


@dataclass(frozen=True)
class SurrogateReport:
    J_old: float
    J_new: float
    L_value: float
    identity_gap: float
    kl_max: float
    tv_max: float
    eps_max_adv: float
    C: float
    bound_value: float
    bound_holds: bool
    kl_bound_value: float
    kl_bound_holds: bool
    M_old: float
    M_new: float

    @property
    def surrogate_gap(self) -> float:
        return abs(self.J_new - self.L_value)

    @property
    def monotone_holds(self) -> bool:
        """``M(new) - M(old) <= J(new) - J(old)`` up to rounding."""
        return self.M_new - self.M_old <= self.J_new - self.J_old + 1e-12


def surrogate(mdp: TabularMDP, pi_old, pi_new, tables_old: ValueTables | None = None, rho_old=None) -> float:
    """``L_old(new) = J(old) + sum_s rho_old(s) sum_a pi_new(a|s) A_old(s, a)``."""
    old, new = _probs(pi_old), _probs(pi_new)
    tables_old = tables_old or policy_evaluation(mdp, old)
    rho_old = occupancy(mdp, old).rho if rho_old is None else rho_old
    return float(mdp.d0 @ tables_old.V + rho_old @ (new * tables_old.adv).sum(-1))


def performance_difference(mdp: TabularMDP, pi_old, pi_new) -> SurrogateReport:
    """``J(new) - J(old)`` against ``sum_s rho_new(s) sum_a pi_new(a|s) A_old(s, a)``, plus the surrogate."""
    old, new = _probs(pi_old), _probs(pi_new)
    t_old = policy_evaluation(mdp, old)
    rho_old = occupancy(mdp, old).rho
    J_old = float(mdp.d0 @ t_old.V)
    J_new = objective(mdp, new)
    rho_new = occupancy(mdp, new).rho
    advantage_form = float(rho_new @ (new * t_old.adv).sum(-1))
    L = surrogate(mdp, old, new, t_old, rho_old)
    live = mdp.live
    kl_max = float(_kl_rows(new, old)[live].max())
    tv_max = float(_tv_rows(new, old)[live].max())
    if mdp.gamma < 1:
        eps, C = penalty_constant(mdp, t_old.adv)
    else:
        eps, C = float(np.abs(t_old.adv).max()), float("inf")
    gap = abs(J_new - L)
    bound = C * tv_max**2 if tv_max > 0 else 0.0
    kl_bound = C * kl_max**2 if kl_max > 0 else 0.0
    slack = 1e-12 * max(1.0, abs(J_old))
    M_new = L - (C * kl_max if kl_max > 0 else 0.0)
    return SurrogateReport(
        J_old=J_old,
        J_new=J_new,
        L_value=L,
        identity_gap=abs((J_new - J_old) - advantage_form),
        kl_max=kl_max,
        tv_max=tv_max,
        eps_max_adv=eps,
        C=C,
        bound_value=bound,
        bound_holds=bool(gap <= bound + slack),
        kl_bound_value=kl_bound,
        kl_bound_holds=bool(gap <= kl_bound + slack),
        M_old=J_old,
        M_new=M_new,
    )


def improvement_bound_check(mdp: TabularMDP, pi_old, pi_new) -> SurrogateReport:
    """Audit ``|J(new) - L_old(new)| <= C tv_max^2``; the ``C kl_max^2`` form is only reported."""
    if mdp.gamma >= 1:
        raise InvalidInputError("the improvement bound needs gamma < 1")
    return performance_difference(mdp, pi_old, pi_new)


# ---------------------------------------------------------------------------
# Conservative policy iteration
# ---------------------------------------------------------------------------

PENALIZED_ASCENT = "penalized_ascent"
EXACT_TILT = "exact_tilt"


@dataclass
class CpiTrace:
    """``(policy, J)`` per iterate, starting with the initial policy."""

    steps: list = field(default_factory=list)
    halted: str | None = None

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    @property
    def values(self) -> np.ndarray:
        return np.array([J for _, J in self.steps])


class _Penalized:
    """``M(pi) = L_i(pi) - C max_s KL(pi(.|s) || pi_i(.|s))`` up to the constant ``J_i``."""

    def __init__(self, mdp: TabularMDP, pi_i: np.ndarray, C: float):
        tables = policy_evaluation(mdp, pi_i)
        self.J = float(mdp.d0 @ tables.V)
        self.weighted_adv = occupancy(mdp, pi_i).rho[:, None] * tables.adv
        self.pi_i = pi_i
        self.C = C
        self.live = mdp.live

    def value(self, pi: np.ndarray) -> float:
        kl = _kl_rows(pi, self.pi_i)[self.live].max()
        return self.J + float((pi * self.weighted_adv).sum()) - self.C * kl

    def grad(self, z: np.ndarray) -> np.ndarray:
        pi = softmax(z, axis=-1)
        g = pi * (self.weighted_adv - (pi * self.weighted_adv).sum(-1, keepdims=True))
        kl = _kl_rows(pi, self.pi_i)
        kl[~self.live] = -np.inf
        s = int(kl.argmax())
        if kl[s] > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                log_ratio = np.where(pi[s] > 0, np.log(pi[s]) - np.log(self.pi_i[s]), 0.0)
            g[s] -= self.C * pi[s] * (log_ratio - kl[s])
        return g


def _ascent_step(obj: _Penalized, z0: np.ndarray, steps: int) -> np.ndarray:
    """Subgradient ascent with Armijo backtracking; never returns a worse point."""
    z = z0.copy()
    f = obj.value(softmax(z, axis=-1))
    lr = 1.0
    for _ in range(steps):
        g = obj.grad(z)
        g2 = float((g * g).sum())
        if g2 < 1e-30:
            break
        while lr > 1e-12:
            cand = z + lr * g
            fc = obj.value(softmax(cand, axis=-1))
            if fc >= f + 1e-4 * lr * g2:
                z, f = cand, fc
                lr *= 2.0
                break
            lr *= 0.5
        else:
            break
    return z


def _tilt(pi_i: np.ndarray, weighted_adv: np.ndarray, kappa: float, iters: int = 60) -> np.ndarray:
    """Per-state ``pi ∝ pi_i exp(w / lam)`` with ``lam`` chosen so ``KL(pi || pi_i) <= kappa``."""
    with np.errstate(divide="ignore"):
        base = np.log(pi_i)
    lo = np.full(pi_i.shape[0], -40.0)
    hi = np.full(pi_i.shape[0], 40.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        p = softmax(base + weighted_adv * np.exp(-mid)[:, None], axis=-1)
        too_far = _kl_rows(p, pi_i) > kappa
        lo = np.where(too_far, mid, lo)
        hi = np.where(too_far, hi, mid)
    return softmax(base + weighted_adv * np.exp(-hi)[:, None], axis=-1)


def _exact_step(obj: _Penalized, kappa_hi: float = 2.0, iters: int = 60) -> np.ndarray:
    """Maximise M exactly: tilt at KL radius ``kappa``, ternary search over ``kappa``.

    For a fixed radius the per-state tilt maximises ``L``; M is concave in the radius.
    """
    def at(kappa):
        return _tilt(obj.pi_i, obj.weighted_adv, kappa)

    lo, hi = 0.0, kappa_hi
    for _ in range(iters):
        a, b = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if obj.value(at(a)) < obj.value(at(b)):
            lo = a
        else:
            hi = b
    return at(0.5 * (lo + hi))


def cpi_iterate(
    mdp: TabularMDP,
    pi_init,
    iters: int,
    c_scale: float = 1.0,
    inner: str = PENALIZED_ASCENT,
    inner_steps: int = 200,
) -> CpiTrace:
    """Conservative policy iteration: ``pi_{i+1} = argmax_pi L_i(pi) - C KL_max(pi, pi_i)``.

    A candidate is accepted only if it does not lower ``M_i`` below ``J_i``,
    which makes the J sequence non-decreasing. ``inner`` selects penalised
    subgradient ascent on the logits or the exact per-state tilt solve.
    """
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    if inner not in (PENALIZED_ASCENT, EXACT_TILT):
        raise InvalidInputError(f"unknown inner solver {inner!r}")
    policy = pi_init if isinstance(pi_init, MdpPolicy) else MdpPolicy.from_probs(pi_init)
    trace = CpiTrace([(policy, objective(mdp, policy))])
    for _ in range(iters):
        pi_i = policy.probs
        _, C = penalty_constant(mdp, policy_evaluation(mdp, pi_i).adv)
        obj = _Penalized(mdp, pi_i, c_scale * C)
        if inner == PENALIZED_ASCENT:
            cand = MdpPolicy(_ascent_step(obj, policy.logits, inner_steps))
        else:
            cand = MdpPolicy.from_probs(_exact_step(obj))
        m_new = obj.value(cand.probs)
        if not np.isfinite(m_new):
            trace.halted = "inner maximisation produced a non-finite surrogate"
            break
        if m_new < obj.J:
            cand = policy
        policy = cand
        trace.steps.append((policy, objective(mdp, policy)))
    return trace


# ---------------------------------------------------------------------------
# Clipped PPO objective
# ---------------------------------------------------------------------------


def _contributes(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Where ``min(r A, clip(r) A)`` follows ``r A`` (the gradient is non-zero)."""
    plateau = ((adv > 0) & (ratio > 1 + eps)) | ((adv < 0) & (ratio < 1 - eps))
    return ~plateau


def ppo_clip_objective(mdp: TabularMDP, policy: MdpPolicy, snapshot: MdpPolicy, eps: float = 0.2) -> float:
    """``sum_s rho_old(s) sum_a pi_old(a|s) min(r A_old, clip(r, 1-eps, 1+eps) A_old)``."""
    old, new = _probs(snapshot), _probs(policy)
    adv = policy_evaluation(mdp, old).adv
    rho = occupancy(mdp, old).rho
    ratio = new / old
    clipped = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
    return float(rho @ (old * clipped).sum(-1))


def ppo_clip_gradient(mdp: TabularMDP, policy: MdpPolicy, snapshot: MdpPolicy, eps: float = 0.2) -> np.ndarray:
    old, new = _probs(snapshot), _probs(policy)
    adv = policy_evaluation(mdp, old).adv
    rho = occupancy(mdp, old).rho
    w = rho[:, None] * _contributes(new / old, adv, eps) * adv * new
    # d pi(a)/d z_b = pi(a) (delta_ab - pi(b))
    return (w - new * w.sum(-1, keepdims=True)).ravel()


def ppo_clip_sampled_objective(policy: MdpPolicy, snapshot: MdpPolicy, states, actions, adv, eps: float = 0.2) -> float:
    """Sample mean of the clipped surrogate over ``(s, a, A)`` tuples drawn from the snapshot."""
    states, actions = np.asarray(states), np.asarray(actions)
    adv = np.asarray(adv, dtype=np.float64)
    ratio = policy.probs[states, actions] / snapshot.probs[states, actions]
    return float(np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv).mean())


def ppo_clip_sampled_gradient(
    policy: MdpPolicy, snapshot: MdpPolicy, states, actions, adv, eps: float = 0.2
) -> np.ndarray:
    states, actions = np.asarray(states), np.asarray(actions)
    adv = np.asarray(adv, dtype=np.float64)
    pi = policy.probs
    ratio = pi[states, actions] / snapshot.probs[states, actions]
    coef = _contributes(ratio, adv, eps) * ratio * adv / states.size
    # grad of log pi(a|s) w.r.t. row s is onehot(a) - pi(.|s)
    g = np.zeros_like(pi)
    np.add.at(g, (states, actions), coef)
    np.add.at(g, states, -coef[:, None] * pi[states])
    return g.ravel()


# ---------------------------------------------------------------------------
# Prefix-tree embedding of a generation task
# ---------------------------------------------------------------------------


def chain_embed(spec: GenerationSpec, prompt: Prompt | int, r: RewardFunction) -> TabularMDP:
    """Deterministic prefix-tree MDP for one prompt.

    States are prefixes in depth-major order (the policy's context order),
    followed by the ``V^T`` full completions as absorbing terminal leaves.
    The reward ``R(y)`` is paid on the transition into leaf ``y``; ``gamma = 1``.
    """
    _check_prompt(spec, prompt)
    spec.check_budget()
    V, T = spec.vocab_size, spec.seq_len
    n_inner = spec.n_contexts
    n = n_inner + spec.n_completions
    if n * n * V > MAX_DENSE_ENTRIES:
        raise BudgetExceededError(f"dense prefix-tree MDP would need {n * n * V} entries")
    P = np.zeros((n, V, n))
    r_table = np.zeros((n, V))
    for depth in range(T):
        first = spec.context_offset(depth)
        count = V**depth
        parents = first + np.arange(count)
        children = (np.arange(count)[:, None] * V + np.arange(V)[None, :])
        if depth < T - 1:
            P[parents[:, None], np.arange(V)[None, :], spec.context_offset(depth + 1) + children] = 1.0
        else:
            P[parents[:, None], np.arange(V)[None, :], n_inner + children] = 1.0
            r_table[parents] = reward_vector(r, spec).reshape(count, V)
    leaves = n_inner + np.arange(spec.n_completions)
    P[leaves, :, leaves] = 1.0
    d0 = np.zeros(n)
    d0[0] = 1.0
    terminal = np.zeros(n, dtype=bool)
    terminal[leaves] = True
    return TabularMDP(P, r_table, d0, 1.0, terminal)


def chain_policy(policy: TabularPolicy, prompt: Prompt | int) -> MdpPolicy:
    """The token policy as an MDP policy on :func:`chain_embed` states (uniform on leaves)."""
    idx = _check_prompt(policy.spec, prompt)
    leaves = np.zeros((policy.spec.n_completions, policy.spec.vocab_size))
    return MdpPolicy(np.vstack([policy.params[idx], leaves]))


def chain_gradient(policy: TabularPolicy, prompt: Prompt | int, r: RewardFunction) -> np.ndarray:
    """Embedded-MDP policy gradient mapped back onto the token policy's flat parameters."""
    spec = policy.spec
    idx = _check_prompt(spec, prompt)
    mdp = chain_embed(spec, prompt, r)
    g = pgt_gradient(mdp, chain_policy(policy, prompt)).reshape(mdp.n_states, spec.vocab_size)
    out = np.zeros_like(policy.params)
    out[idx] = g[: spec.n_contexts]
    return out.ravel()


# ---------------------------------------------------------------------------
# Plain-text serialisation
# ---------------------------------------------------------------------------

MDP_HEADER = "# tabular-mdp v1"


def format_mdp(mdp: TabularMDP) -> str:
    """Row-major text layout; floats use ``repr`` so a round trip is exact.

    Lines: header, ``S A``, ``gamma``, ``terminal`` indices (or ``-``), ``d0``,
    then ``S`` reward rows of ``A`` values and ``S*A`` transition rows
    ``P[s, a, :]`` in ``(s, a)`` row-major order.
    """
    def row(values):
        return " ".join(repr(float(v)) for v in values)

    term = "-" if mdp.terminal is None else " ".join(str(i) for i in np.flatnonzero(mdp.terminal)) or "-"
    lines = [MDP_HEADER, f"{mdp.n_states} {mdp.n_actions}", repr(float(mdp.gamma)), term, row(mdp.d0)]
    lines += [row(v) for v in mdp.r]
    lines += [row(v) for v in mdp.P.reshape(-1, mdp.n_states)]
    return "\n".join(lines) + "\n"


def parse_mdp(text: str) -> TabularMDP:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MDP_HEADER:
        raise InvalidInputError(f"expected header {MDP_HEADER!r}")
    try:
        S, A = (int(x) for x in lines[1].split())
        gamma = float(lines[2])
        terminal = None
        if lines[3] != "-":
            terminal = np.zeros(S, dtype=bool)
            terminal[[int(x) for x in lines[3].split()]] = True
        body = [np.array(ln.split(), dtype=np.float64) for ln in lines[4:]]
    except (ValueError, IndexError) as exc:
        raise InvalidInputError(f"malformed MDP text: {exc}") from exc
    if len(body) != 1 + S + S * A or any(b.size != n for b, n in zip(body, [S] + [A] * S + [S] * (S * A))):
        raise InvalidInputError("MDP text has the wrong number of rows or columns")
    return TabularMDP(np.array(body[1 + S:]).reshape(S, A, S), np.array(body[1 : 1 + S]), body[0], gamma, terminal)


def save_mdp(path: str | Path, mdp: TabularMDP) -> None:
    Path(path).write_text(format_mdp(mdp))


def load_mdp(path: str | Path) -> TabularMDP:
    return parse_mdp(Path(path).read_text())
