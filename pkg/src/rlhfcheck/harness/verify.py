"""Every oracle and identity check, as one deterministic pass/fail report.

Checks call through module attributes (``core.grad_logprob`` rather than a
bound import) so a patched implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from rlhfcheck import core, estimators, gro, mdp, rewards, rlfree
from rlhfcheck.core import GenerationSpec, Prompt, RngStream, TabularPolicy

FD_TOL = 1e-6
MDP_FD_REL_TOL = 1e-4
IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class Check:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.deviation) and self.deviation <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} deviation={self.deviation:.3e}  tol={self.tolerance:.0e}"


@dataclass(frozen=True)
class VerifyReport:
    seed: int
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def text(self) -> str:
        lines = [f"rlhfcheck verify seed={self.seed}"]
        lines += [c.line() for c in self.checks]
        n_pass = sum(c.passed for c in self.checks)
        lines.append(f"summary: {n_pass}/{len(self.checks)} passed")
        return "\n".join(lines) + "\n"


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def _draws(root: RngStream, n: int):
    return (root.child(k) for k in range(n))


SPEC = GenerationSpec(3, 3, prompt_count=2)
REWARD = rewards.RewardFunction.token_count(2)


def _random_completion(gen: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(t) for t in gen.integers(0, SPEC.vocab_size, SPEC.seq_len))


def _random_pair(gen: np.random.Generator) -> rewards.PreferencePair:
    prompt = Prompt(int(gen.integers(SPEC.prompt_count)))
    while True:
        a, b = _random_completion(gen), _random_completion(gen)
        if a != b:
            return rewards.PreferencePair(prompt, a, b)


# ---------------------------------------------------------------------------


def _core_checks(root: RngStream, seed: int) -> list[Check]:
    fd_dev = 0.0
    mass_dev = 0.0
    for rng in _draws(root, 20):
        gen = rng.generator()
        pol = TabularPolicy.random(SPEC, rng.child(0))
        prompt = int(gen.integers(SPEC.prompt_count))
        y = _random_completion(gen)
        fd = core.finite_diff_grad(lambda th: core.logprob(pol.with_theta(th), prompt, y), pol.theta)
        fd_dev = max(fd_dev, _max_abs(core.grad_logprob(pol, prompt, y), fd))
        mass_dev = max(mass_dev, abs(core.completion_probs(pol, prompt).sum() - 1.0))
    return [
        Check("core.fd.grad_logprob", fd_dev, FD_TOL),
        Check("core.completion_probs_sum_to_one", mass_dev, IDENTITY_TOL),
    ]


def _rewards_checks(root: RngStream, seed: int) -> list[Check]:
    pg, shaped, bt = 0.0, 0.0, 0.0
    for rng in _draws(root, 10):
        gen = rng.generator()
        pol = TabularPolicy.random(SPEC, rng.child(0))
        ref = TabularPolicy.random(SPEC, rng.child(1), role="reference")
        prompt = int(gen.integers(SPEC.prompt_count))
        fd = core.finite_diff_grad(lambda th: rewards.exact_objective(pol.with_theta(th), prompt, REWARD), pol.theta)
        pg = max(pg, _max_abs(rewards.exact_policy_gradient(pol, prompt, REWARD), fd))
        beta = float(gen.uniform(0.1, 1.0))
        fd = core.finite_diff_grad(
            lambda th: rewards.exact_kl_shaped_objective(pol.with_theta(th), ref, prompt, REWARD, beta), pol.theta
        )
        shaped = max(shaped, _max_abs(rewards.exact_kl_shaped_gradient(pol, ref, prompt, REWARD, beta), fd))
        data = rewards.PreferenceDataset(tuple(_random_pair(gen) for _ in range(8)))
        model = rewards.RewardModel.from_params(gen.standard_normal(SPEC.vocab_size + 1))
        fd = core.finite_diff_grad(lambda w: rewards.bt_loss(rewards.RewardModel.from_params(w), data), model.params)
        bt = max(bt, _max_abs(rewards.bt_grad(model, data), fd))
    return [
        Check("rewards.fd.exact_policy_gradient", pg, FD_TOL),
        Check("rewards.fd.kl_shaped_gradient", shaped, FD_TOL),
        Check("rewards.fd.bt_grad", bt, FD_TOL),
    ]


def _estimator_checks(root: RngStream, seed: int) -> list[Check]:
    dev = 0.0
    ys = core.completion_array(SPEC)
    for rng in _draws(root, 100):
        gen = rng.generator()
        pol = TabularPolicy.random(SPEC, rng.child(0))
        prompt = int(gen.integers(SPEC.prompt_count))
        baseline = float(gen.uniform(-5, 5))
        expectation = baseline * core.completion_probs(pol, prompt) @ core.score_matrix(pol, prompt, ys)
        dev = max(dev, float(np.max(np.abs(expectation))))
    return [Check("estimators.baseline_cancellation", dev, IDENTITY_TOL)]


def _rlfree_checks(root: RngStream, seed: int) -> list[Check]:
    fd_dpo = fd_cpl = fd_kto = 0.0
    id_dpo = id_cpl = equiv = 0.0
    for rng in _draws(root, 20):
        gen = rng.generator()
        pol = TabularPolicy.random(SPEC, rng.child(0))
        ref = TabularPolicy.random(SPEC, rng.child(1), role="reference")
        pair = _random_pair(gen)
        cfg = rlfree.RlFreeConfig(beta=float(gen.uniform(0.1, 2.0)), cpl_gamma=float(gen.uniform(0.5, 1.0)), kto_batch=3)
        fd = core.finite_diff_grad(lambda th: -rlfree.dpo_loss(pol.with_theta(th), ref, pair, cfg), pol.theta)
        fd_dpo = max(fd_dpo, _max_abs(rlfree.dpo_grad(pol, ref, pair, cfg), fd))
        fd = core.finite_diff_grad(lambda th: -rlfree.cpl_loss(pol.with_theta(th), pair, cfg), pol.theta)
        fd_cpl = max(fd_cpl, _max_abs(rlfree.cpl_grad(pol, pair, cfg), fd))
        context = [(Prompt(int(gen.integers(SPEC.prompt_count))), _random_completion(gen)) for _ in range(3)]
        sample = (_random_completion(gen), bool(gen.integers(2)))
        a = rlfree.kto_reference_point(pol, ref, context)
        fd = core.finite_diff_grad(
            lambda th: rlfree.kto_objective(pol.with_theta(th), ref, sample, a, cfg, pair.prompt), pol.theta
        )
        fd_kto = max(fd_kto, _max_abs(rlfree.kto_grad(pol, ref, sample, context, cfg, pair.prompt), fd))
        id_dpo = max(id_dpo, _max_abs(rlfree.dpo_grad_reinforce_form(pol, ref, pair, cfg), rlfree.dpo_grad(pol, ref, pair, cfg)))
        id_cpl = max(id_cpl, _max_abs(rlfree.cpl_grad_reinforce_form(pol, pair, cfg), rlfree.cpl_grad(pol, pair, cfg)))
        same = rlfree.RlFreeConfig(beta=cfg.beta, cpl_gamma=1.0)
        equiv = max(equiv, rlfree.dpo_cpl_equivalence_check(pol, pair, same).delta)
    return [
        Check("rlfree.fd.dpo_grad", fd_dpo, FD_TOL),
        Check("rlfree.fd.cpl_grad", fd_cpl, FD_TOL),
        Check("rlfree.fd.kto_grad", fd_kto, FD_TOL),
        Check("rlfree.identity.dpo_reinforce_form", id_dpo, IDENTITY_TOL),
        Check("rlfree.identity.cpl_reinforce_form", id_cpl, IDENTITY_TOL),
        Check("rlfree.dpo_cpl_equivalence", equiv, IDENTITY_TOL),
    ]


def _gro_checks(root: RngStream, seed: int) -> list[Check]:
    checks = [
        Check(f"gro.reduction.{m}", gro.reduction_check(m, draws=100, seed=seed).max_abs_deviation, IDENTITY_TOL)
        for m in gro.REDUCTION_METHODS
    ]
    fd_dev = awr = shift = 0.0
    configs = [
        gro.GroConfig(baseline=estimators.BaselineKind.LEAVE_ONE_OUT),
        gro.GroConfig(upsilon=gro.Upsilon(gro.UpsilonKind.EXP), omega=gro.Omega.sigmoid(2.0),
                      baseline=estimators.BaselineKind.GROUP_MEAN),
        gro.GroConfig(upsilon=gro.Upsilon(gro.UpsilonKind.SCALED_EXP, 2.0), omega=gro.Omega.sigmoid_derivative(),
                      distance=gro.Distance(gro.DistanceKind.SEQ_LOGPROB), anchor=gro.Anchor(value=-3.0)),
        gro.reduction_config("grpo"),
    ]
    for k, rng in enumerate(_draws(root, 8)):
        gen = rng.generator()
        pol = TabularPolicy.random(SPEC, rng.child(0))
        snap = pol.with_theta(pol.theta + 0.05 * gen.standard_normal(pol.n_params)).as_role("snapshot")
        cfg = configs[k % len(configs)]
        batch = estimators.draw_batch(pol, Prompt(0), REWARD, rng.child(2), 4, snap)
        fd = core.finite_diff_grad(
            lambda th: gro.gro_objective(cfg, pol.with_theta(th), snap, None, batch, weights_from=pol), pol.theta
        )
        fd_dev = max(fd_dev, _max_abs(gro.gro_gradient(cfg, pol, snap, None, batch), fd))
        pi_old = gen.dirichlet(np.ones(5))
        adv = gen.standard_normal(5)
        beta = float(gen.uniform(0.2, 2.0))
        star = gro.closed_form_policy(pi_old, adv, beta).distribution
        awr = max(awr, _max_abs(gro.awr_population_maximizer(pi_old, adv, beta), star))
        shifted = gro.closed_form_policy(pi_old, adv + float(gen.uniform(-10, 10)), beta).distribution
        shift = max(shift, _max_abs(shifted, star))
    return checks + [
        Check("gro.fd.gro_objective", fd_dev, FD_TOL),
        Check("gro.closed_form.awr_maximizer", awr, 1e-10),
        Check("gro.closed_form.advantage_shift", shift, IDENTITY_TOL),
    ]


def _mdp_checks(root: RngStream, seed: int) -> list[Check]:
    residual = pgt = series = gap = ppo = 0.0
    violations = 0
    for rng in _draws(root, 5):
        m = mdp.random_mdp(5, 3, 0.9, rng.child(0))
        pi = mdp.MdpPolicy.random(5, 3, rng.child(1))
        tables = mdp.policy_evaluation(m, pi)
        residual = max(residual, mdp.bellman_residual(m, pi, tables))
        fd = core.finite_diff_grad(lambda th: mdp.objective(m, pi.with_theta(th)), pi.theta)
        pgt = max(pgt, _rel(mdp.pgt_gradient(m, pi), fd))
        series = max(series, _max_abs(mdp.occupancy(m, pi).rho, mdp.occupancy_series(m, pi, 500)))
        gen = rng.generator()
        for j in range(20):
            other = mdp.MdpPolicy.random(5, 3, rng.child(10 + j), scale=float(gen.uniform(0.1, 3.0)))
            rep = mdp.improvement_bound_check(m, pi, other)
            gap = max(gap, rep.identity_gap)
            violations += not rep.bound_holds
        near = pi.with_theta(pi.theta + 0.05 * gen.standard_normal(pi.theta.size))
        fd = core.finite_diff_grad(lambda th: mdp.ppo_clip_objective(m, pi.with_theta(th), pi, 0.2), near.theta)
        ppo = max(ppo, _max_abs(mdp.ppo_clip_gradient(m, near, pi, 0.2), fd))
    chain = 0.0
    for rng in _draws(root.child(99), 5):
        pol = TabularPolicy.random(SPEC, rng)
        for p in range(SPEC.prompt_count):
            chain = max(chain, _max_abs(mdp.chain_gradient(pol, p, REWARD), rewards.exact_policy_gradient(pol, p, REWARD)))
    return [
        Check("mdp.bellman_residual", residual, 1e-10),
        Check("mdp.fd.pgt_relative", pgt, MDP_FD_REL_TOL),
        Check("mdp.occupancy_series", series, 1e-9),
        Check("mdp.performance_difference_gap", gap, 1e-10),
        Check("mdp.tv_bound_violations", float(violations), 0.0),
        Check("mdp.fd.ppo_clip", ppo, FD_TOL),
        Check("mdp.chain_embed_gradient", chain, 1e-10),
    ]


SUITES: tuple[tuple[str, Callable[[RngStream, int], list[Check]]], ...] = (
    ("core", _core_checks),
    ("rewards", _rewards_checks),
    ("estimators", _estimator_checks),
    ("rlfree", _rlfree_checks),
    ("gro", _gro_checks),
    ("mdp", _mdp_checks),
)


def run_verify(seed: int = 0) -> VerifyReport:
    checks: list[Check] = []
    for index, (_, suite) in enumerate(SUITES):
        checks += suite(RngStream(seed, stream=100 + index), seed)
    return VerifyReport(seed, tuple(checks))
