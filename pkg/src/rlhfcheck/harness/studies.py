"""Variance table, reduction matrix and MDP audit, each written as CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from rlhfcheck import gro, mdp
from rlhfcheck.core import GenerationSpec, RngStream, TabularPolicy, finite_diff_grad
from rlhfcheck.estimators import EstimatorConfig, EstimatorKind, estimator_stats
from rlhfcheck.rewards import RewardFunction

VARIANCE_COLUMNS = ("estimator", "N", "trials", "variance", "max_abs_z", "cosine_to_exact")
REDUCTION_COLUMNS = ("method", "regime", "max_abs_deviation", "config")
MDP_COLUMNS = ("check", "value", "tolerance", "status")
GROUP_SIZES = (2, 4, 8, 16)
DEFAULT_ESTIMATORS = tuple(k.value for k in EstimatorKind)


def _write_csv(path: Path | None, columns: Sequence[str], rows: list[dict]) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_variance(
    estimators: Iterable[str] = DEFAULT_ESTIMATORS,
    group_sizes: Iterable[int] = GROUP_SIZES,
    trials: int = 20_000,
    seed: int = 0,
    spec: GenerationSpec | None = None,
    reward: RewardFunction | None = None,
    baseline: float = 1.0,
    out: str | Path | None = None,
) -> list[dict]:
    """Per-batch gradient variance (covariance trace) at one fixed random ``theta``.

    Every (estimator, N) cell uses the same sample stream, so cells differ only
    by estimator arithmetic and group size. ``baseline`` is the constant used
    by ``reinforce_baseline``.
    """
    spec = spec or GenerationSpec(3, 3)
    reward = reward or RewardFunction.token_count(spec.vocab_size - 1)
    policy = TabularPolicy.random(spec, RngStream(seed, 0))
    rows = []
    for name in estimators:
        for n in group_sizes:
            cfg = EstimatorConfig(name, group_size=n, baseline=baseline)
            rep = estimator_stats(cfg, policy, reward, trials, RngStream(seed, 1).child(n))
            rows.append({
                "estimator": cfg.kind.value,
                "N": n,
                "trials": trials,
                "variance": _fmt(rep.variance),
                "max_abs_z": _fmt(rep.max_abs_z),
                "cosine_to_exact": _fmt(rep.cosine_to_exact),
            })
    _write_csv(out, VARIANCE_COLUMNS, rows)
    return rows


def run_reductions(seed: int = 0, draws: int = 100, out: str | Path | None = None) -> list[dict]:
    rows = []
    for method in gro.REDUCTION_METHODS:
        rep = gro.reduction_check(method, draws=draws, seed=seed)
        rows.append({
            "method": method,
            "regime": rep.regime,
            "max_abs_deviation": _fmt(rep.max_abs_deviation),
            "config": rep.config.summary(),
        })
    _write_csv(out, REDUCTION_COLUMNS, rows)
    return rows


@dataclass(frozen=True)
class MdpAudit:
    rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(r["status"] != "FAIL" for r in self.rows)


def run_mdp_check(
    seed: int = 0,
    n_mdps: int = 10,
    pairs_per_mdp: int = 1000,
    cpi_iters: int = 50,
    out: str | Path | None = None,
) -> MdpAudit:
    """Audit random 5-state/3-action MDPs (gamma 0.9).

    Asserted rows: PGT vs finite differences, the performance-difference gap,
    TV-form bound violations, the monotone-surrogate inequality and CPI
    monotonicity. The KL-form violation count and the CPI gap to the optimum
    are reported with status ``report`` or ``PASS``/``FAIL`` against 1e-4.
    """
    root = RngStream(seed, 0)
    pgt_rel = gap = 0.0
    tv_viol = kl_viol = mono_viol = 0
    for i in range(n_mdps):
        m = mdp.random_mdp(5, 3, 0.9, root.child(i))
        pi = mdp.MdpPolicy.random(5, 3, root.child(i).child(0))
        fd = finite_diff_grad(lambda th: mdp.objective(m, pi.with_theta(th)), pi.theta)
        g = mdp.pgt_gradient(m, pi)
        pgt_rel = max(pgt_rel, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
        gen = root.child(i).child(1).generator()
        for _ in range(pairs_per_mdp):
            old = mdp.MdpPolicy(gen.standard_normal((5, 3)) * gen.uniform(0.1, 3.0))
            new = mdp.MdpPolicy(old.logits + gen.standard_normal((5, 3)) * gen.uniform(0.01, 3.0))
            rep = mdp.improvement_bound_check(m, old, new)
            gap = max(gap, rep.identity_gap)
            tv_viol += not rep.bound_holds
            kl_viol += not rep.kl_bound_holds
            mono_viol += not rep.monotone_holds
    m = mdp.random_mdp(5, 3, 0.9, RngStream(seed, 1))
    trace = mdp.cpi_iterate(m, mdp.MdpPolicy.uniform(5, 3), cpi_iters)
    values = trace.values
    optimum = float(m.d0 @ mdp.value_iteration(m).V)
    cpi_drop = float(max(0.0, -np.diff(values).min())) if values.size > 1 else 0.0
    cpi_gap = optimum - float(values[-1])

    def row(name, value, tol, asserted=True):
        status = ("PASS" if value <= tol else "FAIL") if asserted else "report"
        return {"check": name, "value": _fmt(value), "tolerance": _fmt(tol), "status": status}

    rows = [
        row("pgt_fd_relative_error", pgt_rel, 1e-4),
        row("performance_difference_gap", gap, 1e-10),
        row("tv_bound_violations", tv_viol, 0),
        row("kl_bound_violations", kl_viol, 0, asserted=False),
        row("monotone_surrogate_violations", mono_viol, 0),
        row("cpi_max_decrease", cpi_drop, 1e-12),
        row("cpi_gap_to_optimum", cpi_gap, 1e-4),
    ]
    _write_csv(out, MDP_COLUMNS, rows)
    return MdpAudit(rows)
