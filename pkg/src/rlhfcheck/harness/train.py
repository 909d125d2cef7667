"""Sample, score, estimate, update: the bandit training loop.

Each iteration draws one group per prompt from the current policy, estimates
the gradient, and takes an ascent step ``theta += lr * g``. ``exact_J`` is the
enumerated expected reward averaged over prompts, never a sample estimate.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rlhfcheck.core import GenerationSpec, Prompt, RngStream, TabularPolicy
from rlhfcheck.estimators import draw_batch, estimate_gradient, trial_gradients
from rlhfcheck.gro import gro_gradient, reduction_config
from rlhfcheck.harness.config import ExperimentConfig
from rlhfcheck.rewards import exact_objective, reward_vector

SCHEMA_VERSION = 1
RECORDS_FILE = "train.jsonl"
SUMMARY_FILE = "summary.csv"
POLICY_FILE = "final_policy.npz"
SUMMARY_COLUMNS = (
    "label", "group_size", "lr", "iterations", "seed",
    "initial_J", "final_J", "max_J", "status",
)

# RNG stream ids, kept apart so adding a consumer never shifts another's draws.
STREAM_INIT, STREAM_SAMPLES, STREAM_VARIANCE = 0, 1, 2


@dataclass(frozen=True)
class RunRecord:
    iteration: int
    exact_J: float
    grad_norm: float | None
    estimator_variance: float | None
    wall_ms: int
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self)}, sort_keys=True)


def initial_policy(cfg: ExperimentConfig) -> TabularPolicy:
    spec = cfg.generation_spec()
    if cfg.init == "uniform":
        return TabularPolicy.uniform(spec)
    return TabularPolicy.random(spec, RngStream(cfg.seed, STREAM_INIT), cfg.init_scale)


def exact_J(policy: TabularPolicy, cfg: ExperimentConfig) -> float:
    r = cfg.reward_function()
    return float(np.mean([exact_objective(policy, p, r) for p in range(policy.spec.prompt_count)]))


def _gradient(cfg: ExperimentConfig, policy: TabularPolicy, ref: TabularPolicy, rng: RngStream) -> np.ndarray:
    r = cfg.reward_function()
    est = cfg.estimator_config()
    gro_cfg = reduction_config(cfg.gro_method, eps=cfg.clip_eps) if cfg.gro_method else None
    total = np.zeros(policy.n_params)
    for p in range(policy.spec.prompt_count):
        batch = draw_batch(policy, Prompt(p), r, rng.child(p), cfg.group_size)
        if gro_cfg is None:
            total += estimate_gradient(est, policy, policy, ref, batch)
        else:
            total += gro_gradient(gro_cfg, policy, policy, ref, batch)
    return total / policy.spec.prompt_count


def _variance(cfg: ExperimentConfig, policy: TabularPolicy, ref: TabularPolicy, rng: RngStream) -> float:
    """Trace of the per-batch gradient covariance, averaged over prompts."""
    r = cfg.reward_function()
    est = cfg.estimator_config()
    out = []
    for p in range(policy.spec.prompt_count):
        grads = np.vstack(list(trial_gradients(est, policy, r, cfg.variance_trials, rng.child(p), ref=ref, prompt=p)))
        out.append(grads.var(axis=0, ddof=1).sum())
    return float(np.mean(out))


def run_train(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[RunRecord]:
    """Run the loop and write ``train.jsonl``, ``summary.csv`` and ``final_policy.npz``.

    Record 0 is the initial policy. A non-finite gradient or parameter stops
    the run with a ``non_finite`` record; the last finite policy is persisted.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = initial_policy(cfg)
    ref = TabularPolicy.uniform(policy.spec, role="reference")
    samples = RngStream(cfg.seed, STREAM_SAMPLES)
    var_rng = RngStream(cfg.seed, STREAM_VARIANCE)
    start = time.perf_counter()

    def stamp() -> int:
        return int((time.perf_counter() - start) * 1000) if cfg.wall_time else 0

    records = [RunRecord(0, exact_J(policy, cfg), None, None, stamp())]
    for k in range(1, cfg.iterations + 1):
        g = _gradient(cfg, policy, ref, samples.child(k))
        theta = policy.theta + cfg.lr * g
        if not (np.isfinite(g).all() and np.isfinite(theta).all()):
            records.append(RunRecord(k, records[-1].exact_J, None, None, stamp(), "non_finite"))
            break
        variance = None
        if cfg.variance_every and k % cfg.variance_every == 0 and not cfg.gro_method:
            variance = _variance(cfg, policy, ref, var_rng.child(k))
        policy = policy.with_theta(theta)
        records.append(RunRecord(k, exact_J(policy, cfg), float(np.linalg.norm(g)), variance, stamp()))
    _write_outputs(cfg, out, records, policy)
    return records


def _write_outputs(cfg: ExperimentConfig, out: Path, records: list[RunRecord], policy: TabularPolicy) -> None:
    with open(out / RECORDS_FILE, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    r = cfg.reward_function()
    max_J = float(np.mean([reward_vector(r, policy.spec).max()] * policy.spec.prompt_count))
    row = {
        "label": cfg.label,
        "group_size": cfg.group_size,
        "lr": repr(cfg.lr),
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "initial_J": repr(records[0].exact_J),
        "final_J": repr(records[-1].exact_J),
        "max_J": repr(max_J),
        "status": records[-1].status,
    }
    with open(out / SUMMARY_FILE, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
    spec = policy.spec
    np.savez(
        out / POLICY_FILE,
        params=policy.params,
        vocab_size=spec.vocab_size,
        seq_len=spec.seq_len,
        prompt_count=spec.prompt_count,
    )


def load_policy(path: str | Path) -> TabularPolicy:
    with np.load(path) as data:
        spec = GenerationSpec(int(data["vocab_size"]), int(data["seq_len"]), int(data["prompt_count"]))
        return TabularPolicy(spec, data["params"])
