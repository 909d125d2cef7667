"""``rlhfcheck`` command line.

    rlhfcheck [--seed N] [--config FILE] [--out DIR] train
    rlhfcheck [--seed N] [--out DIR] verify
    rlhfcheck [--seed N] [--out DIR] variance [--trials N] [--estimators a,b] [--group-sizes 2,4]
    rlhfcheck [--seed N] [--out DIR] reductions
    rlhfcheck [--seed N] [--out DIR] mdp-check [--pairs N] [--cpi-iters N]

``--seed`` overrides ``train.seed``; ``--out`` overrides ``output.dir``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from rlhfcheck.errors import RlhfCheckError
from rlhfcheck.harness.config import ExperimentConfig
from rlhfcheck.harness.studies import GROUP_SIZES, DEFAULT_ESTIMATORS, run_mdp_check, run_reductions, run_variance
from rlhfcheck.harness.train import SUMMARY_FILE, run_train
from rlhfcheck.harness.verify import run_verify

VERIFY_FILE = "verify.txt"
VARIANCE_FILE = "variance.csv"
REDUCTIONS_FILE = "reductions.csv"
MDP_FILE = "mdp_check.csv"


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlhfcheck", description="Exact-oracle checks for RLHF gradient estimators.")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0, or train.seed)")
    parser.add_argument("--config", type=Path, default=None, help="flat 'section.key = value' experiment file")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="run the sample/estimate/update loop")
    sub.add_parser("verify", help="run every oracle and identity check; exit 0 iff all pass")
    var = sub.add_parser("variance", help="estimator variance table over group sizes")
    var.add_argument("--trials", type=int, default=20_000)
    var.add_argument("--estimators", type=lambda s: s.split(","), default=list(DEFAULT_ESTIMATORS))
    var.add_argument("--group-sizes", type=_int_list, default=list(GROUP_SIZES))
    sub.add_parser("reductions", help="GRO reduction matrix")
    mdp_p = sub.add_parser("mdp-check", help="tabular MDP audit")
    mdp_p.add_argument("--mdps", type=int, default=10)
    mdp_p.add_argument("--pairs", type=int, default=1000, help="policy pairs per MDP")
    mdp_p.add_argument("--cpi-iters", type=int, default=50)
    return parser


def _out_dir(args, default: str) -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(str(r[c]) for c in cols))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    seed = 0 if args.seed is None else args.seed
    try:
        if args.command == "train":
            cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
            if args.seed is not None:
                cfg = cfg.replace(seed=args.seed)
            out = _out_dir(args, cfg.out_dir)
            records = run_train(cfg, out)
            last = records[-1]
            print(f"{cfg.label}: iterations={last.iteration} exact_J={last.exact_J:.6f} status={last.status}")
            print(f"wrote {out / SUMMARY_FILE}")
            return 0 if last.status == "ok" else 1
        if args.command == "verify":
            report = run_verify(seed)
            text = report.text()
            sys.stdout.write(text)
            if args.out is not None:
                (_out_dir(args, ".") / VERIFY_FILE).write_text(text)
            return 0 if report.passed else 1
        if args.command == "variance":
            out = _out_dir(args, "runs")
            _print_rows(run_variance(args.estimators, args.group_sizes, args.trials, seed, out=out / VARIANCE_FILE))
            return 0
        if args.command == "reductions":
            out = _out_dir(args, "runs")
            _print_rows(run_reductions(seed, out=out / REDUCTIONS_FILE))
            return 0
        out = _out_dir(args, "runs")
        audit = run_mdp_check(seed, args.mdps, args.pairs, args.cpi_iters, out=out / MDP_FILE)
        _print_rows(audit.rows)
        return 0 if audit.passed else 1
    except (RlhfCheckError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
