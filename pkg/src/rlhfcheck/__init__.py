"""Exact-enumeration verification of RLHF gradient estimators and objectives."""

from rlhfcheck.core import (
    GenerationSpec,
    Prompt,
    RngStream,
    TabularPolicy,
    enumerate_completions,
    finite_diff_grad,
    grad_logprob,
    greedy_decode,
    logprob,
    sample,
)

__version__ = "0.1.0"

__all__ = [
    "GenerationSpec",
    "Prompt",
    "RngStream",
    "TabularPolicy",
    "enumerate_completions",
    "finite_diff_grad",
    "grad_logprob",
    "greedy_decode",
    "logprob",
    "sample",
]
