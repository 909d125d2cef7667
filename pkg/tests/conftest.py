"""Shared fixtures and independent pure-Python oracles."""

import math

import numpy as np
import pytest

from rlhfcheck.core import GenerationSpec, RngStream, TabularPolicy


def brute_conditional(policy, prompt, prefix, token):
    """``pi(token | prefix)`` from the raw logit table with the math module."""
    spec = policy.spec
    row = 0
    for depth, t in enumerate(prefix):
        row = row * spec.vocab_size + t
    row += (spec.vocab_size ** len(prefix) - 1) // (spec.vocab_size - 1)
    logits = [float(v) for v in policy.params[prompt, row]]
    top = max(logits)
    z = sum(math.exp(v - top) for v in logits)
    return math.exp(logits[token] - top) / z


def brute_prob(policy, prompt, y):
    p = 1.0
    for t in range(len(y)):
        p *= brute_conditional(policy, prompt, tuple(y[:t]), y[t])
    return p


@pytest.fixture
def spec33():
    return GenerationSpec(3, 3)


@pytest.fixture
def spec33x2():
    return GenerationSpec(3, 3, prompt_count=2)


@pytest.fixture
def rand_policy(spec33):
    return TabularPolicy.random(spec33, RngStream(0))


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# --- acceptance reporting -------------------------------------------------------
# Each acceptance test records one line; the lines are echoed in the terminal
# summary so they appear even when pytest captures output.

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
