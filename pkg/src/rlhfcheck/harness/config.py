"""Flat ``section.key = value`` experiment configuration.

One file per experiment; ``#`` starts a comment; blank lines are ignored.
Recognised keys and defaults:

    spec.vocab_size = 3           spec.seq_len = 4           spec.prompt_count = 1
    task.reward = token_count     task.target = 2            task.scale = 1.0
    estimator.kind = rloo         estimator.group_size = 8   estimator.clip_eps = 0.2
    estimator.gamma = 1.0         estimator.kl_beta = 0.0    estimator.baseline = 0.0
    estimator.sigma_floor = 1e-8
    gro.method =                  (empty: native estimator; else a GRO reduction row)
    train.lr = 0.5                train.iterations = 2000    train.seed = 0
    train.init = uniform          train.init_scale = 1.0     train.variance_every = 0
    train.variance_trials = 1000
    output.dir = runs             output.wall_time = false

``task.reward`` is ``token_count`` (``target`` is one token id), ``pattern_match``
(``target`` is comma-separated ids) or ``constant`` (``target`` is the value).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from rlhfcheck.core import GenerationSpec
from rlhfcheck.errors import ConfigError
from rlhfcheck.estimators import EstimatorConfig, EstimatorKind
from rlhfcheck.gro import REDUCTION_METHODS
from rlhfcheck.rewards import RewardFunction

REWARD_KINDS = ("token_count", "pattern_match", "constant")
GRO_TRAINABLE = ("rloo", "remax", "grpo", "reinforce_pp")
INIT_KINDS = ("uniform", "random")


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _bool(value: str) -> bool:
    low = value.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    vocab_size: int = 3
    seq_len: int = 4
    prompt_count: int = 1
    reward: str = "token_count"
    target: str = "2"
    reward_scale: float = 1.0
    estimator: str = "rloo"
    group_size: int = 8
    clip_eps: float = 0.2
    gamma: float = 1.0
    kl_beta: float = 0.0
    baseline: float = 0.0
    sigma_floor: float = 1e-8
    gro_method: str = ""
    lr: float = 0.5
    iterations: int = 2000
    seed: int = 0
    init: str = "uniform"
    init_scale: float = 1.0
    variance_every: int = 0
    variance_trials: int = 1000
    out_dir: str = "runs"
    wall_time: bool = False

    # key in the file -> (field name, parser)
    KEYS = {
        "spec.vocab_size": ("vocab_size", int),
        "spec.seq_len": ("seq_len", int),
        "spec.prompt_count": ("prompt_count", int),
        "task.reward": ("reward", str),
        "task.target": ("target", str),
        "task.scale": ("reward_scale", float),
        "estimator.kind": ("estimator", str),
        "estimator.group_size": ("group_size", int),
        "estimator.clip_eps": ("clip_eps", float),
        "estimator.gamma": ("gamma", float),
        "estimator.kl_beta": ("kl_beta", float),
        "estimator.baseline": ("baseline", float),
        "estimator.sigma_floor": ("sigma_floor", float),
        "gro.method": ("gro_method", str),
        "train.lr": ("lr", float),
        "train.iterations": ("iterations", int),
        "train.seed": ("seed", int),
        "train.init": ("init", str),
        "train.init_scale": ("init_scale", float),
        "train.variance_every": ("variance_every", int),
        "train.variance_trials": ("variance_trials", int),
        "output.dir": ("out_dir", str),
        "output.wall_time": ("wall_time", _bool),
    }

    def __post_init__(self):
        # Learning rate 0 and zero iterations are accepted for the degenerate runs
        # used as sanity checks.
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        if self.reward not in REWARD_KINDS:
            raise ConfigError(f"task.reward must be one of {REWARD_KINDS}")
        if self.init not in INIT_KINDS:
            raise ConfigError(f"train.init must be one of {INIT_KINDS}")
        if self.variance_every < 0:
            raise ConfigError("train.variance_every must be >= 0")
        if self.gro_method and self.gro_method not in GRO_TRAINABLE:
            hint = "" if self.gro_method not in REDUCTION_METHODS else " (needs preference data, not trainable here)"
            raise ConfigError(f"gro.method must be one of {GRO_TRAINABLE}{hint}")
        try:
            EstimatorKind(self.estimator)
        except ValueError:
            raise ConfigError(f"unknown estimator.kind {self.estimator!r}") from None
        # Resolve everything eagerly so a bad file fails before the run starts.
        self.generation_spec()
        self.reward_function()
        self.estimator_config()

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        kwargs = {}
        for key, raw in values.items():
            if key not in cls.KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            name, parse = cls.KEYS[key]
            try:
                kwargs[name] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_mapping(parse_flat(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for key, (name, _) in self.KEYS.items():
            value = getattr(self, name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def generation_spec(self) -> GenerationSpec:
        try:
            return GenerationSpec(self.vocab_size, self.seq_len, self.prompt_count)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def reward_function(self) -> RewardFunction:
        try:
            if self.reward == "token_count":
                token = int(self.target)
                if not 0 <= token < self.vocab_size:
                    raise ValueError(f"token {token} outside the vocabulary")
                return RewardFunction.token_count(token, self.reward_scale)
            if self.reward == "pattern_match":
                return RewardFunction.pattern_match([int(t) for t in self.target.split(",")], self.reward_scale)
            return RewardFunction.constant(self.generation_spec(), float(self.target))
        except ValueError as exc:
            raise ConfigError(f"task.target: {exc}") from None

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            self.estimator,
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            gamma=self.gamma,
            kl_beta=self.kl_beta,
            sigma_floor=self.sigma_floor,
            baseline=self.baseline,
        )

    @property
    def label(self) -> str:
        return f"gro:{self.gro_method}" if self.gro_method else self.estimator
