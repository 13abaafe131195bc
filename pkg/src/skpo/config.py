"""Flat ``key = value`` run configuration.

Every field has a default; unknown keys are rejected. Lists are written
comma-separated. ``RunConfig.from_text(cfg.to_text()) == cfg`` for any valid
config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .env import make_dataset, load_dataset
from .mc_lab import DEFAULT_K_VALUES, SignExperimentConfig
from .optimize import MODES, StepConfig

COMMANDS = ("sign-accuracy", "k-sweep", "train", "shortcut", "profile", "cost-audit")


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass
class RunConfig:
    # run
    command: str = "train"
    seed: int = 0
    out: str = "results"
    workers: int = 1
    mode: str = "skpo"
    # dataset
    n_problems: int = 20
    target_min: int = 4
    target_max: int = 16
    max_len_min: int = 6
    max_len_max: int = 12
    dataset_seed: int = 1
    dataset: str = ""  # JSONL path; overrides the generated set when non-empty
    init: str = "heuristic"
    fidelity: float = 0.8
    # training (StepConfig)
    steps: int = 200
    token_budget: int = 0  # 0 = no budget
    eval_every: int = 10
    G: int = 8
    prompts_per_step: int = 16
    n_minibatches: int = 4
    clip_eps: float = 0.2
    clip_high: float = 1.28
    w_up: float = 0.5
    w_down: float = 0.5
    kl_beta: float = 0.0
    entropy_coef: float = 0.0
    learning_rate: float = 0.05
    spo_batch_scale: int = 8
    eval_rollouts: int = 32
    priority_eps: float = 0.05
    tau_half: float = 8.0
    rho_min: float = 0.875
    rho_max: float = 0.96
    two_batch: bool = False
    # sign accuracy grid (SignExperimentConfig)
    N_values: list = field(default_factory=lambda: [8, 32, 128, 512, 2048])
    spreads: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3, 0.45])
    center: float = 0.5
    trials: int = 10_000
    tol_zero: float = 0.05
    # k-sweep / profiles
    K_values: list = field(default_factory=lambda: list(DEFAULT_K_VALUES))
    bins: int = 100
    n_splits: int = 6
    methods: list = field(default_factory=lambda: ["grpo", "skpo", "spo"])
    profile_responses: int = 8
    audit_seeds: int = 4

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------------

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in ("heuristic", "uniform"):
            raise ConfigError("init must be 'heuristic' or 'uniform'")
        for name in ("workers", "n_problems", "steps", "bins", "trials", "n_splits", "profile_responses", "audit_seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("seed", "dataset_seed", "token_budget", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not (1 <= self.target_min <= self.target_max and 2 <= self.max_len_min <= self.max_len_max):
            raise ConfigError("dataset ranges must be ordered and positive")
        if not self.K_values or any(k < 1 for k in self.K_values):
            raise ConfigError("K_values must be a nonempty list of positive integers")
        if not self.N_values or any(n < 1 for n in self.N_values):
            raise ConfigError("N_values must be a nonempty list of positive integers")
        if not self.spreads or any(s < 0 for s in self.spreads):
            raise ConfigError("spreads must be a nonempty list of nonnegative numbers")
        bad = [m for m in self.methods if m not in MODES]
        if bad or len(self.methods) < 2 and self.command == "profile":
            raise ConfigError(f"methods must be at least two of {MODES}")
        try:
            self.step_config()
            for n in self.N_values:
                for s in self.spreads:
                    self.sign_config(n, s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- derived configs ----------------------------------------------------------

    def step_config(self) -> StepConfig:
        names = {f.name for f in fields(StepConfig)}
        return StepConfig(**{n: getattr(self, n) for n in names})

    def sign_config(self, N: int, spread: float) -> SignExperimentConfig:
        return SignExperimentConfig(
            G=self.G, N=N, trials=self.trials, spread=spread, center=self.center, tol_zero=self.tol_zero
        )

    def problems(self):
        if self.dataset:
            return load_dataset(self.dataset)
        return make_dataset(
            self.n_problems,
            (self.target_min, self.target_max),
            (self.max_len_min, self.max_len_max),
            seed=self.dataset_seed,
        )

    # -- text round trip ----------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update(overrides or {})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else known[key].default
            kwargs[key] = _parse(key, value, default)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), overrides)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            v = value.lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            items = [s.strip() for s in value.split(",") if s.strip()]
            elem = type(default[0]) if default else str
            return [elem(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value
