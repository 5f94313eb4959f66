"""Experiment configuration: JSON schema, strict parsing, defaults, validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DomainSpec
from .model import ModelConfig
from .selection import PullPolicy

EXPERIMENTS = (
    "baseline_matrix",
    "central_combination",
    "central_chained",
    "fl",
    "fl_rounds_ablation",
    "dp_compare",
    "controllers_parity",
)


class ConfigError(Exception):
    """Invalid or unparseable experiment configuration."""


def default_domains() -> tuple[DomainSpec, ...]:
    """Two large, one medium, two small domains (max/min size ratio 100)."""
    return (
        DomainSpec(kind="copy", size=20000, seed=101),
        DomainSpec(kind="reverse", size=20000, seed=102),
        DomainSpec(kind="sort", size=2000, seed=103),
        DomainSpec(kind="shift3", size=600, seed=104),
        DomainSpec(kind="swap_pairs", size=200, seed=105),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    domains: tuple[DomainSpec, ...] = field(default_factory=default_domains)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain_steps: int = 2000
    steps_per_round: int = 200
    rounds: int = 5
    policy: PullPolicy = field(default_factory=PullPolicy)
    post_fl_finetune_steps: int = 0
    seeds: tuple[int, ...] = (1,)
    output_dir: str = "runs"
    batch_size: int = 16
    test_n: int = 64
    dev_n: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    baseline_steps: int = 2000
    ablation_rounds: tuple[int, ...] = (5, 10, 50)
    chain_order: tuple[str, ...] | None = None
    pretrain_domain: str | None = None
    eval_every: int = 1
    hist_bucket_width: float = 1.0

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment '{self.experiment}' (choices: {', '.join(EXPERIMENTS)})"
            )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if not self.domains:
            raise ConfigError("at least one domain is required")
        kinds = [d.kind for d in self.domains]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"duplicate domain kinds: {kinds}")
        for name in ("pretrain_steps", "steps_per_round", "post_fl_finetune_steps", "baseline_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.experiment in ("fl", "fl_rounds_ablation", "dp_compare", "controllers_parity"):
            if self.rounds < 1:
                raise ConfigError(f"experiment '{self.experiment}' requires rounds >= 1")
        if self.experiment == "fl_rounds_ablation":
            if not self.ablation_rounds:
                raise ConfigError("ablation_rounds must be non-empty")
            budget = self.rounds * self.steps_per_round
            for r in self.ablation_rounds:
                if r < 1 or r > budget:
                    raise ConfigError(
                        f"ablation rounds value {r} incompatible with total budget {budget}"
                    )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.test_n < 1 or self.dev_n < 1:
            raise ConfigError("test_n and dev_n must be >= 1")
        for d in self.domains:
            if self.test_n + self.dev_n >= d.size:
                raise ConfigError(
                    f"domain '{d.kind}' of size {d.size} cannot hold test_n={self.test_n} "
                    f"+ dev_n={self.dev_n} splits"
                )
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.chain_order is not None:
            if sorted(self.chain_order) != sorted(kinds):
                raise ConfigError(
                    f"chain_order {list(self.chain_order)} must be a permutation of domains {kinds}"
                )
        if self.pretrain_domain is not None and self.pretrain_domain not in kinds:
            raise ConfigError(f"pretrain_domain '{self.pretrain_domain}' not among domains {kinds}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not self.hist_bucket_width > 0:
            raise ConfigError("hist_bucket_width must be positive")

    def echo(self) -> dict:
        """JSON-ready snapshot of every field, for embedding in reports."""
        out = dataclasses.asdict(self)
        out["domains"] = [dataclasses.asdict(d) for d in self.domains]
        out["model"] = dataclasses.asdict(self.model)
        out["policy"] = dataclasses.asdict(self.policy)
        out["seeds"] = list(self.seeds)
        out["ablation_rounds"] = list(self.ablation_rounds)
        out["chain_order"] = list(self.chain_order) if self.chain_order else None
        return out


def _build(cls, payload: dict, context: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context}: expected an object, got {type(payload).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")
    try:
        return cls(**payload)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("top level: expected an object")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(payload) - top_fields)
    if unknown:
        raise ConfigError(f"top level: unknown keys {unknown}")
    kwargs = dict(payload)
    if "domains" in kwargs:
        kwargs["domains"] = tuple(
            _build(DomainSpec, d, f"domains[{i}]") for i, d in enumerate(kwargs["domains"])
        )
    if "model" in kwargs:
        kwargs["model"] = _build(ModelConfig, kwargs["model"], "model")
    if "policy" in kwargs:
        kwargs["policy"] = _build(PullPolicy, kwargs["policy"], "policy")
    for key in ("seeds", "ablation_rounds", "chain_order"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    try:
        return ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(payload)
