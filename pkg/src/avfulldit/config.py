"""Experiment configuration read from and written to flat ``section.key = value`` text."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from . import canonical
from .canonical import ConfigError
from .joint import ConfigurationError
from .model import KINDS, ArchitectureConfig


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 512
    n_eval: int = 96
    seed: int = 0
    mix_bouncing_ball: float = 1.0
    mix_silent_drift: float = 1.0
    mix_ambient_only: float = 1.0
    corrupt_fraction: float = 0.25

    def mix(self) -> dict[str, float]:
        return {
            "bouncing_ball": self.mix_bouncing_ball,
            "silent_drift": self.mix_silent_drift,
            "ambient_only": self.mix_ambient_only,
        }


@dataclass(frozen=True)
class TrainConfig:
    model: str = "joint"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.001
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    val_every: int = 250


@dataclass(frozen=True)
class InferConfig:
    steps: int = 50
    scale_video: float = 5.0
    scale_audio: float = 4.5
    seed: int = 0


@dataclass(frozen=True)
class CompareConfig:
    n_seeds: int = 5
    confidence: float = 0.95


@dataclass(frozen=True)
class AblateConfig:
    attention: str = "avfull"
    rope: str = "vanilla,shrink_audio,expand_video"
    lambda_a: str = "1.0"
    scale_audio: str = "4.5"


SECTIONS = {
    "arch": ArchitectureConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "compare": CompareConfig,
    "ablate": AblateConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    out: str = "runs/default"

    def __post_init__(self):
        t = self.train
        if t.model not in KINDS:
            raise ConfigError(f"train.model must be one of {KINDS}, got {t.model!r}")
        if t.steps < 0 or t.batch_size < 1 or t.lr <= 0:
            raise ConfigError("train.steps >= 0, train.batch_size >= 1 and train.lr > 0 are required")
        if t.checkpoint_every < 1 or t.val_every < 1:
            raise ConfigError("train.checkpoint_every and train.val_every must be positive")
        if t.lambda_v < 0 or t.lambda_a < 0 or (t.lambda_v == 0 and t.lambda_a == 0):
            raise ConfigError("loss weights must be non-negative and not both zero")
        d = self.data
        if d.n_train < 1 or d.n_eval < 0:
            raise ConfigError("data.n_train must be positive and data.n_eval non-negative")
        if not 0.0 <= d.corrupt_fraction <= 1.0:
            raise ConfigError("data.corrupt_fraction must lie in [0, 1]")
        if self.infer.steps < 1 or self.infer.scale_video < 0 or self.infer.scale_audio < 0:
            raise ConfigError("infer.steps must be positive and guidance scales non-negative")
        if self.compare.n_seeds < 2 or not 0 < self.compare.confidence < 1:
            raise ConfigError("compare.n_seeds must be >= 2 and compare.confidence in (0, 1)")

    def items(self) -> dict[str, object]:
        out: dict[str, object] = {"out": self.out}
        for name in SECTIONS:
            out.update(canonical.dataclass_items(getattr(self, name), f"{name}."))
        return out

    def emit(self) -> str:
        return canonical.emit(self.items())

    def digest(self) -> str:
        """Hash of every setting except ``out``, so relocated reruns report the same digest."""
        return hashlib.sha256(self.override(out="").emit().encode()).hexdigest()[:16]

    def override(self, **dotted) -> "ExperimentConfig":
        """``override(**{"train.seed": 3})`` with values given as Python objects."""
        items = {k: canonical.format_value(v) for k, v in self.items().items()}
        for key, value in dotted.items():
            if key not in items:
                raise ConfigError(f"unknown key {key!r}")
            items[key] = canonical.format_value(value)
        return from_items(items)


def from_items(items: dict[str, str]) -> ExperimentConfig:
    known = set(SECTIONS) | {"out"}
    for key in items:
        head = key.split(".", 1)[0]
        if head not in known or (head != "out" and "." not in key):
            raise ConfigError(f"unknown key {key!r}")
    kwargs = {}
    try:
        for name, cls in SECTIONS.items():
            kwargs[name] = canonical.dataclass_from_items(cls, items, f"{name}.")
    except (ConfigurationError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if "out" in items:
        kwargs["out"] = items["out"]
    return ExperimentConfig(**kwargs)


def parse(text: str) -> ExperimentConfig:
    return from_items(canonical.parse(text))


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.emit())


def smoke(**dotted) -> ExperimentConfig:
    """A small configuration that trains in well under a minute."""
    base = ExperimentConfig(
        data=DataConfig(n_train=128, n_eval=12),
        train=TrainConfig(steps=400, checkpoint_every=200, val_every=100),
        infer=InferConfig(steps=10),
        out="runs/smoke",
    )
    return base.override(**dotted) if dotted else base

