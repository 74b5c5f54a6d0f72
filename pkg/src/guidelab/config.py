"""Experiment configuration: YAML/JSON file -> validated :class:`ExperimentConfig`."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema
import yaml

from .guidance import GuidanceConfig
from .nets import NetworkSpec


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment_id: str
    task: str
    target_spec: NetworkSpec
    lr: float
    data: dict = field(default_factory=dict)
    guide_spec: NetworkSpec | None = None
    guide_checkpoint: str | None = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    optimizer: str = "adam"
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 30
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    grad_clip: float | None = None
    task_loss: str = "cross_entropy"
    out_dir: str = "runs"
    log_wall_time: bool = False
    checkpoint: bool = True
    sweep_fraction: float = 0.25

    def __post_init__(self):
        if isinstance(self.target_spec, dict):
            self.target_spec = NetworkSpec.from_dict(self.target_spec)
        if isinstance(self.guide_spec, dict):
            self.guide_spec = NetworkSpec.from_dict(self.guide_spec)
        if isinstance(self.guidance, dict):
            self.guidance = GuidanceConfig(**self.guidance)
        self.validate()

    def validate(self) -> None:
        mode = self.guidance.guide_mode
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if mode == "none":
            if self.guide_spec is not None or self.guide_checkpoint:
                raise ConfigError("guide_spec/guide_checkpoint given but guide_mode is none")
        elif mode == "trained":
            if not self.guide_checkpoint:
                raise ConfigError("guide_mode=trained needs guide_checkpoint")
        elif mode == "untrained":
            if self.guide_spec is None:
                raise ConfigError("guide_mode=untrained needs guide_spec")
        elif mode == "noise":
            if self.guide_spec is None and not self.guide_checkpoint:
                raise ConfigError("guide_mode=noise needs guide_spec or guide_checkpoint")
        if self.task_loss == "mse" and self.task not in ("image", "parity"):
            raise ConfigError("mse task loss is only defined for classification tasks")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = asdict(self.guidance)
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return from_dict(d)


def schema() -> dict:
    return json.loads(resources.files("guidelab").joinpath("config_schema.json").read_text())


def from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d)
    try:
        jsonschema.validate(d, schema())
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}") from e
    try:
        return ExperimentConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        d = yaml.safe_load(fh) or {}
    if overrides:
        d = merge(d, overrides)
    return from_dict(d)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
