"""Run configuration: nested dataclasses, strict YAML loading (unknown
keys are errors), and validation before any compute."""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


@dataclass
class OptimConfig:
    algo: str = "sgd"           # "sgd" or "adam"
    lr: float = 0.001
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # "constant" or "cosine"
    final_frac: float = 0.05    # cosine floor as a fraction of lr

    def validate(self):
        if self.algo not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer '{self.algo}'")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr and clip_norm must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule '{self.schedule}'")
        if not 0.0 < self.final_frac <= 1.0:
            raise ConfigError("final_frac must be in (0, 1]")


@dataclass
class EpisodeSpec:
    n_way: int = 3
    k_shot: int = 5
    n_query: int = 2

    def validate(self):
        if min(self.n_way, self.k_shot, self.n_query) <= 0:
            raise ConfigError("episode spec fields must be positive")


@dataclass
class PathsConfig:
    base_annotations: str = ""
    novel_annotations: str = ""
    base_registry: str = ""
    novel_registry: str = ""
    vocab: str = ""
    language_table: str = ""
    out_dir: str = "runs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    meta_steps: int = 300
    fine_tune_steps: int = 100
    lambda_rectify: float = 1.0
    interleave_base: bool = True
    seed: int = 0
    conf_threshold: float = 0.3
    beta: float = 5.0
    gamma: float = 2.0
    bg_weight: float = 0.1
    align_weight: float = 0.5
    iou_thresholds: list = field(default_factory=lambda: [0.5])
    eval_episodes: int = 4
    ema_decay: float = 0.99

    def validate(self):
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.optimizer.validate()
        self.episode.validate()
        if self.meta_steps < 0 or self.fine_tune_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.lambda_rectify < 0:
            raise ConfigError("lambda_rectify must be >= 0")
        if self.align_weight < 0:
            raise ConfigError("align_weight must be >= 0")
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ConfigError("conf_threshold must be in [0, 1]")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.episode.n_way != self.model.n_way:
            raise ConfigError("episode.n_way must equal model.n_way")
        return self


_NESTED = {"model": ModelConfig, "optimizer": OptimConfig,
           "episode": EpisodeSpec, "paths": PathsConfig}


def _fill(cls, data, context):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            kwargs[key] = _fill(_NESTED[key], value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs).validate()


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot load config ({exc})") from exc
    return config_from_dict(data or {})


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)
