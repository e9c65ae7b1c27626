"""Experiment configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected at every level so a typo never silently falls back
to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    reviews: str = ""
    rating_min: int = 1
    rating_max: int = 5
    min_user: int = 20
    min_item: int = 20
    ratios: tuple = (0.8, 0.1, 0.1)
    min_freq: int = 2
    max_sentence_len: int = 25
    lexicon: Optional[str] = None


@dataclass
class ModelConfig:
    emb_dim: int = 300
    hidden: int = 300
    att_dim: int = 300
    rating_dim: int = 16
    transform_dim: int = 300
    dec_emb_dim: int = 300
    dec_hidden: int = 300
    kappa: float = 3.0
    max_len: int = 25
    refine_steps: int = 1
    embedding_file: Optional[str] = None
    init_scale: float = 0.1


@dataclass
class TrainConfig:
    seed: int = 0
    max_profile: int = 10
    batch_size: int = 16
    grad_clip: float = 5.0
    ext_lr: float = 1e-3
    ext_epochs: int = 20
    ext_patience: int = 3
    ref_lr: float = 1e-3
    ref_epochs: int = 20
    ref_patience: int = 3
    ft_lr: float = 1e-4
    ft_epochs: int = 2
    ft_eval_size: int = 64
    mc_samples: int = 4
    lambda_1: float = 1.0
    lambda_2: float = 0.5
    lambda_3: float = 1.0
    lambda_4: float = 0.5
    reward_weights: tuple = (0.8, 0.2, 0.0, 0.0)
    detach_refinement: bool = True

    def __post_init__(self):
        if self.mc_samples < 2:
            raise ConfigError("mc_samples must be >= 2 for a mean baseline")
        if min(self.lambda_1, self.lambda_2, self.lambda_3, self.lambda_4) < 0:
            raise ConfigError("lambda coefficients must be non-negative")
        self.reward_weights = tuple(float(w) for w in self.reward_weights)


@dataclass
class EvalConfig:
    ref_length_mode: str = "instance"  # or "corpus"
    sigmas: tuple = (0.0, 1.0, 2.0)
    perturb_seeds: int = 5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"
    seed: int = 0


def _build(cls, raw: dict, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "eval"): EvalConfig,
}


def config_from_dict(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "config")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def resolve(p):
        if p is None or p == "":
            return p
        q = Path(p)
        return str(q if q.is_absolute() else base / q)

    cfg.data.reviews = resolve(cfg.data.reviews)
    cfg.data.lexicon = resolve(cfg.data.lexicon)
    cfg.model.embedding_file = resolve(cfg.model.embedding_file)
    for label, p in (("data.reviews", cfg.data.reviews), ("data.lexicon", cfg.data.lexicon),
                     ("model.embedding_file", cfg.model.embedding_file)):
        if p and not Path(p).exists():
            raise ConfigError(f"{label}: file not found: {p}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return config_from_dict(raw, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(cfg)
