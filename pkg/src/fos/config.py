"""Flat run configuration: YAML file, overridable key by key from the command line."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .core import config_hash
from .dataset import ExclusionRules, JitterConfig, SyntheticConfig
from .fg_encoder import FgTrainConfig
from .query_encoder import MODES, QueryTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    workdir: str = "fos-run"
    seed: int | None = None
    # dataset
    source: str = "synthetic"
    patterns: int = 8
    per_pattern: int = 30
    n_queries: int | None = None
    width: int = 64
    height: int = 48
    n_shapes: int = 4
    test_fraction: float = 0.2
    min_area_fraction: float = 0.005
    min_side: int = 32
    # foreground encoder
    backbone: str = "conv-small"
    backbone_weights: str | None = None
    embed_dim: int = 32
    fg_image_size: int = 32
    fg_epochs: int = 8
    fg_lr: float = 0.02
    center_lr: float = 0.5
    center_weight: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    fg_batch: int = 32
    aug_multiplicity: int = 20
    max_padding: float = 0.2
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    jitter_saturation: float = 0.4
    jitter_hue: float = 0.2
    auto_label_confidence: float | None = None
    # query encoder
    ablation: str = "full"
    margin: float = 0.1
    q_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    eps: float = 1e-9
    q_batch: int = 16
    n_triplets: int = 6000
    q_epochs: int = 4
    patience: int = 1
    bg_dim: int = 32
    hidden_dim: int = 64
    bg_size: int = 32
    max_zoom: float = 2.0
    rect_growth: float = 0.5
    fg_views: int = 4
    bg_pretrain_epochs: int = 6
    bg_pretrain_lr: float = 1e-3
    # evaluation
    min_pattern_size: int = 20
    eval_per_pattern: int = 5
    eval_queries: int | None = None

    def validate(self) -> "RunConfig":
        if self.ablation not in MODES:
            raise ConfigError(f"ablation must be one of {MODES}, got {self.ablation!r}")
        self.fg_config().validate()
        self.query_config().validate()
        return self

    @property
    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(os.environ.get("FOS_SEED", 0))

    def jitter(self) -> JitterConfig:
        return JitterConfig(self.jitter_brightness, self.jitter_contrast, self.jitter_saturation, self.jitter_hue)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(self.patterns, self.per_pattern, self.n_queries, self.width, self.height,
                               self.n_shapes, self.test_fraction)

    def exclusion_rules(self) -> ExclusionRules:
        return ExclusionRules(self.min_area_fraction, self.min_side)

    def fg_config(self) -> FgTrainConfig:
        return FgTrainConfig(
            center_weight=self.center_weight, lr=self.fg_lr, center_lr=self.center_lr, momentum=self.momentum,
            weight_decay=self.weight_decay, lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every,
            batch_size=self.fg_batch, epochs=self.fg_epochs, embed_dim=self.embed_dim,
            image_size=self.fg_image_size, aug_multiplicity=self.aug_multiplicity, max_padding=self.max_padding,
            jitter=self.jitter(), backbone=self.backbone, backbone_weights=self.backbone_weights,
        )

    def query_config(self, mode: str | None = None) -> QueryTrainConfig:
        return QueryTrainConfig(
            margin=self.margin, lr=self.q_lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            batch_size=self.q_batch, mode=mode or self.ablation, n_triplets=self.n_triplets,
            epochs=self.q_epochs, patience=self.patience, bg_dim=self.bg_dim, hidden_dim=self.hidden_dim,
            bg_size=self.bg_size, max_zoom=self.max_zoom, rect_growth=self.rect_growth, jitter=self.jitter(),
            fg_views=self.fg_views, bg_pretrain_epochs=self.bg_pretrain_epochs, bg_pretrain_lr=self.bg_pretrain_lr,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seed"] = self.resolved_seed
        return d

    def digest(self) -> str:
        """Hash of everything that determines outputs (the output location excluded)."""
        d = self.to_dict()
        d.pop("workdir")
        return config_hash(d)

    # -- workdir layout
    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def teacher_path(self) -> Path:
        return self.root / "teacher.ckpt"

    def student_path(self, mode: str | None = None) -> Path:
        return self.root / f"student-{mode or self.ablation}.ckpt"

    @property
    def store_path(self) -> Path:
        return self.root / "index" / "store.json"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(name: str, value: Any) -> Any:
    """Convert a raw (string or YAML) value to the declared type of ``name``."""
    kind = FIELD_TYPES[name].replace(" ", "")
    optional = kind.endswith("|None")
    base = kind.split("|")[0]
    if value is None or (optional and isinstance(value, str) and value.lower() in ("none", "null", "")):
        if not optional:
            raise ConfigError(f"{name} may not be null")
        return None
    try:
        if base == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if base == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {base}") from None


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a flat mapping")
        values.update(doc)
    values.update({k: v for k, v in (overrides or {}).items()})
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: coerce(k, v) for k, v in values.items()})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
