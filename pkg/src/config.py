"""Configuration management for caftdesk."""

import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Literal, Optional, Tuple

import xxhash
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)

VARIANTS = ("caft", "flat-loss", "no-part", "plain-vit", "flat-text")
PRESETS = ("desk", "paper", "paper-merged")

# Named random sub-streams derived from the single run seed
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_ORDER = 3
STREAM_SPLIT = 4


class ConfigError(ValueError):
    """Raised when a run configuration cannot be resolved."""

    pass


class Config:
    """Runtime settings loaded from environment variables."""

    def __init__(self):
        # Worker threads for image preparation and evaluation
        self.max_parallel_jobs: int = int(os.getenv("MAX_PARALLEL_JOBS", "4"))
        if self.max_parallel_jobs < 1:
            raise ValueError(
                f"MAX_PARALLEL_JOBS must be >= 1: {self.max_parallel_jobs}"
            )

        self.log_level: str = os.getenv("LOG_LEVEL", "INFO").upper()
        if self.log_level not in ["DEBUG", "INFO", "WARN", "ERROR"]:
            self.log_level = "INFO"


class ModelConfig(BaseModel):
    """Shape-determining model settings; hashed into checkpoints."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_size: int = Field(128, ge=5)
    embed_dim: int = Field(64, ge=4)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    sub_layers: int = Field(4, ge=1)
    whole_layers: int = Field(2, ge=1)
    context_length: int = Field(32, ge=3)
    num_chunks: int = Field(4, ge=1)
    sub_captions: int = Field(8, ge=1)
    adapter_gate: float = 0.2
    canvas: int = Field(32, ge=8)
    vision_width: int = Field(64, ge=4)
    superpixels: int = Field(64, ge=2)
    stage_sizes: Tuple[int, int, int] = (16, 8, 4)
    blocks_per_stage: int = Field(2, ge=1)
    superpixel_iterations: int = Field(10, ge=0)
    position_weight: float = Field(0.5, ge=0.0)
    grouping_temperature: float = Field(0.07, gt=0.0)
    pool_heads: int = Field(4, ge=1)
    init_temperature: float = Field(0.07, gt=0.0)
    init_bias: float = -10.0

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.embed_dim % self.heads or self.vision_width % self.heads:
            raise ValueError("heads must divide embed_dim and vision_width")
        if self.embed_dim % self.pool_heads:
            raise ValueError("pool_heads must divide embed_dim")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the adapter")
        if self.sub_captions < self.num_chunks:
            raise ValueError("sub_captions (K) must be >= num_chunks (N)")
        sizes = (self.superpixels, *self.stage_sizes)
        if any(b >= a for a, b in zip(sizes, sizes[1:])) or self.stage_sizes[-1] < 1:
            raise ValueError(f"stage sizes must strictly decrease: {sizes}")
        if self.superpixels > self.canvas * self.canvas // 4:
            raise ValueError("superpixels must be <= canvas^2 / 4")
        return self


class TrainConfig(BaseModel):
    """Optimization and data settings for one run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(16, ge=1)
    epochs: int = Field(30, ge=1)
    base_lr: float = Field(3e-3, gt=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.98, gt=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    warmup_steps: int = Field(100, ge=1)
    grad_clip: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)
    preset: Literal["desk", "paper", "paper-merged"] = "desk"
    variant: Literal["caft", "flat-loss", "no-part", "plain-vit", "flat-text"] = "caft"
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    log_every: int = Field(10, ge=1)


_PAPER_MODEL = dict(
    embed_dim=512,
    heads=8,
    sub_layers=8,
    whole_layers=4,
    context_length=77,
    num_chunks=4,
    sub_captions=8,
    canvas=224,
    vision_width=512,
    superpixels=196,
    stage_sizes=(64, 32, 16),
    blocks_per_stage=4,
    pool_heads=8,
)
_PAPER_TRAIN = dict(
    batch_size=2048,
    epochs=32,
    base_lr=5e-4,
    weight_decay=0.5,
    beta1=0.9,
    beta2=0.98,
    adam_eps=1e-8,
    warmup_steps=2000,
)

PRESET_DEFAULTS: Dict[str, Tuple[dict, dict]] = {
    "desk": ({}, {}),
    "paper": (_PAPER_MODEL, _PAPER_TRAIN),
    "paper-merged": (
        _PAPER_MODEL,
        {**_PAPER_TRAIN, "weight_decay": 0.2, "adam_eps": 1e-6},
    ),
}


class RunConfig(BaseModel):
    """Resolved model and training settings for one command."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    def log_resolved(self, log: Optional[logging.Logger] = None) -> None:
        log = log or logger
        for key, value in self.model.model_dump().items():
            log.info(f"config model.{key} = {value}")
        for key, value in self.train.model_dump().items():
            log.info(f"config train.{key} = {value}")


def config_digest(model: ModelConfig) -> int:
    """64-bit xxhash of the canonical model configuration."""
    canonical = json.dumps(model.model_dump(), sort_keys=True, separators=(",", ":"))
    return xxhash.xxh64(canonical.encode("utf-8")).intdigest()


def parse_config_file(path: str) -> Dict[str, str]:
    """Read flat ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    settings: Dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        settings[key] = value
    return settings


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Turn ``key=value`` command-line strings into a dict."""
    settings: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must look like key=value: {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        settings[key] = value
    return settings


def _coerce(key: str, value):
    if key == "stage_sizes" and isinstance(value, str):
        try:
            return tuple(int(v) for v in value.split(","))
        except ValueError:
            raise ConfigError(f"stage_sizes must be comma-separated integers: {value}")
    return value


def resolve_run_config(
    preset: Optional[str] = None,
    file_settings: Optional[Dict[str, str]] = None,
    overrides: Optional[Dict[str, object]] = None,
    base: Optional[RunConfig] = None,
) -> RunConfig:
    """Merge preset defaults, then file settings, then overrides.

    The preset itself follows the same order: a ``preset`` override beats the
    ``preset`` argument, which beats a ``preset`` line in the file. When
    ``base`` is given it replaces the preset defaults (used when a checkpoint
    already fixes the configuration).
    """
    file_values: Dict[str, object] = dict(file_settings or {})
    override_values = {k: v for k, v in (overrides or {}).items() if v is not None}
    file_preset = file_values.pop("preset", None)
    override_preset = override_values.pop("preset", None)
    merged: Dict[str, object] = {**file_values, **override_values}
    preset = str(
        override_preset
        or preset
        or file_preset
        or (base.train.preset if base is not None else "desk")
    )
    if preset not in PRESETS:
        choices = ", ".join(PRESETS)
        raise ConfigError(f"Unknown preset: {preset} (choose from {choices})")

    if base is not None:
        model_values = base.model.model_dump()
        train_values = base.train.model_dump()
    else:
        model_defaults, train_defaults = PRESET_DEFAULTS[preset]
        model_values = dict(model_defaults)
        train_values = dict(train_defaults)
    train_values["preset"] = preset

    model_keys = set(ModelConfig.model_fields)
    train_keys = set(TrainConfig.model_fields)
    for key, value in merged.items():
        if key in model_keys:
            model_values[key] = _coerce(key, value)
        elif key in train_keys:
            train_values[key] = value
        else:
            raise ConfigError(f"Unknown configuration key: {key}")

    try:
        return RunConfig(
            model=ModelConfig(**model_values), train=TrainConfig(**train_values)
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")
