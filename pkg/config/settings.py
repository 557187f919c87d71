"""Configuration settings for the empathy fusion engine."""

import json
import os
from pathlib import Path
from typing import Literal, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigurationError

# Load environment variables
load_dotenv()

Modality = Literal["text", "audio", "video"]
LabelTarget = Literal["ee", "er", "cr"]
ALL_MODALITIES: Tuple[str, ...] = ("text", "audio", "video")


class Config:
    """Environment-level defaults."""

    # Logging settings
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("LOG_FILE", "logs/empathy.log")

    # Run settings
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))
    TRAIN_WORKERS = int(os.getenv("TRAIN_WORKERS", "1"))
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "runs")

    # Model settings
    HIDDEN_SIZE = int(os.getenv("HIDDEN_SIZE", "32"))
    LDA_SWEEPS = int(os.getenv("LDA_SWEEPS", "500"))


class LossWeights(BaseModel):
    """Weights of the empathy and topic terms in the total loss."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    w_s: float = Field(default=0.84, ge=0.0)
    w_t: float = Field(default=0.16, ge=0.0)


class LdaSettings(BaseModel):
    """Symmetric priors and sweep budget of the topic model."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(default=0.1, gt=0.0)
    beta: float = Field(default=0.01, gt=0.0)
    sweeps: int = Field(default_factory=lambda: Config.LDA_SWEEPS, ge=1)


class TrainConfig(BaseModel):
    """Hyperparameters of one training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=60, ge=0)
    dropout_rate: float = Field(default=0.3, ge=0.0, lt=1.0)
    topics_K: int = Field(default=10, ge=1)
    weights: LossWeights = Field(default_factory=LossWeights)
    label_target: LabelTarget = "ee"
    optimizer: Literal["sgd", "adam"] = "adam"
    seed: int = Field(default_factory=lambda: Config.DEFAULT_SEED, ge=0, lt=2**64)
    sdat_enabled: bool = True
    lda: LdaSettings = Field(default_factory=LdaSettings)

    hidden_size: int = Field(default_factory=lambda: Config.HIDDEN_SIZE, ge=1)
    modalities: Tuple[Modality, ...] = ALL_MODALITIES
    topic_input: Literal["projection", "raw"] = "projection"
    kl_direction: Literal["forward", "reverse"] = "forward"
    workers: int = Field(default_factory=lambda: Config.TRAIN_WORKERS, ge=1)
    checkpoint_every: int = Field(default=1, ge=1)

    @field_validator("modalities")
    @classmethod
    def _canonical_modalities(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if not value:
            raise ValueError("at least one modality is required")
        if len(set(value)) != len(value):
            raise ValueError("modalities must be unique")
        return tuple(m for m in ALL_MODALITIES if m in value)


class SynthConfig(BaseModel):
    """Shape and mechanism of a synthetic dataset."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    task: str = "unimodal-linear"
    n: int = Field(default=200, ge=1)
    d_t: int = Field(default=8, ge=1)
    d_a: int = Field(default=4, ge=1)
    d_v: int = Field(default=4, ge=1)
    min_len: int = Field(default=2, ge=1)
    max_len: int = Field(default=5, ge=1)
    topics: int = Field(default=2, ge=1)
    words_per_topic: int = Field(default=20, ge=1)
    doc_length: int = Field(default=50, ge=1)
    noise: float = Field(default=0.5, ge=0.0)

    @model_validator(mode="after")
    def _check_lengths(self) -> "SynthConfig":
        if self.max_len < self.min_len:
            raise ValueError("max_len must be >= min_len")
        return self


class SplitSpec(BaseModel):
    """Ratios of the train/validation/test partition and the shuffle seed."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @field_validator("ratios")
    @classmethod
    def _check_ratios(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r < 0 for r in value):
            raise ValueError("ratios must be non-negative")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(value)!r}")
        return value


def load_train_config(path: Union[str, Path, None] = None, **overrides) -> TrainConfig:
    """Read a TrainConfig from a JSON file, applying keyword overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(TrainConfig, **data)


def make_config(model: type, **values) -> BaseModel:
    """Build a pydantic config model, converting validation failures."""
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {model.__name__}: {e}") from e
