"""Conversation datasets: JSON-lines ingestion, splitting and synthetic generation."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from config.settings import SplitSpec, SynthConfig
from src.errors import (
    ConfigurationError,
    DatasetParseError,
    EmptyDatasetError,
    LabelError,
    SchemaError,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LABEL_NAMES: Tuple[str, ...] = ("ee", "er", "cr")
NUM_CLASSES = 3
SYNTH_TASKS: Tuple[str, ...] = ("unimodal-linear", "cross-modal-parity", "topic-correlated")


@dataclass(frozen=True)
class EmpathyLabels:
    """Expression of experience, emotional reaction and cognitive reaction levels."""

    ee: int
    er: int
    cr: int

    def __getitem__(self, target: str) -> int:
        if target not in LABEL_NAMES:
            raise ConfigurationError(f"unknown label target {target!r}")
        return getattr(self, target)

    def to_dict(self) -> Dict[str, int]:
        return {"ee": self.ee, "er": self.er, "cr": self.cr}


@dataclass(frozen=True)
class FeatureDims:
    d_t: int
    d_a: int
    d_v: int

    def to_dict(self) -> Dict[str, int]:
        return {"d_t": self.d_t, "d_a": self.d_a, "d_v": self.d_v}


@dataclass(frozen=True, eq=False)
class ConversationSample:
    """One counseling segment with precomputed modality features."""

    id: str
    text: np.ndarray
    audio: np.ndarray
    video: np.ndarray
    labels: EmpathyLabels
    doc_tokens: Optional[Tuple[str, ...]] = None

    def modality(self, name: str) -> np.ndarray:
        return {"text": self.text, "audio": self.audio, "video": self.video}[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConversationSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and self.doc_tokens == other.doc_tokens
            and all(
                np.array_equal(getattr(self, m), getattr(other, m))
                for m in ("text", "audio", "video")
            )
        )


@dataclass(frozen=True)
class Dataset:
    """Validated, immutable collection of samples sharing feature widths."""

    samples: Tuple[ConversationSample, ...]
    dims: FeatureDims
    schema_version: int = SCHEMA_VERSION
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        validate_dataset(self)
        self._index.update({s.id: i for i, s in enumerate(self.samples)})

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> ConversationSample:
        return self.samples[i]

    def by_id(self, sample_id: str) -> ConversationSample:
        return self.samples[self._index[sample_id]]

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.dims, self.schema_version)


def validate_dataset(ds: Dataset) -> None:
    """Check every Dataset invariant eagerly."""
    widths = {"text": ds.dims.d_t, "audio": ds.dims.d_a, "video": ds.dims.d_v}
    seen = set()
    for sample in ds.samples:
        if sample.id in seen:
            raise SchemaError(f"duplicate id {sample.id!r}", "id")
        seen.add(sample.id)
        for name, width in widths.items():
            matrix = sample.modality(name)
            if matrix.ndim != 2 or matrix.shape[0] < 1:
                raise SchemaError(f"sample {sample.id!r} needs at least one row", name)
            if matrix.shape[1] != width:
                raise SchemaError(
                    f"sample {sample.id!r} has width {matrix.shape[1]}, expected {width}", name
                )
            if not np.all(np.isfinite(matrix)):
                raise SchemaError(f"sample {sample.id!r} has non-finite entries", name)
        for target in LABEL_NAMES:
            value = sample.labels[target]
            if value not in (0, 1, 2):
                raise LabelError(f"sample {sample.id!r}: label {target}={value} not in {{0,1,2}}")


class _DimsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_t: int
    d_a: int
    d_v: int


class _HeaderRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    dims: _DimsRecord


class _LabelsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ee: int
    er: int
    cr: int


class _SampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    text: List[List[float]]
    audio: List[List[float]]
    video: List[List[float]]
    labels: _LabelsRecord
    doc_tokens: Optional[List[str]] = None


def _rectangular(rows: List[List[float]], field_name: str, width: int, line: int) -> np.ndarray:
    if not rows:
        raise SchemaError("matrix has no rows", field_name, line)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise SchemaError(f"row lengths differ: {sorted(lengths)}", field_name, line)
    if lengths.pop() != width:
        raise SchemaError(f"width {len(rows[0])} does not match header {width}", field_name, line)
    return np.array(rows, dtype=np.float64)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read and validate a JSON-lines dataset file (header line first)."""
    path = Path(path)
    logger.info(f"Loading dataset: {path}")
    header: Optional[_HeaderRecord] = None
    samples: List[ConversationSample] = []

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                if header is None:
                    header = _HeaderRecord.model_validate_json(line)
                    if header.schema_version != SCHEMA_VERSION:
                        raise SchemaError(
                            f"unsupported version {header.schema_version}", "schema_version", line_no
                        )
                    continue
                record = _SampleRecord.model_validate_json(line)
            except ValidationError as e:
                raise DatasetParseError(_first_problem(e), line_no) from e

            dims = header.dims
            labels = EmpathyLabels(record.labels.ee, record.labels.er, record.labels.cr)
            for target in LABEL_NAMES:
                if labels[target] not in (0, 1, 2):
                    raise LabelError(f"line {line_no}: label {target}={labels[target]} not in {{0,1,2}}")
            samples.append(
                ConversationSample(
                    id=record.id,
                    text=_rectangular(record.text, "text", dims.d_t, line_no),
                    audio=_rectangular(record.audio, "audio", dims.d_a, line_no),
                    video=_rectangular(record.video, "video", dims.d_v, line_no),
                    labels=labels,
                    doc_tokens=None if record.doc_tokens is None else tuple(record.doc_tokens),
                )
            )

    if header is None or not samples:
        raise EmptyDatasetError(f"{path} contains no samples")
    ds = Dataset(samples, FeatureDims(header.dims.d_t, header.dims.d_a, header.dims.d_v))
    logger.info(f"Loaded {len(ds)} samples (dims {ds.dims.to_dict()})")
    return ds


def _first_problem(error: ValidationError) -> str:
    problem = error.errors()[0]
    location = ".".join(str(p) for p in problem.get("loc", ())) or "record"
    return f"{location}: {problem.get('msg', 'invalid')}"


def save_dataset(ds: Dataset, path: Union[str, Path]) -> Path:
    """Write a dataset in the JSON-lines format read by ``load_dataset``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        header = {"schema_version": ds.schema_version, "dims": ds.dims.to_dict()}
        f.write(json.dumps(header) + "\n")
        for s in ds.samples:
            record = {
                "id": s.id,
                "text": s.text.tolist(),
                "audio": s.audio.tolist(),
                "video": s.video.tolist(),
                "labels": s.labels.to_dict(),
                "doc_tokens": None if s.doc_tokens is None else list(s.doc_tokens),
            }
            f.write(json.dumps(record) + "\n")
    logger.info(f"Saved {len(ds)} samples to {path}")
    return path


def split(ds: Dataset, spec: Optional[SplitSpec] = None) -> Tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then contiguous train/validation/test slices at floor boundaries.

    Small datasets can produce an empty validation or test partition.
    """
    spec = spec or SplitSpec()
    n = len(ds)
    if n == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    first = math.floor(spec.ratios[0] * n + 1e-9)
    second = math.floor((spec.ratios[0] + spec.ratios[1]) * n + 1e-9)
    parts = (order[:first], order[first:second], order[second:])
    return tuple(_partition(ds, idx) for idx in parts)


def _partition(ds: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset([ds.samples[i] for i in indices], ds.dims, ds.schema_version)


def synth_generate(cfg: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset for one label mechanism.

    - ``unimodal-linear``: text rows sit around one of three class prototypes.
    - ``cross-modal-parity``: label is the XOR of the signs of audio channel 0
      and video channel 0; text is pure noise.
    - ``topic-correlated``: each supervisory document is drawn mostly from one
      planted topic; that topic sets the label and tints the text features.

    All three empathy labels share the generated level.
    """
    if cfg.task not in SYNTH_TASKS:
        raise ConfigurationError(f"unknown synthetic task {cfg.task!r}; choose from {SYNTH_TASKS}")
    rng = np.random.default_rng(seed)
    dims = FeatureDims(cfg.d_t, cfg.d_a, cfg.d_v)
    generator = {
        "unimodal-linear": _unimodal_linear,
        "cross-modal-parity": _cross_modal_parity,
        "topic-correlated": _topic_correlated,
    }[cfg.task]
    samples = generator(cfg, rng)
    logger.info(f"Generated {len(samples)} '{cfg.task}' samples (seed {seed})")
    return Dataset(samples, dims)


def _lengths(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[int, int, int]:
    n_t, n_a, n_v = rng.integers(cfg.min_len, cfg.max_len + 1, size=3)
    return int(n_t), int(n_a), int(n_v)


def _labels(level: int) -> EmpathyLabels:
    return EmpathyLabels(level, level, level)


def _unimodal_linear(cfg: SynthConfig, rng: np.random.Generator) -> List[ConversationSample]:
    prototypes = rng.normal(size=(NUM_CLASSES, cfg.d_t))
    prototypes *= 2.0 / np.linalg.norm(prototypes, axis=1, keepdims=True)
    samples = []
    for i in range(cfg.n):
        n_t, n_a, n_v = _lengths(cfg, rng)
        level = int(rng.integers(NUM_CLASSES))
        text = prototypes[level] + cfg.noise * rng.normal(size=(n_t, cfg.d_t))
        samples.append(
            ConversationSample(
                id=f"ul-{i:05d}",
                text=text,
                audio=rng.normal(size=(n_a, cfg.d_a)),
                video=rng.normal(size=(n_v, cfg.d_v)),
                labels=_labels(level),
            )
        )
    return samples


def parity_label(audio: np.ndarray, video: np.ndarray) -> int:
    """Label of a cross-modal-parity sample, re-derived from its features."""
    return int((audio[:, 0].mean() > 0) != (video[:, 0].mean() > 0))


def _signed_channel(rng: np.random.Generator, rows: int, cols: int, positive: bool) -> np.ndarray:
    matrix = rng.normal(size=(rows, cols))
    magnitude = rng.uniform(0.5, 1.5, size=rows)
    matrix[:, 0] = magnitude if positive else -magnitude
    return matrix


def _cross_modal_parity(cfg: SynthConfig, rng: np.random.Generator) -> List[ConversationSample]:
    samples = []
    for i in range(cfg.n):
        n_t, n_a, n_v = _lengths(cfg, rng)
        audio_bit, video_bit = (bool(b) for b in rng.integers(2, size=2))
        audio = _signed_channel(rng, n_a, cfg.d_a, audio_bit)
        video = _signed_channel(rng, n_v, cfg.d_v, video_bit)
        samples.append(
            ConversationSample(
                id=f"cp-{i:05d}",
                text=rng.normal(size=(n_t, cfg.d_t)),
                audio=audio,
                video=video,
                labels=_labels(parity_label(audio, video)),
            )
        )
    return samples


def topic_vocabulary(topic: int, words_per_topic: int) -> List[str]:
    """Planted vocabulary of one topic; vocabularies of distinct topics are disjoint."""
    return [f"t{topic}w{j:02d}" for j in range(words_per_topic)]


def _topic_correlated(cfg: SynthConfig, rng: np.random.Generator) -> List[ConversationSample]:
    vocabularies = [topic_vocabulary(k, cfg.words_per_topic) for k in range(cfg.topics)]
    prototypes = rng.normal(size=(cfg.topics, cfg.d_t))
    prototypes *= 2.0 / np.linalg.norm(prototypes, axis=1, keepdims=True)
    samples = []
    for i in range(cfg.n):
        n_t, n_a, n_v = _lengths(cfg, rng)
        dominant = int(rng.integers(cfg.topics))
        mixture = np.full(cfg.topics, 0.1 / max(cfg.topics - 1, 1))
        mixture[dominant] = 0.9 if cfg.topics > 1 else 1.0
        topics = rng.choice(cfg.topics, size=cfg.doc_length, p=mixture)
        tokens = tuple(vocabularies[k][int(rng.integers(cfg.words_per_topic))] for k in topics)
        text = prototypes[dominant] + cfg.noise * rng.normal(size=(n_t, cfg.d_t))
        samples.append(
            ConversationSample(
                id=f"tc-{i:05d}",
                text=text,
                audio=rng.normal(size=(n_a, cfg.d_a)),
                video=rng.normal(size=(n_v, cfg.d_v)),
                labels=_labels(dominant % NUM_CLASSES),
                doc_tokens=tokens,
            )
        )
    return samples
