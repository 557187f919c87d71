"""Dataset-level evaluation and the ablation suites."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from config.settings import LossWeights, TrainConfig
from src.dataio import Dataset
from src.errors import ConfigurationError, DimensionError, PreconditionError
from src.metrics import ConfusionMatrix, macro_f1, per_class, weighted_f1
from src.network import Checkpoint, ModelParams, modality_widths, predict_classes
from src.training import Targets, prepare_targets, train

logger = logging.getLogger(__name__)

MODALITY_VARIANTS: Tuple[Tuple[str, ...], ...] = (
    ("text",),
    ("audio",),
    ("video",),
    ("text", "audio"),
    ("text", "video"),
    ("audio", "video"),
    ("text", "audio", "video"),
)
SDAT_WEIGHTS = (0.0, 0.16)
SUITES = ("modality", "sdat")


@dataclass
class EvalReport:
    label_target: str
    accuracy: float
    weighted_f1: float
    macro_f1: float
    confusion: ConfusionMatrix
    n: int
    per_class: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label_target": self.label_target,
            "n": self.n,
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.to_list(),
            "per_class": self.per_class,
        }


def check_compatible(params: ModelParams, ds: Dataset) -> None:
    """Only the modalities the model consumes must agree in width."""
    model_widths = modality_widths(params.dims)
    data_widths = modality_widths(ds.dims)
    for name in params.modalities:
        if model_widths[name] != data_widths[name]:
            raise DimensionError(
                f"field '{name}' has width {data_widths[name]}, model expects {model_widths[name]}",
                [(data_widths[name],), (model_widths[name],)],
                stage="evaluate",
            )


def evaluate(
    model: Union[Checkpoint, ModelParams], ds: Dataset, label_target: str = "ee"
) -> EvalReport:
    """Evaluation-mode argmax per sample, summarised as accuracy and F1."""
    params = model.params if isinstance(model, Checkpoint) else model
    if len(ds) == 0:
        raise PreconditionError("cannot evaluate an empty dataset")
    check_compatible(params, ds)
    pred = predict_classes(params, ds.samples)
    truth = [s.labels[label_target] for s in ds]
    cm = ConfusionMatrix.from_labels(pred, truth)
    report = EvalReport(
        label_target=label_target,
        accuracy=cm.correct / cm.total,
        weighted_f1=weighted_f1(pred, truth),
        macro_f1=macro_f1(pred, truth),
        confusion=cm,
        n=cm.total,
        per_class=per_class(cm),
    )
    logger.info(
        f"📊 {label_target}: accuracy {report.accuracy:.4f}, "
        f"weighted F1 {report.weighted_f1:.4f} (n={report.n})"
    )
    return report


def modality_label(modalities: Sequence[str]) -> str:
    return "+".join(m[0].upper() for m in modalities)


@dataclass
class AblationRow:
    variant: str
    accuracy: float
    weighted_f1: float
    best_epoch: int
    settings: Dict[str, Any] = field(default_factory=dict)


@dataclass
class AblationTable:
    suite: str
    label_target: str
    rows: List[AblationRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "suite": self.suite,
            "label_target": self.label_target,
            "rows": [
                {
                    "variant": r.variant,
                    "accuracy": r.accuracy,
                    "weighted_f1": r.weighted_f1,
                    "best_epoch": r.best_epoch,
                    **r.settings,
                }
                for r in self.rows
            ],
        }

    def to_text(self) -> str:
        header = ("Variant", "Acc.", "F1")
        body = [(r.variant, f"{r.accuracy:.3f}", f"{r.weighted_f1:.3f}") for r in self.rows]
        widths = [max(len(line[i]) for line in [header, *body]) for i in range(3)]

        def fmt(line: Tuple[str, str, str]) -> str:
            return "  ".join(
                cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(line)
            )

        rule = "-" * len(fmt(header))
        return "\n".join([f"{self.suite} ablation ({self.label_target})", fmt(header), rule, *map(fmt, body)])


def ablation_variants(suite: str, base: TrainConfig) -> List[Tuple[str, TrainConfig]]:
    """Named configurations for one suite, in table order."""
    if suite == "modality":
        return [
            (modality_label(mods), base.model_copy(update={"modalities": mods}))
            for mods in MODALITY_VARIANTS
        ]
    if suite == "sdat":
        variants = []
        for w_t in SDAT_WEIGHTS:
            weights = LossWeights(w_s=base.weights.w_s, w_t=w_t)
            name = "with SDAT" if w_t > 0 else "without SDAT"
            variants.append(
                (name, base.model_copy(update={"weights": weights, "sdat_enabled": w_t > 0}))
            )
        return variants
    raise ConfigurationError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")


def run_ablation(
    suite: str,
    base: TrainConfig,
    train_ds: Dataset,
    val_ds: Optional[Dataset],
    test_ds: Optional[Dataset] = None,
    targets: Optional[Targets] = None,
) -> AblationTable:
    """Train every variant of a suite and score its best checkpoint.

    Rows are scored on ``test_ds`` when given, otherwise on ``val_ds``.
    """
    score_ds = test_ds if test_ds is not None and len(test_ds) else val_ds
    if score_ds is None or len(score_ds) == 0:
        raise PreconditionError("ablation needs a validation or test set to score")
    variants = ablation_variants(suite, base)
    if targets is None and base.sdat_enabled:
        targets = prepare_targets(train_ds, base)

    table = AblationTable(suite, base.label_target)
    for name, cfg in variants:
        logger.info(f"🧪 Ablation {suite}: training variant {name}")
        run = train(train_ds, val_ds, cfg, targets=targets if cfg.sdat_enabled else {})
        report = evaluate(run.best_params(), score_ds, cfg.label_target)
        table.rows.append(
            AblationRow(
                variant=name,
                accuracy=report.accuracy,
                weighted_f1=report.weighted_f1,
                best_epoch=run.best_epoch,
                settings={"modalities": list(cfg.modalities), "w_t": cfg.weights.w_t},
            )
        )
    return table
