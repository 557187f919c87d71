"""End-to-end training: topic targets, minibatch optimisation, checkpoints, K search."""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import TrainConfig
from src.dataio import ConversationSample, Dataset, EmpathyLabels, FeatureDims
from src.errors import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    PreconditionError,
)
from src.lda import LdaModel, TopicDistribution, doc_topic_distribution, fit_documents
from src.metrics import accuracy, weighted_f1
from src.network import (
    Checkpoint,
    ModelParams,
    decode_matrix,
    encode_matrix,
    forward,
    params_from_config,
    predict_classes,
    save_checkpoint,
)
from src.numcore import Node, Parameter, Tape, finite_diff_check, scale, suspend_tape
from src.objective import LossReport, SampleLoss, cross_entropy, kl_loss, total_loss

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_FILENAME = "train_log.jsonl"
BEST_FILENAME = "best.json"
LAST_FILENAME = "last.json"

Targets = Dict[str, TopicDistribution]


def fit_target_model(train: Dataset, cfg: TrainConfig) -> LdaModel:
    """Fit LDA on the supervisory documents of every training sample."""
    missing = [s.id for s in train if not s.doc_tokens]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ConfigurationError(
            f"{len(missing)} training samples lack supervisory documents: {shown}"
        )
    return fit_documents(
        [list(s.doc_tokens) for s in train],
        K=cfg.topics_K,
        alpha=cfg.lda.alpha,
        beta=cfg.lda.beta,
        sweeps=cfg.lda.sweeps,
        seed=cfg.seed,
    )


def prepare_targets(train: Dataset, cfg: TrainConfig) -> Targets:
    """Map each training sample id to its document's topic distribution.

    Returns an empty map, without touching any document, when SDAT is off.
    """
    if not cfg.sdat_enabled:
        logger.info("SDAT disabled: no topic targets")
        return {}
    model = fit_target_model(train, cfg)
    targets = {s.id: doc_topic_distribution(model, d) for d, s in enumerate(train)}
    logger.info(f"Prepared {len(targets)} topic targets (K={cfg.topics_K})")
    return targets


@dataclass
class OptimizerState:
    """Step counter and Adam moments keyed by parameter name."""

    kind: str = "adam"
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "step": self.step,
            "m": {k: encode_matrix(a) for k, a in self.m.items()},
            "v": {k: encode_matrix(a) for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "OptimizerState":
        return cls(
            kind=payload["kind"],
            step=payload["step"],
            m={k: decode_matrix(a) for k, a in payload["m"].items()},
            v={k: decode_matrix(a) for k, a in payload["v"].items()},
        )


def optimizer_step(
    params: Iterable[Parameter],
    lr: float,
    state: Optional[OptimizerState] = None,
    kind: Optional[str] = None,
) -> Tuple[Iterable[Parameter], OptimizerState]:
    """Apply one update from the populated ``grad`` buffers (in place)."""
    state = state or OptimizerState(kind=kind or "adam")
    kind = kind or state.kind
    param_list = list(params)
    for p in param_list:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {p.name}")

    if kind == "sgd":
        for p in param_list:
            p.value -= lr * p.grad
    elif kind == "adam":
        state.step += 1
        correction1 = 1.0 - ADAM_BETA1**state.step
        correction2 = 1.0 - ADAM_BETA2**state.step
        for p in param_list:
            m = state.m.get(p.name, np.zeros_like(p.value))
            v = state.v.get(p.name, np.zeros_like(p.value))
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * p.grad
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * p.grad * p.grad
            state.m[p.name], state.v[p.name] = m, v
            p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
    else:
        raise ConfigurationError(f"unknown optimizer {kind!r}")
    return params, state


def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Dropout seed for one sample visit, independent of batch composition."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def sample_gradients(
    sample: ConversationSample,
    params: ModelParams,
    cfg: TrainConfig,
    target: Optional[TopicDistribution],
    dropout_seed: int,
    training_mode: bool = True,
) -> Tuple[SampleLoss, Dict[str, np.ndarray]]:
    """Forward and backward pass for one sample on a private tape."""
    with Tape() as tape:
        out = forward(sample, params, cfg.label_target, training_mode, dropout_seed)
        l_s = cross_entropy(out.y_emp, out.target)
        if target is not None:
            l_t = kl_loss(out.y_dis, target, cfg.kl_direction)
            loss = total_loss(l_s, l_t, cfg.weights)
        else:
            l_t = None
            loss = scale(l_s, cfg.weights.w_s)
    grads = tape.gradients(loss)
    record = SampleLoss(
        sample_id=sample.id,
        l_s=l_s.item(),
        l_t=None if l_t is None else l_t.item(),
        total=loss.item(),
    )
    return record, grads


def dataset_loss(
    params: ModelParams, ds: Dataset, cfg: TrainConfig, targets: Optional[Targets] = None
) -> LossReport:
    """Evaluation-mode loss over a dataset."""
    targets = targets or {}
    records = []
    with suspend_tape():
        for s in ds:
            out = forward(s, params, cfg.label_target, training_mode=False)
            l_s = cross_entropy(out.y_emp, out.target).item()
            target = targets.get(s.id)
            l_t = None if target is None else kl_loss(out.y_dis, target, cfg.kl_direction).item()
            total = total_loss(l_s, l_t or 0.0, cfg.weights)
            records.append(SampleLoss(s.id, l_s, l_t, total))
    return LossReport.from_samples(records, cfg.weights)


@dataclass
class EpochRecord:
    epoch: int
    loss: LossReport
    val_accuracy: Optional[float]
    val_weighted_f1: Optional[float]
    seconds: Optional[float] = None

    def to_log(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            **self.loss.to_dict(),
            "val_accuracy": self.val_accuracy,
            "val_weighted_f1": self.val_weighted_f1,
            "seconds": self.seconds,
        }

    def to_state(self) -> Dict[str, Any]:
        record = self.to_log()
        record.pop("seconds")
        return record

    @classmethod
    def from_state(cls, payload: Dict[str, Any], cfg: TrainConfig) -> "EpochRecord":
        loss = LossReport(payload["l_s"], payload["l_t"], payload["total"], cfg.weights)
        return cls(payload["epoch"], loss, payload["val_accuracy"], payload["val_weighted_f1"])


@dataclass
class TrainRun:
    """Outcome of one training run."""

    config: TrainConfig
    params: ModelParams
    history: List[EpochRecord]
    best_epoch: int
    best_val_accuracy: Optional[float]
    best_state: Dict[str, np.ndarray]
    optimizer_state: OptimizerState
    targets: Targets = field(default_factory=dict)
    best_checkpoint_path: Optional[Path] = None

    @property
    def losses(self) -> List[LossReport]:
        return [r.loss for r in self.history]

    def best_params(self) -> ModelParams:
        best = params_from_config(self.params.dims, self.config, zero=True)
        best.load_state_dict(self.best_state)
        return best

    def final_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params, self.config, _run_state(self))

    def best_checkpoint(self) -> Checkpoint:
        return Checkpoint(self.best_params(), self.config, {"epoch": self.best_epoch})


def _run_state(run: TrainRun) -> Dict[str, Any]:
    return {
        "epoch": run.history[-1].epoch if run.history else 0,
        "optimizer": run.optimizer_state.to_dict(),
        "history": [r.to_state() for r in run.history],
        "best": {
            "epoch": run.best_epoch,
            "val_accuracy": run.best_val_accuracy,
            "parameters": {k: encode_matrix(v) for k, v in run.best_state.items()},
        },
    }


class Trainer:
    """Runs the minibatch optimisation loop for one TrainConfig."""

    def __init__(self, config: TrainConfig, out_dir: Union[str, Path, None] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None

    def fit(
        self,
        train: Dataset,
        val: Optional[Dataset] = None,
        targets: Optional[Targets] = None,
        resume: Optional[Checkpoint] = None,
    ) -> TrainRun:
        cfg = self.config
        if len(train) == 0:
            raise PreconditionError("training set is empty")
        if val is not None and len(val) and val.dims != train.dims:
            raise DimensionError("validation dims differ from training dims", stage="train")
        if targets is None:
            targets = prepare_targets(train, cfg)

        run = self._start(train, resume)
        run.targets = targets
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if resume is None:
                (self.out_dir / LOG_FILENAME).write_text("", encoding="utf-8")
                run.best_checkpoint_path = save_checkpoint(
                    run.best_checkpoint(), self.out_dir / BEST_FILENAME
                )

        start_epoch = run.history[-1].epoch if run.history else 0
        logger.info(
            f"🚀 Training {cfg.label_target} on {len(train)} samples: "
            f"epochs {start_epoch + 1}..{cfg.epochs}, optimizer {cfg.optimizer}, "
            f"w_s={cfg.weights.w_s}, w_t={cfg.weights.w_t}, sdat={cfg.sdat_enabled}"
        )
        executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        try:
            for epoch in range(start_epoch + 1, cfg.epochs + 1):
                self._run_epoch(run, train, val, epoch, executor)
        finally:
            if executor is not None:
                executor.shutdown()

        if self.out_dir is not None:
            save_checkpoint(run.final_checkpoint(), self.out_dir / LAST_FILENAME)
        logger.info(f"🏁 Training finished: best epoch {run.best_epoch} (val acc {run.best_val_accuracy})")
        return run

    def _start(self, train: Dataset, resume: Optional[Checkpoint]) -> TrainRun:
        cfg = self.config
        params = params_from_config(train.dims, cfg)
        if resume is None:
            return TrainRun(
                config=cfg,
                params=params,
                history=[],
                best_epoch=0,
                best_val_accuracy=None,
                best_state=params.state_dict(),
                optimizer_state=OptimizerState(kind=cfg.optimizer),
            )
        state = resume.state
        params.load_state_dict(resume.params.state_dict())
        best = state["best"]
        logger.info(f"Resuming from epoch {state['epoch']}")
        return TrainRun(
            config=cfg,
            params=params,
            history=[EpochRecord.from_state(r, cfg) for r in state["history"]],
            best_epoch=best["epoch"],
            best_val_accuracy=best["val_accuracy"],
            best_state={k: decode_matrix(v) for k, v in best["parameters"].items()},
            optimizer_state=OptimizerState.from_dict(state["optimizer"]),
        )

    def _run_epoch(
        self,
        run: TrainRun,
        train: Dataset,
        val: Optional[Dataset],
        epoch: int,
        executor: Optional[ThreadPoolExecutor],
    ) -> None:
        cfg = self.config
        started = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        records: List[SampleLoss] = []

        for b, batch in enumerate(batches, 1):

            def work(index: int) -> Tuple[SampleLoss, Dict[str, np.ndarray]]:
                sample = train[int(index)]
                return sample_gradients(
                    sample,
                    run.params,
                    cfg,
                    run.targets.get(sample.id),
                    sample_seed(cfg.seed, epoch, int(index)),
                )

            try:
                results = list(executor.map(work, batch)) if executor else [work(i) for i in batch]
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite activations ({e})", epoch, b) from e
            self._apply_batch(run, results, epoch, b)
            records += [r for r, _ in results]

        report = LossReport.from_samples(records, cfg.weights)
        val_acc = val_f1 = None
        if val is not None and len(val):
            pred = predict_classes(run.params, val.samples)
            truth = [s.labels[cfg.label_target] for s in val]
            val_acc, val_f1 = accuracy(pred, truth), weighted_f1(pred, truth)
        record = EpochRecord(epoch, report, val_acc, val_f1, time.perf_counter() - started)
        run.history.append(record)
        self._track_best(run, record)
        logger.info(
            f"📈 Epoch {epoch}/{cfg.epochs}: l_s={report.l_s:.4f} l_t={report.l_t:.4f} "
            f"total={report.total:.4f} val_acc={val_acc} val_f1={val_f1} ({record.seconds:.2f}s)"
        )
        self._persist(run, record)

    def _apply_batch(
        self,
        run: TrainRun,
        results: Sequence[Tuple[SampleLoss, Dict[str, np.ndarray]]],
        epoch: int,
        batch: int,
    ) -> None:
        for record, _ in results:
            if not np.isfinite(record.total):
                raise DivergenceError(f"non-finite loss for sample {record.sample_id}", epoch, batch)
        count = len(results)
        for p in run.params:
            grad = np.zeros_like(p.value)
            for _, grads in results:
                if p.name in grads:
                    grad = grad + grads[p.name]
            p.grad = grad / count
        try:
            optimizer_step(run.params, self.config.learning_rate, run.optimizer_state, self.config.optimizer)
        except DivergenceError as e:
            raise DivergenceError(str(e), epoch, batch) from e
        run.params.zero_grad()

    def _track_best(self, run: TrainRun, record: EpochRecord) -> None:
        if record.val_accuracy is None:
            improved = not run.history[:-1] or record.loss.total < min(
                r.loss.total for r in run.history[:-1]
            )
        else:
            improved = run.best_val_accuracy is None or record.val_accuracy > run.best_val_accuracy
        if improved:
            run.best_epoch = record.epoch
            run.best_val_accuracy = record.val_accuracy
            run.best_state = run.params.state_dict()
            if self.out_dir is not None:
                run.best_checkpoint_path = save_checkpoint(
                    run.best_checkpoint(), self.out_dir / BEST_FILENAME
                )

    def _persist(self, run: TrainRun, record: EpochRecord) -> None:
        if self.out_dir is None:
            return
        with open(self.out_dir / LOG_FILENAME, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_log()) + "\n")
        if record.epoch % self.config.checkpoint_every == 0:
            save_checkpoint(run.final_checkpoint(), self.out_dir / LAST_FILENAME)


def train(
    train_ds: Dataset,
    val_ds: Optional[Dataset],
    cfg: TrainConfig,
    out_dir: Union[str, Path, None] = None,
    targets: Optional[Targets] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainRun:
    """Train one empathy model; see :class:`Trainer`."""
    return Trainer(cfg, out_dir).fit(train_ds, val_ds, targets=targets, resume=resume)


@dataclass
class GridSearchResult:
    best_K: int
    val_accuracy: Dict[int, float]
    runs: Dict[int, TrainRun] = field(default_factory=dict)


def grid_search_topics(
    train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, candidates: Sequence[int]
) -> GridSearchResult:
    """Train once per topic count; highest validation accuracy wins, ties to smaller K."""
    if not candidates:
        raise PreconditionError("no candidate topic counts")
    if val_ds is None or len(val_ds) == 0:
        raise PreconditionError("grid search needs a validation set")
    scores: Dict[int, float] = {}
    runs: Dict[int, TrainRun] = {}
    best_K, best_score = None, None
    for K in sorted(set(candidates)):
        run = train(train_ds, val_ds, cfg.model_copy(update={"topics_K": K}))
        score = run.best_val_accuracy if run.best_val_accuracy is not None else 0.0
        scores[K], runs[K] = score, run
        logger.info(f"🔍 K={K}: best val accuracy {score:.4f}")
        if best_score is None or score > best_score:
            best_K, best_score = K, score
    return GridSearchResult(best_K, scores, runs)


GRADCHECK_DIMS = FeatureDims(d_t=4, d_a=3, d_v=3)
GRADCHECK_LENGTHS = {"text": 3, "audio": 2, "video": 2}
GRADCHECK_HIDDEN = 5
GRADCHECK_TOPICS = 3
GRADCHECK_TOLERANCE = 1e-4


def gradient_check(
    cfg: Optional[TrainConfig] = None, seed: int = 0, eps: float = 1e-5
) -> Dict[str, float]:
    """Finite-difference check of the full composed loss on a small random sample.

    Returns the maximum relative error per parameter. Dropout is off so the
    loss is a deterministic function of the parameters.
    """
    cfg = (cfg or TrainConfig()).model_copy(
        update={"hidden_size": GRADCHECK_HIDDEN, "topics_K": GRADCHECK_TOPICS, "seed": seed}
    )
    rng = np.random.default_rng(seed)
    widths = {"text": GRADCHECK_DIMS.d_t, "audio": GRADCHECK_DIMS.d_a, "video": GRADCHECK_DIMS.d_v}
    features = {m: rng.normal(size=(GRADCHECK_LENGTHS[m], widths[m])) for m in widths}
    sample = ConversationSample(
        id="gradcheck",
        labels=EmpathyLabels(*(int(c) for c in rng.integers(0, 3, size=3))),
        **features,
    )
    target = TopicDistribution(rng.dirichlet(np.ones(GRADCHECK_TOPICS)))
    params = params_from_config(GRADCHECK_DIMS, cfg)

    def loss() -> Node:
        out = forward(sample, params, cfg.label_target, training_mode=False)
        l_s = cross_entropy(out.y_emp, out.target)
        return total_loss(l_s, kl_loss(out.y_dis, target, cfg.kl_direction), cfg.weights)

    errors = finite_diff_check(loss, params.parameters(), eps=eps)
    logger.info(f"🔬 Gradient check: max relative error {max(errors.values()):.3e}")
    return errors
