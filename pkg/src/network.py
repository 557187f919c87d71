"""Multi-modal empathy network.

Text is projected into each partner modality's width (tanh affine), combined
with that modality through two-way attention, and the bimodal features are
concatenated with the raw text along the feature axis and run through an LSTM.
The final hidden state feeds the empathy head; the pooled text projection feeds
the topic head.

When the ablation suite drops text, the first remaining modality (audio, then
video) takes the text's anchoring role.
"""

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import ALL_MODALITIES, TrainConfig
from src.dataio import ConversationSample, FeatureDims
from src.errors import ConfigurationError, DimensionError, PreconditionError
from src.lda import TopicDistribution
from src.numcore import (
    Node,
    Parameter,
    active_tape,
    affine,
    concat_cols,
    matmul,
    mean_rows,
    mul,
    row_softmax,
    sigmoid_map,
    suspend_tape,
    take_row,
    tanh_map,
    transpose,
)

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
CHECKPOINT_FORMAT = "empathy-checkpoint"
CHECKPOINT_VERSION = 1
PARTNER_ORDER = ("video", "audio")
GATES = ("input", "forget", "output", "candidate")


def modality_widths(dims: FeatureDims) -> Dict[str, int]:
    return {"text": dims.d_t, "audio": dims.d_a, "video": dims.d_v}


@dataclass(frozen=True)
class Layout:
    """Which modality anchors the fusion and which ones pair with it."""

    modalities: Tuple[str, ...]
    anchor: str
    partners: Tuple[str, ...]
    widths: Dict[str, int]

    @classmethod
    def build(cls, modalities: Sequence[str], dims: FeatureDims) -> "Layout":
        present = tuple(m for m in ALL_MODALITIES if m in modalities)
        if not present:
            raise ConfigurationError("at least one modality is required")
        anchor = present[0]
        partners = tuple(m for m in PARTNER_ORDER if m in present and m != anchor)
        return cls(present, anchor, partners, modality_widths(dims))

    @property
    def lstm_input_size(self) -> int:
        return sum(2 * self.widths[m] for m in self.partners) + self.widths[self.anchor]

    def pool_width(self, topic_input: str) -> int:
        if topic_input == "projection" and self.partners:
            return self.widths[self.partners[0]]
        return self.widths[self.anchor]


@dataclass
class Projection:
    W: Parameter
    b: Parameter


@dataclass
class FusionParams:
    """Anchor-to-partner projections, keyed by partner modality."""

    projections: Dict[str, Projection] = field(default_factory=dict)

    @property
    def proj_v(self) -> Optional[Projection]:
        return self.projections.get("video")

    @property
    def proj_a(self) -> Optional[Projection]:
        return self.projections.get("audio")


@dataclass
class Gate:
    W: Parameter
    U: Parameter
    b: Parameter


@dataclass
class LstmParams:
    input: Gate
    forget: Gate
    output: Gate
    candidate: Gate

    @property
    def input_size(self) -> int:
        return self.input.W.rows

    @property
    def hidden_size(self) -> int:
        return self.input.W.cols

    def gates(self) -> Dict[str, Gate]:
        return {name: getattr(self, name) for name in GATES}


@dataclass
class Heads:
    emp_W: Parameter
    emp_b: Parameter
    dis_W: Parameter
    dis_b: Parameter


@dataclass
class ModelParams:
    """Every trainable tensor of one empathy model."""

    dims: FeatureDims
    fusion: FusionParams
    lstm: LstmParams
    heads: Heads
    modalities: Tuple[str, ...] = ALL_MODALITIES
    topic_input: str = "projection"
    dropout_rate: float = 0.3

    def __post_init__(self):
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise PreconditionError("parameter names must be unique")

    @property
    def layout(self) -> Layout:
        return Layout.build(self.modalities, self.dims)

    @property
    def topics_K(self) -> int:
        return self.heads.dis_W.cols

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for proj in self.fusion.projections.values():
            params += [proj.W, proj.b]
        for gate in self.lstm.gates().values():
            params += [gate.W, gate.U, gate.b]
        params += [self.heads.emp_W, self.heads.emp_b, self.heads.dis_W, self.heads.dis_b]
        return params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.parameters())

    def named(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = self.named()
        if set(state) != set(named):
            raise PreconditionError("state does not match the parameter set")
        for name, value in state.items():
            if named[name].shape != np.shape(value):
                raise DimensionError(f"parameter {name}", [named[name].shape, np.shape(value)])
            named[name].value = np.array(value, dtype=np.float64)
            named[name].zero_grad()

    def describe(self) -> Dict[str, Any]:
        return {
            "dims": self.dims.to_dict(),
            "hidden_size": self.hidden_size,
            "topics_K": self.topics_K,
            "modalities": list(self.modalities),
            "topic_input": self.topic_input,
            "dropout_rate": self.dropout_rate,
        }


def init_params(
    dims: FeatureDims,
    hidden_size: int,
    topics_K: int,
    seed: int = 0,
    modalities: Sequence[str] = ALL_MODALITIES,
    topic_input: str = "projection",
    dropout_rate: float = 0.3,
    zero: bool = False,
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases, seeded."""
    layout = Layout.build(modalities, dims)
    rng = np.random.default_rng(seed)

    def weight(name: str, rows: int, cols: int) -> Parameter:
        limit = 1.0 / np.sqrt(rows)
        value = rng.uniform(-limit, limit, size=(rows, cols))
        return Parameter(name, np.zeros((rows, cols)) if zero else value)

    def bias(name: str, cols: int) -> Parameter:
        return Parameter(name, np.zeros((1, cols)))

    anchor_width = layout.widths[layout.anchor]
    fusion = FusionParams()
    for partner in layout.partners:
        prefix = f"fusion.proj_{partner[0]}"
        fusion.projections[partner] = Projection(
            weight(f"{prefix}.W", anchor_width, layout.widths[partner]),
            bias(f"{prefix}.b", layout.widths[partner]),
        )

    d_in, h = layout.lstm_input_size, hidden_size
    gates = {
        name: Gate(
            weight(f"lstm.{name}.W", d_in, h),
            weight(f"lstm.{name}.U", h, h),
            bias(f"lstm.{name}.b", h),
        )
        for name in GATES
    }
    d_pool = layout.pool_width(topic_input)
    heads = Heads(
        emp_W=weight("heads.emp.W", h, NUM_CLASSES),
        emp_b=bias("heads.emp.b", NUM_CLASSES),
        dis_W=weight("heads.dis.W", d_pool, topics_K),
        dis_b=bias("heads.dis.b", topics_K),
    )
    return ModelParams(
        dims=dims,
        fusion=fusion,
        lstm=LstmParams(**gates),
        heads=heads,
        modalities=layout.modalities,
        topic_input=topic_input,
        dropout_rate=dropout_rate,
    )


def params_from_config(dims: FeatureDims, cfg: TrainConfig, zero: bool = False) -> ModelParams:
    return init_params(
        dims,
        hidden_size=cfg.hidden_size,
        topics_K=cfg.topics_K,
        seed=cfg.seed,
        modalities=cfg.modalities,
        topic_input=cfg.topic_input,
        dropout_rate=cfg.dropout_rate,
        zero=zero,
    )


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except DimensionError as e:
        if e.stage is not None:
            raise
        raise DimensionError(str(e), e.shapes, stage=name) from e


def project_text(k_t, params: ModelParams, pairing: str) -> Node:
    """tanh(K_T W + b) aligning the anchor features with the partner's width."""
    proj = params.fusion.projections.get(pairing)
    if proj is None:
        raise ConfigurationError(f"model has no {pairing} projection")
    return tanh_map(affine(k_t, proj.W, proj.b))


@dataclass
class BimodalFeature:
    """Output of cross-modal combination with its attention maps."""

    combined: Node
    affinity: Node
    attn_modality: Node
    attn_text: Node
    context: Node

    @property
    def affinity_modality(self) -> Node:
        return transpose(self.affinity)


def cross_modal_combine(k_t_proj, k_m) -> BimodalFeature:
    """Two-way attention between projected text and one modality.

    ``attn_modality`` (n_m x n_t) distributes each modality step over text
    tokens; ``attn_text`` (n_t x n_m) distributes each token over modality
    steps. The result is ``attn_text @ [k_m, attn_modality @ k_t_proj]``.
    """
    k_t_proj = k_t_proj if isinstance(k_t_proj, Node) else Node(k_t_proj)
    k_m = k_m if isinstance(k_m, Node) else Node(k_m)
    if k_t_proj.cols != k_m.cols:
        raise DimensionError("cross_modal_combine: feature widths differ", [k_t_proj.shape, k_m.shape])
    affinity = matmul(k_t_proj, transpose(k_m))
    attn_text = row_softmax(affinity)
    attn_modality = row_softmax(transpose(affinity))
    context = matmul(attn_modality, k_t_proj)
    combined = matmul(attn_text, concat_cols([k_m, context]))
    return BimodalFeature(combined, affinity, attn_modality, attn_text, context)


def lstm_final_state(x: Node, lstm: LstmParams) -> Node:
    """Run the LSTM over the rows of ``x`` from zero state; return the last hidden state."""
    if x.cols != lstm.input_size:
        raise DimensionError("LSTM input width", [x.shape, lstm.input.W.shape])
    gates = lstm.gates()
    pre = {name: affine(x, gate.W, gate.b) for name, gate in gates.items()}
    h = Node(np.zeros((1, lstm.hidden_size)))
    c = Node(np.zeros((1, lstm.hidden_size)))
    for t in range(x.rows):

        def gate_input(name: str) -> Node:
            return take_row(pre[name], t) + matmul(h, gates[name].U)

        i = sigmoid_map(gate_input("input"))
        f = sigmoid_map(gate_input("forget"))
        o = sigmoid_map(gate_input("output"))
        g = tanh_map(gate_input("candidate"))
        c = mul(f, c) + mul(i, g)
        h = mul(o, tanh_map(c))
    return h


def aggregate_features(parts: Sequence, lstm: LstmParams) -> Node:
    """Feature-axis concatenation of equal-length sequences, then the LSTM."""
    return lstm_final_state(concat_cols(parts), lstm)


def aggregate(c_tv, c_ta, k_t, lstm: LstmParams) -> Node:
    """L_agg = LSTM([C_TV, C_TA, K_T])."""
    return aggregate_features([c_tv, c_ta, k_t], lstm)


def dropout_mask(shape: Tuple[int, int], rate: float, seed: int) -> np.ndarray:
    """Inverted-dropout mask: kept units scaled by 1 / (1 - rate)."""
    rng = np.random.default_rng(seed)
    return (rng.random(shape) >= rate).astype(np.float64) / (1.0 - rate)


def predict_empathy(
    l_agg: Node,
    heads: Heads,
    training_mode: bool = False,
    dropout_seed: int = 0,
    rate: float = 0.3,
) -> Node:
    """Class probabilities for the three empathy levels."""
    if training_mode and rate > 0.0:
        l_agg = mul(l_agg, dropout_mask(l_agg.shape, rate, dropout_seed))
    return row_softmax(affine(l_agg, heads.emp_W, heads.emp_b))


def predict_topics(pool_input, heads: Heads) -> Node:
    """Mean-pool over tokens, then affine + softmax onto the K-simplex."""
    return row_softmax(affine(mean_rows(pool_input), heads.dis_W, heads.dis_b))


@dataclass
class ForwardOutput:
    y_emp: Node
    y_dis: Node
    target: Optional[int]
    l_agg: Node
    attention: Dict[str, BimodalFeature]
    tape: Any = None

    def empathy_probs(self) -> np.ndarray:
        return self.y_emp.value[0].copy()

    def topic_distribution(self) -> TopicDistribution:
        return TopicDistribution(self.y_dis.value[0])

    def predicted_class(self) -> int:
        return int(np.argmax(self.y_emp.value[0]))


def check_sample(sample: ConversationSample, params: ModelParams) -> None:
    """Raise DimensionError naming the first used modality whose width disagrees."""
    widths = modality_widths(params.dims)
    for name in params.modalities:
        matrix = sample.modality(name)
        if matrix.ndim != 2 or matrix.shape[1] != widths[name]:
            raise DimensionError(
                f"sample {sample.id!r} field '{name}' width does not match the model",
                [matrix.shape, (matrix.shape[0] if matrix.ndim else 0, widths[name])],
                stage="input",
            )


def forward(
    sample: ConversationSample,
    params: ModelParams,
    label_target: Optional[str] = "ee",
    training_mode: bool = False,
    seed: int = 0,
) -> ForwardOutput:
    """Full forward pass; records on the caller's active tape, if any."""
    check_sample(sample, params)
    layout = params.layout
    anchor = Node(sample.modality(layout.anchor))

    bimodal: Dict[str, BimodalFeature] = {}
    projections: Dict[str, Node] = {}
    for partner in layout.partners:
        with _stage(f"project_text[{partner}]"):
            projections[partner] = project_text(anchor, params, partner)
        with _stage(f"cross_modal_combine[{partner}]"):
            bimodal[partner] = cross_modal_combine(
                projections[partner], Node(sample.modality(partner))
            )

    with _stage("aggregate"):
        parts = [bimodal[p].combined for p in layout.partners] + [anchor]
        l_agg = aggregate_features(parts, params.lstm)
    with _stage("predict_empathy"):
        y_emp = predict_empathy(l_agg, params.heads, training_mode, seed, params.dropout_rate)
    with _stage("predict_topics"):
        if params.topic_input == "projection" and layout.partners:
            pool_input = projections[layout.partners[0]]
        else:
            pool_input = anchor
        y_dis = predict_topics(pool_input, params.heads)

    target = sample.labels[label_target] if label_target is not None else None
    return ForwardOutput(y_emp, y_dis, target, l_agg, bimodal, tape=active_tape())


def encode_matrix(value: np.ndarray) -> Dict[str, Any]:
    return {"shape": list(value.shape), "values": value.reshape(-1).tolist()}


def decode_matrix(payload: Dict[str, Any]) -> np.ndarray:
    return np.asarray(payload["values"], dtype=np.float64).reshape(payload["shape"])


@dataclass
class Checkpoint:
    """Parameters plus the configuration and resumable state they came from."""

    params: ModelParams
    config: Optional[TrainConfig] = None
    state: Dict[str, Any] = field(default_factory=dict)


def checkpoint_payload(ckpt: Checkpoint) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": ckpt.params.describe(),
        "parameters": [
            {"name": p.name, **encode_matrix(p.value)} for p in ckpt.params.parameters()
        ],
        "config": None if ckpt.config is None else ckpt.config.model_dump(mode="json"),
        "state": ckpt.state,
    }


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_payload(ckpt)), encoding="utf-8")
    logger.debug(f"Checkpoint written: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise PreconditionError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
    model = payload["model"]
    params = init_params(
        FeatureDims(**model["dims"]),
        hidden_size=model["hidden_size"],
        topics_K=model["topics_K"],
        modalities=model["modalities"],
        topic_input=model["topic_input"],
        dropout_rate=model["dropout_rate"],
        zero=True,
    )
    params.load_state_dict({p["name"]: decode_matrix(p) for p in payload["parameters"]})
    config = None if payload["config"] is None else TrainConfig(**payload["config"])
    return Checkpoint(params=params, config=config, state=payload.get("state") or {})


def predict_classes(params: ModelParams, samples: Sequence[ConversationSample]) -> List[int]:
    """Evaluation-mode argmax class per sample; ties go to the lowest class."""
    with suspend_tape():
        return [forward(s, params, None, training_mode=False).predicted_class() for s in samples]
