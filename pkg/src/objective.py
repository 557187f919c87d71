"""Training objective: empathy cross-entropy, topic KL divergence and their weighted sum.

The empathy term is -log p(y) on the predicted class probabilities (the
one-hot target weights the log-probabilities). The topic term is
KL(predicted || target) by default; the target is a constant.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from config.settings import LossWeights
from src.errors import DimensionError, PreconditionError
from src.lda import TopicDistribution
from src.numcore import DTYPE, Node, add, apply_op, as_node, scale

logger = logging.getLogger(__name__)

EPS = 1e-12
NUM_CLASSES = 3

Scalar = Union[float, Node]


def cross_entropy(y_hat, y: int) -> Node:
    """-log(max(y_hat[y], 1e-12)) for a 1 x 3 probability row."""
    y_hat = as_node(y_hat)
    if y_hat.shape != (1, NUM_CLASSES):
        raise DimensionError("cross_entropy expects a 1 x 3 probability row", [y_hat.shape])
    if not 0 <= int(y) < NUM_CLASSES:
        raise PreconditionError(f"class {y} out of range 0..{NUM_CLASSES - 1}")
    y = int(y)

    def forward_fn(p: np.ndarray) -> np.ndarray:
        return np.array([[-np.log(max(p[0, y], EPS))]], dtype=DTYPE)

    def vjp_factory(out, p):
        def vjp(g):
            grad = np.zeros_like(p)
            if p[0, y] > EPS:
                grad[0, y] = -g[0, 0] / p[0, y]
            return (grad,)

        return vjp

    return apply_op("cross_entropy", forward_fn, vjp_factory, y_hat)


def kl_loss(y_hat_dis, y_dis: TopicDistribution, direction: str = "forward") -> Node:
    """KL divergence between the predicted and target topic distributions.

    ``forward``: sum_j yhat_j * ln(yhat_j / max(y_j, eps)), with 0 ln 0 = 0.
    ``reverse``: sum_j y_j * ln(y_j / max(yhat_j, eps)).
    """
    y_hat_dis = as_node(y_hat_dis)
    target = y_dis.probs if isinstance(y_dis, TopicDistribution) else np.asarray(y_dis, dtype=DTYPE)
    target = target.reshape(1, -1)
    if y_hat_dis.shape != target.shape:
        raise DimensionError("kl_loss: topic counts differ", [y_hat_dis.shape, target.shape])
    floor = np.maximum(target, EPS)

    if direction == "forward":

        def forward_fn(p: np.ndarray) -> np.ndarray:
            positive = p > 0
            terms = np.zeros_like(p)
            terms[positive] = p[positive] * np.log(p[positive] / floor[positive])
            return np.array([[terms.sum()]], dtype=DTYPE)

        def vjp_factory(out, p):
            def vjp(g):
                grad = np.zeros_like(p)
                positive = p > 0
                grad[positive] = np.log(p[positive] / floor[positive]) + 1.0
                return (g[0, 0] * grad,)

            return vjp

    elif direction == "reverse":

        def forward_fn(p: np.ndarray) -> np.ndarray:
            positive = target > 0
            q = np.maximum(p, EPS)
            terms = np.zeros_like(p)
            terms[positive] = target[positive] * np.log(target[positive] / q[positive])
            return np.array([[terms.sum()]], dtype=DTYPE)

        def vjp_factory(out, p):
            def vjp(g):
                grad = np.where(p > EPS, -target / np.maximum(p, EPS), 0.0)
                return (g[0, 0] * grad,)

            return vjp

    else:
        raise PreconditionError(f"unknown KL direction {direction!r}")

    return apply_op(f"kl_{direction}", forward_fn, vjp_factory, y_hat_dis)


def total_loss(l_s: Scalar, l_t: Scalar, w: Optional[LossWeights] = None) -> Scalar:
    """w_s * l_s + w_t * l_t, on tape nodes or plain floats."""
    w = w or LossWeights()
    if isinstance(l_s, Node) or isinstance(l_t, Node):
        return add(scale(as_node(l_s), w.w_s), scale(as_node(l_t), w.w_t))
    if l_s < 0 or l_t < 0:
        raise PreconditionError("loss terms must be non-negative")
    return w.w_s * l_s + w.w_t * l_t


@dataclass
class SampleLoss:
    sample_id: str
    l_s: float
    l_t: Optional[float]
    total: float


@dataclass
class LossReport:
    """Epoch-level loss summary; l_s and l_t are means over samples."""

    l_s: float
    l_t: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    per_sample: List[SampleLoss] = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: List[SampleLoss], weights: LossWeights) -> "LossReport":
        """Means over samples; l_t averages only over samples that have a topic target."""
        l_s = float(np.mean([s.l_s for s in samples])) if samples else 0.0
        topic_terms = [s.l_t for s in samples if s.l_t is not None]
        l_t = float(np.mean(topic_terms)) if topic_terms else 0.0
        return cls(l_s, l_t, total_loss(l_s, l_t, weights), weights, list(samples))

    def to_dict(self) -> Dict[str, float]:
        return {"l_s": self.l_s, "l_t": self.l_t, "total": self.total}
