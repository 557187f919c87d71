"""Collapsed Gibbs sampling LDA over supervisory documents.

The sampler integrates out the document-topic and topic-word multinomials and
resamples one token assignment at a time from

    p(z = k | rest) ∝ (n_dk + alpha) * (n_kw + beta) / (n_k + V * beta)

with every count excluding the token being resampled.
"""

import json
import logging
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from src.errors import EmptyAfterFilterError, LdaError, PreconditionError

logger = logging.getLogger(__name__)

LDA_FORMAT = "lda-model"
LDA_FORMAT_VERSION = 1

Token = Union[int, str]


class Vocabulary:
    """Dense token <-> id bijection, ids in first-seen order."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._ids: Dict[str, int] = {}
        self._tokens: List[str] = []
        for token in tokens:
            self.add(token)

    @classmethod
    def from_documents(cls, documents: Iterable[Sequence[str]]) -> "Vocabulary":
        vocab = cls()
        for doc in documents:
            for token in doc:
                vocab.add(token)
        return vocab

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> Optional[int]:
        return self._ids.get(token)

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def encode(self, document: Sequence[str]) -> List[int]:
        """Ids of known tokens; unknown tokens are dropped."""
        return [self._ids[t] for t in document if t in self._ids]


@dataclass(frozen=True)
class TopicDistribution:
    """A point on the K-simplex."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if probs.size == 0:
            raise PreconditionError("topic distribution is empty")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise PreconditionError("topic probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise PreconditionError(f"topic probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", probs)

    @property
    def K(self) -> int:
        return self.probs.size

    def dominant(self) -> int:
        return int(np.argmax(self.probs))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TopicDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())


@dataclass
class LdaModel:
    """Counts, assignments and priors of a fitted collapsed-Gibbs LDA."""

    K: int
    alpha: float
    beta: float
    vocab: Vocabulary
    docs: List[np.ndarray]
    assignments: List[np.ndarray]
    topic_word_counts: np.ndarray
    topic_totals: np.ndarray
    doc_topic_counts: np.ndarray
    seed: int
    sweeps_done: int = 0
    log_joint_trace: List[float] = field(default_factory=list)

    @property
    def V(self) -> int:
        return len(self.vocab)

    @property
    def D(self) -> int:
        return len(self.docs)

    def check_consistency(self) -> None:
        """Recount from assignments and compare with the stored count matrices."""
        nkw, nk, ndk = _count(self.docs, self.assignments, self.K, self.V)
        if not np.array_equal(nkw, self.topic_word_counts):
            raise LdaError("topic-word counts disagree with assignments")
        if not np.array_equal(nk, self.topic_totals):
            raise LdaError("topic totals disagree with assignments")
        if not np.array_equal(ndk, self.doc_topic_counts):
            raise LdaError("document-topic counts disagree with assignments")
        if np.any(self.topic_word_counts < 0) or np.any(self.doc_topic_counts < 0):
            raise LdaError("negative count")

    def topic_word_matrix(self) -> np.ndarray:
        """Smoothed topic-word probabilities, one row per topic."""
        return (self.topic_word_counts + self.beta) / (
            self.topic_totals[:, None] + self.V * self.beta
        )


def _count(
    docs: Sequence[np.ndarray], assignments: Sequence[np.ndarray], K: int, V: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nkw = np.zeros((K, V), dtype=np.int64)
    ndk = np.zeros((len(docs), K), dtype=np.int64)
    for d, (doc, z) in enumerate(zip(docs, assignments)):
        np.add.at(nkw, (z, doc), 1)
        np.add.at(ndk[d], z, 1)
    return nkw, nkw.sum(axis=1), ndk


def _draw(cumulative: List[float], target: float) -> int:
    """First index whose running mass exceeds ``target``."""
    return min(bisect_right(cumulative, target), len(cumulative) - 1)


def fit(
    corpus: Sequence[Sequence[int]],
    K: int,
    alpha: float = 0.1,
    beta: float = 0.01,
    sweeps: int = 500,
    seed: int = 0,
    vocab: Optional[Vocabulary] = None,
    on_sweep: Optional[Callable[[int, LdaModel], None]] = None,
) -> LdaModel:
    """Fit LDA to token-id documents with a fixed sweep budget.

    ``log_joint_trace`` starts with the random initial assignment and gains one
    entry per sweep.
    """
    if K < 1:
        raise PreconditionError(f"K must be >= 1, got {K}")
    if sweeps < 1:
        raise PreconditionError(f"sweeps must be >= 1, got {sweeps}")
    if alpha <= 0 or beta <= 0:
        raise PreconditionError("alpha and beta must be positive")
    if not corpus:
        raise LdaError("corpus is empty")
    docs = [np.asarray(doc, dtype=np.int64) for doc in corpus]
    for d, doc in enumerate(docs):
        if doc.size == 0:
            raise LdaError(f"document {d} is empty")
    V = len(vocab) if vocab is not None else int(max(doc.max() for doc in docs)) + 1
    if vocab is None:
        vocab = Vocabulary(str(i) for i in range(V))
    if any(doc.min() < 0 or doc.max() >= V for doc in docs):
        raise LdaError("token id outside the vocabulary")

    total_tokens = sum(doc.size for doc in docs)
    if K > total_tokens:
        logger.warning(f"K={K} exceeds the corpus token count {total_tokens}")
    logger.info(f"Fitting LDA: D={len(docs)}, V={V}, tokens={total_tokens}, K={K}, sweeps={sweeps}")

    rng = np.random.default_rng(seed)
    assignments = [rng.integers(K, size=doc.size) for doc in docs]
    nkw, nk, ndk = _count(docs, assignments, K, V)
    model = LdaModel(
        K=K,
        alpha=float(alpha),
        beta=float(beta),
        vocab=vocab,
        docs=docs,
        assignments=assignments,
        topic_word_counts=nkw,
        topic_totals=nk,
        doc_topic_counts=ndk,
        seed=seed,
    )
    model.log_joint_trace.append(log_joint(model))
    for sweep in range(sweeps):
        _gibbs_sweep(model, rng)
        model.sweeps_done += 1
        model.log_joint_trace.append(log_joint(model))
        logger.debug(f"sweep {sweep + 1}/{sweeps}: log joint {model.log_joint_trace[-1]:.3f}")
        if on_sweep is not None:
            on_sweep(sweep, model)
    logger.info(f"LDA finished: final log joint {model.log_joint_trace[-1]:.3f}")
    return model


def fit_documents(
    documents: Sequence[Sequence[str]],
    K: int,
    alpha: float = 0.1,
    beta: float = 0.01,
    sweeps: int = 500,
    seed: int = 0,
) -> LdaModel:
    """Build the vocabulary from token strings, then ``fit``."""
    vocab = Vocabulary.from_documents(documents)
    corpus = [vocab.encode(doc) for doc in documents]
    return fit(corpus, K, alpha, beta, sweeps, seed, vocab=vocab)


def _gibbs_sweep(model: LdaModel, rng: np.random.Generator) -> None:
    # Per-token updates run on Python lists; the count arrays are written back after the sweep.
    alpha, beta = model.alpha, model.beta
    v_beta = model.V * beta
    topics = range(model.K)
    word_topic = model.topic_word_counts.T.tolist()
    totals = model.topic_totals.tolist()
    cumulative = [0.0] * model.K
    for d, (doc, z) in enumerate(zip(model.docs, model.assignments)):
        doc_counts = model.doc_topic_counts[d].tolist()
        labels = z.tolist()
        uniforms = rng.random(doc.size).tolist()
        for i, w in enumerate(doc.tolist()):
            k = labels[i]
            counts = word_topic[w]
            doc_counts[k] -= 1
            counts[k] -= 1
            totals[k] -= 1
            mass = 0.0
            for j in topics:
                mass += (doc_counts[j] + alpha) * (counts[j] + beta) / (totals[j] + v_beta)
                cumulative[j] = mass
            k = _draw(cumulative, uniforms[i] * mass)
            labels[i] = k
            doc_counts[k] += 1
            counts[k] += 1
            totals[k] += 1
        z[:] = labels
        model.doc_topic_counts[d] = doc_counts
    model.topic_word_counts[:] = np.asarray(word_topic, dtype=np.int64).T
    model.topic_totals[:] = totals


def log_joint(model: LdaModel) -> float:
    """Collapsed log p(w, z) under the symmetric Dirichlet priors."""
    K, V, alpha, beta = model.K, model.V, model.alpha, model.beta
    words = K * (gammaln(V * beta) - V * gammaln(beta))
    words += gammaln(model.topic_word_counts + beta).sum()
    words -= gammaln(model.topic_totals + V * beta).sum()
    doc_lengths = model.doc_topic_counts.sum(axis=1)
    topics = model.D * (gammaln(K * alpha) - K * gammaln(alpha))
    topics += gammaln(model.doc_topic_counts + alpha).sum()
    topics -= gammaln(doc_lengths + K * alpha).sum()
    return float(words + topics)


def _smoothed(counts: np.ndarray, alpha: float) -> TopicDistribution:
    return TopicDistribution((counts + alpha) / (counts.sum() + counts.size * alpha))


def doc_topic_distribution(model: LdaModel, d: int) -> TopicDistribution:
    """(n_dj + alpha) / (N_d + K alpha) for training document ``d``."""
    if not 0 <= d < model.D:
        raise IndexError(f"document {d} out of range 0..{model.D - 1}")
    return _smoothed(model.doc_topic_counts[d], model.alpha)


def fold_in(model: LdaModel, new_doc: Sequence[Token], sweeps: int = 50, seed: int = 0) -> TopicDistribution:
    """Topic distribution of an unseen document with topic-word counts frozen."""
    ids = []
    for token in new_doc:
        token_id = model.vocab.id_of(token) if isinstance(token, str) else int(token)
        if token_id is not None and 0 <= token_id < model.V:
            ids.append(token_id)
    dropped = len(new_doc) - len(ids)
    if not ids:
        raise EmptyAfterFilterError("document is empty after dropping unknown tokens")
    if dropped:
        logger.warning(f"fold_in dropped {dropped} unknown tokens")
    if sweeps < 1:
        raise PreconditionError(f"sweeps must be >= 1, got {sweeps}")

    rng = np.random.default_rng(seed)
    z = rng.integers(model.K, size=len(ids))
    doc_counts = np.bincount(z, minlength=model.K).tolist()
    labels = z.tolist()
    word_probs = model.topic_word_matrix().T.tolist()
    alpha, topics = model.alpha, range(model.K)
    cumulative = [0.0] * model.K
    for _ in range(sweeps):
        uniforms = rng.random(len(ids)).tolist()
        for i, w in enumerate(ids):
            doc_counts[labels[i]] -= 1
            probs = word_probs[w]
            mass = 0.0
            for j in topics:
                mass += (doc_counts[j] + alpha) * probs[j]
                cumulative[j] = mass
            k = _draw(cumulative, uniforms[i] * mass)
            labels[i] = k
            doc_counts[k] += 1
    return _smoothed(np.asarray(doc_counts, dtype=np.int64), model.alpha)


def top_words(model: LdaModel, k: int, n: int = 10) -> List[Tuple[str, float]]:
    """The ``n`` most probable tokens of topic ``k``; ties go to the lower id."""
    if not 0 <= k < model.K:
        raise IndexError(f"topic {k} out of range 0..{model.K - 1}")
    probs = model.topic_word_matrix()[k]
    order = np.lexsort((np.arange(model.V), -probs))[:n]
    return [(model.vocab.token(int(i)), float(probs[i])) for i in order]


def align_topics(learned: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Permutation p minimising total variation between learned[p[j]] and reference[j]."""
    cost = 0.5 * np.abs(reference[:, None, :] - learned[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)]


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def save_lda(model: LdaModel, path: Union[str, Path]) -> Path:
    """Write the model as a versioned JSON container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": LDA_FORMAT,
        "version": LDA_FORMAT_VERSION,
        "K": model.K,
        "alpha": model.alpha,
        "beta": model.beta,
        "seed": model.seed,
        "sweeps_done": model.sweeps_done,
        "vocab": model.vocab.tokens,
        "docs": [doc.tolist() for doc in model.docs],
        "assignments": [z.tolist() for z in model.assignments],
        "topic_word_counts": model.topic_word_counts.tolist(),
        "doc_topic_counts": model.doc_topic_counts.tolist(),
        "log_joint_trace": model.log_joint_trace,
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    logger.info(f"Saved LDA model (K={model.K}, V={model.V}) to {path}")
    return path


def load_lda(path: Union[str, Path]) -> LdaModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != LDA_FORMAT or payload.get("version") != LDA_FORMAT_VERSION:
        raise LdaError(f"{path} is not a version {LDA_FORMAT_VERSION} LDA model")
    nkw = np.asarray(payload["topic_word_counts"], dtype=np.int64)
    model = LdaModel(
        K=payload["K"],
        alpha=payload["alpha"],
        beta=payload["beta"],
        vocab=Vocabulary(payload["vocab"]),
        docs=[np.asarray(doc, dtype=np.int64) for doc in payload["docs"]],
        assignments=[np.asarray(z, dtype=np.int64) for z in payload["assignments"]],
        topic_word_counts=nkw,
        topic_totals=nkw.sum(axis=1),
        doc_topic_counts=np.asarray(payload["doc_topic_counts"], dtype=np.int64).reshape(
            -1, payload["K"]
        ),
        seed=payload["seed"],
        sweeps_done=payload["sweeps_done"],
        log_joint_trace=list(payload["log_joint_trace"]),
    )
    model.check_consistency()
    return model
