"""Tests for the collapsed Gibbs topic model."""

import time
from itertools import permutations

import numpy as np
import pytest

from src.errors import EmptyAfterFilterError, LdaError, PreconditionError
from src.lda import (
    LdaModel,
    TopicDistribution,
    Vocabulary,
    align_topics,
    doc_topic_distribution,
    fit,
    fit_documents,
    fold_in,
    load_lda,
    log_joint,
    save_lda,
    top_words,
    total_variation,
)


def planted_corpus(seed, docs=200, length=50, words=20):
    """Two disjoint vocabularies; every document drawn from a single topic."""
    rng = np.random.default_rng(seed)
    corpus = []
    for d in range(docs):
        topic = d % 2
        corpus.append(list(rng.integers(words, size=length) + topic * words))
    reference = np.zeros((2, 2 * words))
    reference[0, :words] = 1.0 / words
    reference[1, words:] = 1.0 / words
    return corpus, reference


def hand_model(assignments, K=2, alpha=0.1, beta=0.01, V=3):
    docs = [np.zeros(len(z), dtype=np.int64) for z in assignments]
    z = [np.asarray(a, dtype=np.int64) for a in assignments]
    nkw = np.zeros((K, V), dtype=np.int64)
    ndk = np.zeros((len(docs), K), dtype=np.int64)
    for d, (doc, zd) in enumerate(zip(docs, z)):
        for w, k in zip(doc, zd):
            nkw[k, w] += 1
            ndk[d, k] += 1
    return LdaModel(K, alpha, beta, Vocabulary(["a", "b", "c"]), docs, z, nkw, nkw.sum(1), ndk, 0)


class TestVocabulary:
    """Token/id bijection."""

    def test_dense_ids(self):
        """Ids are dense in first-seen order and round trip."""
        vocab = Vocabulary.from_documents([["x", "y"], ["y", "z"]])
        assert [vocab.id_of(t) for t in ("x", "y", "z")] == [0, 1, 2]
        assert all(vocab.token(vocab.id_of(t)) == t for t in vocab.tokens)
        assert vocab.encode(["z", "unknown", "x"]) == [2, 0]


class TestFit:
    """Sampler behaviour and count invariants."""

    def test_single_topic(self):
        """With K=1 every assignment is topic 0 and every distribution is [1.0]."""
        model = fit([[0, 1, 2], [2, 2]], K=1, sweeps=5)
        assert all(np.all(z == 0) for z in model.assignments)
        for d in range(model.D):
            assert np.array_equal(doc_topic_distribution(model, d).probs, [1.0])

    def test_counts_consistent_after_every_sweep(self):
        """Recounting from assignments reproduces the count matrices after each sweep."""
        rng = np.random.default_rng(0)
        corpus = [list(rng.integers(15, size=rng.integers(1, 12))) for _ in range(25)]
        sweeps_seen = []

        def check(sweep, model):
            model.check_consistency()
            assert np.array_equal(model.topic_word_counts.sum(axis=1), model.topic_totals)
            assert all(
                model.doc_topic_counts[d].sum() == len(model.docs[d]) for d in range(model.D)
            )
            sweeps_seen.append(sweep)

        fit(corpus, K=4, sweeps=10, seed=1, on_sweep=check)
        assert sweeps_seen == list(range(10))

    def test_deterministic(self):
        """Identical inputs and seed give identical models."""
        corpus, _ = planted_corpus(0, docs=20, length=10)
        a = fit(corpus, K=2, sweeps=15, seed=9)
        b = fit(corpus, K=2, sweeps=15, seed=9)
        assert np.array_equal(a.topic_word_counts, b.topic_word_counts)
        assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))
        assert a.log_joint_trace == b.log_joint_trace

    def test_empty_document(self):
        """Empty documents are rejected."""
        with pytest.raises(LdaError):
            fit([[0, 1], []], K=2, sweeps=1)

    def test_bad_arguments(self):
        """K and sweeps must be at least one."""
        with pytest.raises(PreconditionError):
            fit([[0]], K=0)
        with pytest.raises(PreconditionError):
            fit([[0]], K=1, sweeps=0)

    def test_k_larger_than_tokens_warns(self, caplog):
        """More topics than tokens still runs, with a warning."""
        model = fit([[0, 1]], K=5, sweeps=2)
        assert model.K == 5
        assert "exceeds the corpus token count" in caplog.text

    def test_repeated_token_concentrates(self):
        """One document repeating one token ends up nearly single-topic."""
        passes = 0
        for seed in range(20):
            model = fit([[0] * 30], K=2, alpha=0.01, sweeps=200, seed=seed)
            p = doc_topic_distribution(model, 0).probs
            entropy = -np.sum(p * np.log(p))
            passes += entropy < 0.3
        assert passes >= 18

    def test_log_joint_matches_trace(self):
        """One entry for the initial state plus one per sweep, ending at the current log joint."""
        model = fit([[0, 1, 1], [2, 0]], K=2, sweeps=3)
        assert model.log_joint_trace[-1] == log_joint(model)
        assert len(model.log_joint_trace) == 4
        assert model.sweeps_done == 3


class TestDistributions:
    """Document-topic distributions, fold-in and topic words."""

    def test_closed_form(self):
        """All ten tokens on topic 0 with alpha 0.1 gives 10.1/10.2 and 0.1/10.2."""
        model = hand_model([[0] * 10])
        p = doc_topic_distribution(model, 0).probs
        assert p == pytest.approx([10.1 / 10.2, 0.1 / 10.2], abs=1e-12)
        assert p == pytest.approx([0.990196, 0.009804], abs=1e-6)

    def test_prior_dominance(self):
        """A huge alpha pulls the distribution towards uniform."""
        model = hand_model([[0, 1, 2, 3] * 2], K=4, alpha=1000.0)
        assert doc_topic_distribution(model, 0).probs == pytest.approx([0.25] * 4, abs=1e-3)

    def test_simplex_invariant(self):
        """Every document distribution sums to 1 within 1e-9 with entries in [0, 1]."""
        rng = np.random.default_rng(3)
        for trial in range(20):
            corpus = [list(rng.integers(10, size=rng.integers(1, 8))) for _ in range(6)]
            model = fit(corpus, K=int(rng.integers(1, 6)), sweeps=3, seed=trial)
            for d in range(model.D):
                p = doc_topic_distribution(model, d).probs
                assert abs(p.sum() - 1.0) <= 1e-9
                assert np.all((p >= 0) & (p <= 1))

    def test_index_out_of_range(self):
        """Unknown document indices raise IndexError."""
        model = fit([[0, 1]], K=2, sweeps=1)
        with pytest.raises(IndexError):
            doc_topic_distribution(model, 1)

    def test_topic_distribution_validation(self):
        """Probability vectors off the simplex are rejected."""
        with pytest.raises(PreconditionError):
            TopicDistribution(np.array([0.6, 0.6]))

    def test_fold_in_single_topic(self):
        """With K=1 fold-in returns [1.0]."""
        model = fit_documents([["a", "b"], ["b", "c"]], K=1, sweeps=2)
        assert np.array_equal(fold_in(model, ["a", "c"]).probs, [1.0])

    def test_fold_in_unknown_tokens(self):
        """A document of unknown tokens is empty after filtering."""
        model = fit_documents([["a", "b"]], K=2, sweeps=2)
        with pytest.raises(EmptyAfterFilterError):
            fold_in(model, ["zzz", "qqq"])

    def test_fold_in_matches_training_document(self):
        """Folding in a training document lands near its training distribution."""
        corpus, _ = planted_corpus(1, docs=40, length=40)
        model = fit(corpus, K=2, sweeps=60, seed=0)
        distances = [
            total_variation(
                fold_in(model, corpus[3], sweeps=30, seed=s).probs,
                doc_topic_distribution(model, 3).probs,
            )
            for s in range(20)
        ]
        assert np.median(distances) < 0.15

    def test_top_words_single_token_topic(self):
        """A topic whose counts sit on one token lists it first."""
        model = hand_model([[0, 0, 0]], K=2)
        words = top_words(model, 0, n=3)
        assert words[0][0] == "a"
        assert words[0][1] > words[1][1]
        assert words[1][0] == "b"

    def test_top_words_full_vocabulary_sums_to_one(self):
        """Probabilities over the whole vocabulary sum to 1."""
        model = fit([[0, 1, 2, 3], [3, 3, 1]], K=2, sweeps=5)
        for k in range(model.K):
            assert sum(p for _, p in top_words(model, k, n=model.V)) == pytest.approx(1.0, abs=1e-12)

    def test_top_words_range(self):
        """Topic index must be below K."""
        model = fit([[0, 1]], K=2, sweeps=1)
        with pytest.raises(IndexError):
            top_words(model, 2)


class TestAlignment:
    """Hungarian alignment of learned topics."""

    def test_matches_brute_force(self):
        """The assignment agrees with enumerating every permutation."""
        rng = np.random.default_rng(6)
        for _ in range(10):
            learned = rng.dirichlet(np.ones(5), size=3)
            reference = rng.dirichlet(np.ones(5), size=3)
            perm = align_topics(learned, reference)

            def cost(p):
                return sum(total_variation(learned[p[j]], reference[j]) for j in range(3))

            best = min(permutations(range(3)), key=cost)
            assert cost(perm) == pytest.approx(cost(best))


class TestPersistence:
    """JSON save/load."""

    def test_round_trip(self, tmp_path):
        """Loading a saved model reproduces counts and priors exactly."""
        model = fit_documents([["a", "b", "a"], ["c", "b"]], K=2, sweeps=4, seed=2)
        loaded = load_lda(save_lda(model, tmp_path / "lda.json"))
        assert (loaded.K, loaded.alpha, loaded.beta, loaded.seed) == (2, model.alpha, model.beta, 2)
        assert loaded.vocab.tokens == model.vocab.tokens
        assert np.array_equal(loaded.topic_word_counts, model.topic_word_counts)
        assert np.array_equal(loaded.doc_topic_counts, model.doc_topic_counts)
        assert save_lda(loaded, tmp_path / "again.json").read_bytes() == (
            tmp_path / "lda.json"
        ).read_bytes()


@pytest.mark.slow
class TestPlantedRecovery:
    """Recovery of planted topics at full scale."""

    def test_recovers_planted_topics(self):
        """Aligned topics are within 0.1 total variation and top words stay in vocabulary."""
        corpus, reference = planted_corpus(0)
        started = time.perf_counter()
        model = fit(corpus, K=2, sweeps=500, seed=0)
        assert time.perf_counter() - started < 60.0
        learned = model.topic_word_matrix()
        perm = align_topics(learned, reference)
        for j in range(2):
            assert total_variation(learned[perm[j]], reference[j]) < 0.1
            planted = set(range(j * 20, (j + 1) * 20))
            tops = {int(t) for t, _ in top_words(model, perm[j], 10)}
            assert tops <= planted

    @pytest.mark.parametrize("seed", range(20))
    def test_log_joint_trend(self, seed):
        """The median log joint of the last 10 entries is at least that of the first 10."""
        corpus, _ = planted_corpus(0)
        trace = fit(corpus, K=2, sweeps=500, seed=seed).log_joint_trace
        assert len(trace) == 501
        assert np.median(trace[-10:]) >= np.median(trace[:10])
