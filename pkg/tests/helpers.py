"""Builders shared by the test modules."""

from src.dataio import ConversationSample, EmpathyLabels, FeatureDims


def make_sample(rng, sample_id="s0", dims=FeatureDims(4, 3, 3), lengths=(3, 2, 2), level=1, doc=None):
    """A random sample; every empathy label is set to ``level``."""
    n_t, n_a, n_v = lengths
    return ConversationSample(
        id=sample_id,
        text=rng.normal(size=(n_t, dims.d_t)),
        audio=rng.normal(size=(n_a, dims.d_a)),
        video=rng.normal(size=(n_v, dims.d_v)),
        labels=EmpathyLabels(level, level, level),
        doc_tokens=None if doc is None else tuple(doc),
    )
