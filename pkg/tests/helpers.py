"""Shared construction helpers for the test suite."""

import numpy as np

from xfersv.losses import LabeledBatch
from xfersv.numerics import softmax


def rng(seed=0):
    return np.random.default_rng(seed)


def random_orthogonal(dim, seed=0):
    q, r = np.linalg.qr(rng(seed).normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def random_labels(gen, b, n_labels):
    """B labels guaranteed to cover >= 2 distinct values."""
    while True:
        lab = gen.integers(0, n_labels, size=b)
        if np.unique(lab).size >= 2:
            return lab


def random_batch(seed, b=4, f=3, c=5, scale=1.0):
    gen = rng(seed)
    t = gen.normal(size=(b, f)) * scale
    s = gen.normal(size=(b, f)) * scale
    logits = gen.normal(size=(b, c)) * scale
    post = softmax(gen.normal(size=(b, c)))
    labels = random_labels(gen, b, c)
    return LabeledBatch(teacher_embeddings=t, student_embeddings=s,
                        student_logits=logits, teacher_posteriors=post, labels=labels)
