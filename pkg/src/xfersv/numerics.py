"""Deterministic numeric kernel: dense float64 matrices and a seeded PRNG.

Matrices are plain numpy arrays (2-D, float64, C-order). The helpers here
add the shape/ finiteness checks the rest of the library relies on, plus
numerically stable softmax / log-sum-exp.

PRNG: all randomness in the library flows through :class:`Rng`, which wraps
numpy's Philox 4x64 counter-based generator. Philox streams are fully
determined by the 64-bit key and are identical across platforms, so a seed
written into a manifest reproduces the exact same corpus, batches and
initializations anywhere.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DegenerateInputError, ShapeError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a 2-D float64 array.

    Raises ShapeError if `a` is not 2-D or contains non-finite entries.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} contains non-finite entries")
    return m


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and return `v` as a 1-D float64 array."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={a.ndim}")
    if a.size == 0:
        raise ShapeError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Standard matrix product; raises ShapeError on inner-dim mismatch."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def gram(x) -> np.ndarray:
    """Pairwise inner products x @ x.T of a B x F batch, symmetrized.

    The product is symmetrized as (G + G.T) / 2 once so the result is
    bit-identical to its transpose; downstream losses assume symmetry.
    """
    x = as_matrix(x, "x")
    g = x @ x.T
    return (g + g.T) / 2.0


def softmax(logits) -> np.ndarray:
    """Row-wise (or 1-D) softmax with max-subtraction for stability."""
    a = np.asarray(logits, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("softmax of empty input")
    if not np.all(np.isfinite(a)):
        raise ShapeError("softmax input contains non-finite entries")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    """Row-wise log softmax, computed without intermediate underflow."""
    a = np.asarray(logits, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("log_softmax of empty input")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_sum_exp(v) -> float:
    """log(sum(exp(v))) computed as m + log(sum(exp(v - m))), m = max(v)."""
    a = as_vector(v, "log_sum_exp input")
    m = float(np.max(a))
    return m + float(np.log(np.sum(np.exp(a - m))))


def l2_normalize(v) -> np.ndarray:
    """v / ||v||_2; raises DegenerateInputError on (near-)zero vectors."""
    a = as_vector(v, "l2_normalize input")
    n = float(np.linalg.norm(a))
    if n == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return a / n


def l2_normalize_rows(x) -> np.ndarray:
    """Row-wise L2 normalization of a B x F matrix."""
    m = as_matrix(x, "l2_normalize_rows input")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("matrix has a zero-norm row")
    return m / norms


def derive_seed(root_seed: int, stage: str) -> int:
    """Derive a 64-bit per-stage seed from a root seed and a stage name.

    The derivation is SHA-256 over "<root_seed>:<stage>", truncated to the
    first 8 bytes (little-endian). Documented so stages can be reproduced
    independently of the full pipeline.
    """
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded PRNG with a fixed, platform-independent stream.

    Backed by numpy's Philox 4x64 counter-based bit generator keyed by the
    64-bit seed. Single-owner mutable state: do not share one instance
    across concurrent tasks.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, stage: str) -> "Rng":
        """Independent child generator for a named stage (see derive_seed)."""
        return Rng(derive_seed(self.seed, stage))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
