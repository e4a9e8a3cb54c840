"""Dense-matrix helpers, seeded randomness and top-k selection.

Matrices are plain 2-D ``numpy.float64`` arrays. Everything that needs
randomness takes an :class:`Rng`, which can be forked by label into
independent substreams so results never depend on call order.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class Rng:
    """Splittable PCG64 stream.

    ``fork(label)`` derives a child keyed only on the parent's path and the
    label, so the child's sequence is the same no matter how many draws the
    parent has already made.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ContractError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def fork(self, label: str) -> Rng:
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return Rng(self.seed, self.path + (int.from_bytes(digest, "little"),))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return std * self.generator.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, depth={len(self.path)})"


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.array(values, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"matrix must be 2-D, got shape {m.shape}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ContractError(f"expected {rows}x{cols} matrix, got {m.shape[0]}x{m.shape[1]}")
    return m


def mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated left to right over the inner index.

    The summation order matches a naive ``for k`` loop exactly (one rounding
    per multiply and per add, no fused operations), so results are
    reproducible bit-for-bit independently of the BLAS in use.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("mat_mul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def gaussian_fill(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    if not std > 0:
        raise ContractError(f"std must be positive, got {std}")
    return rng.normal((rows, cols), std)


def frobenius_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def top_k_indices(scores: Sequence[float], k: int, alive: Sequence[bool] | None = None) -> list[int]:
    """Indices of the ``k`` largest alive scores, lower index first on ties.

    Returned in ascending index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    alive = np.ones(len(scores), dtype=bool) if alive is None else np.asarray(alive, dtype=bool)
    if alive.shape != scores.shape:
        raise ContractError("scores and alive must have the same length")
    candidates = np.flatnonzero(alive)
    if k < 0 or k > len(candidates):
        raise ContractError(f"k={k} exceeds the {len(candidates)} alive positions")
    if not np.all(np.isfinite(scores[candidates])):
        raise ContractError("scores must be finite at alive positions")
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((candidates, -scores[candidates]))
    return sorted(int(i) for i in candidates[order[:k]])
