"""Shared numeric primitives: kernels, pairwise distances, seeded randomness.

Matrices are plain ``float64`` numpy arrays of shape ``(rows, cols)``.
Random sources are :class:`numpy.random.Generator` instances backed by PCG64,
whose output stream is fixed for a given seed on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class UnsupportedOperation(TypeError):
    """The operation is not defined for the given model or attack."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice for MMD-type statistics.

    ``kind`` is ``"gaussian"`` or ``"identity"``; the identity kind yields raw
    Euclidean distances and ignores ``bandwidth``. A gaussian spec with
    ``bandwidth=None`` asks the caller to pick one with the median heuristic.
    """

    kind: str = "gaussian"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "identity"):
            raise ContractError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and self.bandwidth is not None:
            if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
                raise ContractError(f"bandwidth must be > 0, got {self.bandwidth}")

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        return KernelSpec(self.kind, float(bandwidth))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, promoting vectors to a single row."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ContractError(
            f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    return a, b


def kernel_matrix(a, b, spec: KernelSpec) -> np.ndarray:
    """Evaluate ``k(a_i, b_j)`` for every row pair."""
    a, b = _check_pair(a, b)
    if spec.kind == "identity":
        return cdist(a, b, "euclidean")
    if spec.bandwidth is None:
        raise ContractError("gaussian kernel needs a bandwidth")
    sq = cdist(a, b, "sqeuclidean")
    return np.exp(-sq / (2.0 * spec.bandwidth**2))


def median_pairwise_distance(a, b) -> float:
    """Median Euclidean distance over distinct pairs of the pooled sample.

    Falls back to 1.0 when the median is zero (all points coincide).
    """
    a, b = _check_pair(a, b)
    pooled = np.vstack([a, b])
    if pooled.shape[0] < 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("median heuristic needs non-empty samples")
    med = float(np.median(pdist(pooled, "euclidean")))
    return med if med > 0 else 1.0


def make_rng(seed) -> np.random.Generator:
    """Return a Generator; passes existing generators through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(master: int, *key: int) -> int:
    """Mix a master seed with task indices into an independent 64-bit seed."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def seeded_shuffle(indices: Sequence[int], rng) -> list[int]:
    """Return a permutation of ``indices`` drawn from ``rng``."""
    rng = make_rng(rng)
    items = list(indices)
    if len(items) < 2:
        return items
    order = rng.permutation(len(items))
    return [items[i] for i in order]
