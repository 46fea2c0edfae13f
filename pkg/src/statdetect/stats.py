"""Kernel two-sample testing: biased MMD, energy distance, the resampling
test, and the repeated-test protocols built on it (sample-size sweeps,
class-wise sweeps, benign/adversarial mixtures)."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .numerics import (
    ContractError,
    KernelSpec,
    as_matrix,
    derive_seed,
    draw_seed,
    kernel_matrix,
    make_rng,
    median_pairwise_distance,
)

# Resampled statistics within this distance of the observed one count as ties.
_TIE_TOL = 1e-10
_CHUNK = 1024


@dataclass(frozen=True)
class TestReport:
    __test__ = False

    statistic: float
    p_value: float
    alpha: float
    reject: bool
    n: int
    m: int
    bootstrap: int
    kernel: KernelSpec
    method: str = "permutation"

    @property
    def decision(self) -> str:
        return "reject" if self.reject else "accept"

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "alpha": self.alpha,
                "decision": self.decision, "n": self.n, "m": self.m, "bootstrap": self.bootstrap,
                "kernel": self.kernel.to_dict(), "method": self.method}


@dataclass(frozen=True)
class ConfidenceSweep:
    sizes: tuple[int, ...]
    acceptance: tuple[float, ...]
    repetitions: int

    @property
    def minimal_size(self) -> int | None:
        """Smallest size at which every repetition rejected."""
        for s, a in zip(self.sizes, self.acceptance):
            if a == 0.0:
                return s
        return None

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "acceptance": list(self.acceptance),
                "repetitions": self.repetitions, "minimal_size": self.minimal_size}

    def rows(self) -> list[dict]:
        return [{"size": s, "acceptance_frequency": a, "R": self.repetitions}
                for s, a in zip(self.sizes, self.acceptance)]


@dataclass
class ClasswiseResult:
    grouping: str
    per_class: dict[int, ConfidenceSweep] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def mean_minimal_size(self) -> float | None:
        """Average of the per-class minimal sizes; None when any tested class
        never reached confident detection."""
        sizes = [sw.minimal_size for sw in self.per_class.values()]
        if not sizes or any(s is None for s in sizes):
            return None
        return float(np.mean(sizes))

    def to_dict(self) -> dict:
        return {"grouping": self.grouping, "mean_minimal_size": self.mean_minimal_size,
                "per_class": {str(c): sw.to_dict() for c, sw in self.per_class.items()},
                "warnings": self.warnings}


@dataclass(frozen=True)
class MixtureGrid:
    fractions: tuple[float, ...]
    sizes: tuple[int, ...]
    acceptance: np.ndarray  # (len(fractions), len(sizes))
    repetitions: int

    def rows(self) -> list[dict]:
        return [{"benign_fraction": f, "size": s, "acceptance_frequency": float(self.acceptance[i, j]),
                 "R": self.repetitions}
                for i, f in enumerate(self.fractions) for j, s in enumerate(self.sizes)]

    def monotone(self, slack: float = 0.05) -> bool:
        """Acceptance never drops by more than ``slack`` as the benign share grows."""
        order = np.argsort(self.fractions, kind="stable")
        a = self.acceptance[order]
        return bool(np.all(np.diff(a, axis=0) >= -slack))


# ---------------------------------------------------------------- statistics

def _resolve_kernel(x1, x2, kernel: KernelSpec) -> KernelSpec:
    if kernel.kind != "gaussian":
        raise ContractError("MMD needs a gaussian kernel; use energy_distance for raw distances")
    if kernel.bandwidth is None:
        return kernel.with_bandwidth(median_pairwise_distance(x1, x2))
    return kernel


def mmd_biased(x1, x2, kernel: KernelSpec = KernelSpec()) -> float:
    """Root of the biased squared MMD estimate, same-sample diagonals included.

    A gaussian spec without bandwidth uses the median pairwise distance of
    the pooled sample.
    """
    x1, x2 = as_matrix(x1, "x1"), as_matrix(x2, "x2")
    if x1.shape[1] != x2.shape[1]:
        raise ContractError(f"feature dimension mismatch: {x1.shape[1]} vs {x2.shape[1]}")
    if not len(x1) or not len(x2):
        raise ContractError("MMD needs non-empty samples")
    spec = _resolve_kernel(x1, x2, kernel)
    sq = (kernel_matrix(x1, x1, spec).mean() + kernel_matrix(x2, x2, spec).mean()
          - 2.0 * kernel_matrix(x1, x2, spec).mean())
    return float(np.sqrt(max(sq, 0.0)))


def energy_distance(x1, x2) -> float:
    x1, x2 = as_matrix(x1, "x1"), as_matrix(x2, "x2")
    if x1.shape[1] != x2.shape[1]:
        raise ContractError(f"feature dimension mismatch: {x1.shape[1]} vs {x2.shape[1]}")
    if not len(x1) or not len(x2):
        raise ContractError("energy distance needs non-empty samples")
    d = KernelSpec("identity")
    return float(2.0 * kernel_matrix(x1, x2, d).mean() - kernel_matrix(x1, x1, d).mean()
                 - kernel_matrix(x2, x2, d).mean())


def _split_weights(n: int, m: int, b: int, rng, method: str) -> np.ndarray:
    """(n+m, b) signed weights so that ``w.T K w`` is the squared statistic of
    each resampled split."""
    total = n + m
    if method == "permutation":
        perms = rng.permuted(np.tile(np.arange(total), (b, 1)), axis=1)
        w = np.empty((b, total))
        rows = np.arange(b)[:, None]
        w[rows, perms[:, :n]] = 1.0 / n
        w[rows, perms[:, n:]] = -1.0 / m
        return w.T
    if method == "bootstrap":
        idx = rng.integers(0, total, size=(b, total))
        offs = (np.arange(b) * total)[:, None]
        first = np.bincount((idx[:, :n] + offs).ravel(), minlength=b * total).reshape(b, total)
        second = np.bincount((idx[:, n:] + offs).ravel(), minlength=b * total).reshape(b, total)
        return (first / n - second / m).T
    raise ContractError(f"unknown resampling method {method!r}")


def null_statistics(k: np.ndarray, n: int, m: int, bootstrap: int, rng, method="permutation") -> np.ndarray:
    """Squared statistics of ``bootstrap`` resampled splits of a pooled kernel matrix."""
    out = []
    for start in range(0, bootstrap, _CHUNK):
        w = _split_weights(n, m, min(_CHUNK, bootstrap - start), rng, method)
        out.append(np.einsum("ib,ib->b", w, k @ w))
    return np.concatenate(out)


def two_sample_test(x1, x2, kernel: KernelSpec = KernelSpec(), bootstrap: int = 1000, alpha: float = 0.05,
                    rng=0, method: str = "permutation") -> TestReport:
    """MMD two-sample test with a resampled null distribution.

    The bandwidth is fixed once on the pooled observed sample. ``method`` is
    ``"permutation"`` (default) or ``"bootstrap"`` (draws with replacement).
    p-value = (1 + #{null >= observed}) / (bootstrap + 1).
    """
    x1, x2 = as_matrix(x1, "x1"), as_matrix(x2, "x2")
    n, m = len(x1), len(x2)
    if n < 2 or m < 2:
        raise ContractError("two-sample test needs at least two rows per sample")
    if bootstrap < 1:
        raise ContractError("bootstrap iterations must be >= 1")
    if x1.shape[1] != x2.shape[1]:
        raise ContractError(f"feature dimension mismatch: {x1.shape[1]} vs {x2.shape[1]}")
    rng = make_rng(rng)
    spec = _resolve_kernel(x1, x2, kernel)
    pooled = np.vstack([x1, x2])
    k = kernel_matrix(pooled, pooled, spec)
    w0 = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    observed_sq = w0 @ k @ w0
    null = null_statistics(k, n, m, bootstrap, rng, method)
    hits = int(np.count_nonzero(null >= observed_sq - _TIE_TOL))
    p = (1 + hits) / (bootstrap + 1)
    return TestReport(mmd_biased(x1, x2, spec), p, alpha, p < alpha, n, m, bootstrap, spec, method)


# ---------------------------------------------------------------- protocols

def _master_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return draw_seed(rng)
    return int(rng)


def _pool(x) -> np.ndarray:
    return x.features if isinstance(x, Dataset) else as_matrix(x, "pool")


def _draw(rng, pool: np.ndarray, s: int) -> np.ndarray:
    return pool[rng.choice(len(pool), size=s, replace=False)]


def _run(jobs, fn, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def confident_detection_sweep(reference, candidates, sizes, repetitions: int = 200,
                              kernel: KernelSpec = KernelSpec(), bootstrap: int = 1000,
                              alpha: float = 0.05, rng=0, method: str = "permutation",
                              threads: int = 1) -> ConfidenceSweep:
    """Acceptance frequency of the test at each sample size over repeated
    draws without replacement from both pools.

    Each (size, repetition) pair derives its own seed from the master seed,
    so results do not depend on ``threads``.
    """
    ref, cand = _pool(reference), _pool(candidates)
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ContractError("no sample sizes given")
    if max(sizes) > min(len(ref), len(cand)):
        raise ContractError(f"size {max(sizes)} exceeds a pool ({len(ref)} reference, {len(cand)} candidate rows)")
    master = _master_seed(rng)

    def one(job):
        si, r = job
        s = sizes[si]
        g = make_rng(derive_seed(master, si, r))
        a, b = _draw(g, ref, s), _draw(g, cand, s)
        return not two_sample_test(a, b, kernel, bootstrap, alpha, g, method).reject

    acc = []
    for si in range(len(sizes)):
        res = _run([(si, r) for r in range(repetitions)], one, threads)
        acc.append(sum(res) / repetitions)
    return ConfidenceSweep(tuple(sizes), tuple(acc), repetitions)


def classwise_test(reference: Dataset, candidates, candidate_labels, grouping: str = "P",
                   sizes=(10, 50, 100), repetitions: int = 200, kernel: KernelSpec = KernelSpec(),
                   bootstrap: int = 1000, alpha: float = 0.05, rng=0, method: str = "permutation",
                   threads: int = 1) -> ClasswiseResult:
    """Sweep each candidate group against the reference rows of its class.

    ``grouping`` records how ``candidate_labels`` were obtained: ``"O"`` for
    the source labels, ``"P"`` for the attacked model's predictions.
    """
    if grouping not in ("O", "P"):
        raise ContractError("grouping must be 'O' or 'P'")
    cand = _pool(candidates)
    labels = np.asarray(candidate_labels, dtype=np.int64)
    if len(labels) != len(cand):
        raise ContractError("one label per candidate row required")
    master = _master_seed(rng)
    out = ClasswiseResult(grouping)
    sizes = sorted(int(s) for s in sizes)
    for c in np.unique(labels):
        ref_c = reference.features[reference.labels == c]
        cand_c = cand[labels == c]
        if len(ref_c) < sizes[-1]:
            out.warnings.append(f"class {c}: {len(ref_c)} reference rows < size {sizes[-1]}; skipped")
            continue
        usable = [s for s in sizes if s <= len(cand_c)]
        if not usable:
            out.warnings.append(f"class {c}: only {len(cand_c)} candidates; skipped")
            continue
        if len(usable) < len(sizes):
            out.warnings.append(f"class {c}: only {len(cand_c)} candidates; sizes {usable} tried")
        out.per_class[int(c)] = confident_detection_sweep(
            ref_c, cand_c, usable, repetitions, kernel, bootstrap, alpha,
            derive_seed(master, int(c)), method, threads)
    return out


def mixture_sweep(reference, adversarial, benign, fractions, sizes, repetitions: int = 200,
                  kernel: KernelSpec = KernelSpec(), bootstrap: int = 1000, alpha: float = 0.05,
                  rng=0, method: str = "permutation", threads: int = 1) -> MixtureGrid:
    """Acceptance frequency for candidates mixing ``round(beta*s)`` benign rows
    with adversarial rows, for each benign fraction ``beta`` and size ``s``.

    Seeds depend on (size, repetition) only, so ``beta=0`` reproduces
    :func:`confident_detection_sweep` with the same master seed and sizes.
    """
    ref, adv, ben = _pool(reference), _pool(adversarial), _pool(benign)
    sizes = [int(s) for s in sizes]
    fractions = [float(f) for f in fractions]
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ContractError("benign fractions must lie in [0, 1]")
    for f in fractions:
        for s in sizes:
            k = int(round(f * s))
            if s > len(ref) or k > len(ben) or s - k > len(adv):
                raise ContractError(f"pools too small for fraction {f} at size {s}")
    master = _master_seed(rng)

    def one(job):
        f, si, r = job
        s = sizes[si]
        k = int(round(f * s))
        g = make_rng(derive_seed(master, si, r))
        a = _draw(g, ref, s)
        parts = []
        if k:
            parts.append(_draw(g, ben, k))
        if s - k:
            parts.append(_draw(g, adv, s - k))
        return not two_sample_test(a, np.vstack(parts), kernel, bootstrap, alpha, g, method).reject

    acc = np.zeros((len(fractions), len(sizes)))
    for i, f in enumerate(fractions):
        for si in range(len(sizes)):
            res = _run([(f, si, r) for r in range(repetitions)], one, threads)
            acc[i, si] = sum(res) / repetitions
    return MixtureGrid(tuple(fractions), tuple(sizes), acc, repetitions)


def distance_table(reference, candidates: dict, kernel: KernelSpec = KernelSpec()) -> list[dict]:
    """MMD and energy distance of each named candidate set to ``reference``.

    A missing bandwidth is fixed once from the reference and the first
    candidate set so all rows share one kernel.
    """
    ref = _pool(reference)
    if kernel.bandwidth is None:
        first = _pool(next(iter(candidates.values())))
        kernel = kernel.with_bandwidth(median_pairwise_distance(ref, first))
    return [{"name": name, "mmd": mmd_biased(ref, _pool(x), kernel), "ed": energy_distance(ref, _pool(x)),
             "bandwidth": kernel.bandwidth}
            for name, x in candidates.items()]
