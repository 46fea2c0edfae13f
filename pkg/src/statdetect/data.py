"""Datasets: loaders, desk-scale synthetic generators, splitting and
geometric perturbations of square pixel images."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import ContractError, make_rng

PIXEL = "pixel"
BINARY = "binary"
TABULAR = "tabular"


class FormatError(ValueError):
    """A data file could not be parsed."""


@dataclass(frozen=True)
class FeatureDomain:
    kind: str = TABULAR
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (PIXEL, BINARY, TABULAR):
            raise ContractError(f"unknown feature domain {self.kind!r}")
        if self.std is not None and np.any(np.asarray(self.std) <= 0):
            raise ContractError("tabular standard deviations must be > 0")

    @classmethod
    def tabular_from(cls, features: np.ndarray) -> "FeatureDomain":
        mean = features.mean(axis=0) if len(features) else np.zeros(features.shape[1])
        std = features.std(axis=0) if len(features) else np.ones(features.shape[1])
        std = np.where(std > 0, std, 1.0)
        return cls(TABULAR, mean, std)

    def clip(self, x: np.ndarray) -> np.ndarray:
        """Project values back into the domain."""
        if self.kind == PIXEL:
            return np.clip(x, 0.0, 1.0)
        if self.kind == BINARY:
            return np.clip(np.round(x), 0.0, 1.0)
        return x

    def upper(self, x: np.ndarray) -> np.ndarray:
        """Per-feature value an increase-only attack saturates to."""
        if self.kind in (PIXEL, BINARY):
            return np.ones_like(x)
        return x + 2.0 * self.std

    def contains(self, x: np.ndarray) -> bool:
        if not np.all(np.isfinite(x)):
            return False
        if self.kind == PIXEL:
            return bool(np.all((x >= 0) & (x <= 1)))
        if self.kind == BINARY:
            return bool(np.all((x == 0) | (x == 1)))
        return True

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.mean is not None:
            out["mean"] = [float(v) for v in self.mean]
            out["std"] = [float(v) for v in self.std]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureDomain":
        if "mean" in d:
            return cls(d["kind"], np.asarray(d["mean"], float), np.asarray(d["std"], float))
        return cls(d["kind"])


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    domain: FeatureDomain = field(default_factory=FeatureDomain)
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError("features must be a 2-D matrix")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.features):
            raise ContractError(
                f"{len(self.labels)} labels for {len(self.features)} rows"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")
        if not self.domain.contains(self.features):
            raise ContractError(f"features violate the {self.domain.kind} domain")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def of_class(self, c: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == c))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError("test fraction must lie strictly in (0, 1)")


# ---------------------------------------------------------------- loaders

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path: Path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndims:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4 : 4 + 4 * ndims])
    body = raw[4 + 4 * ndims :]
    if len(body) != int(np.prod(dims)):
        raise FormatError(
            f"{path}: truncated payload ({len(body)} bytes, header promises {int(np.prod(dims))})"
        )
    return dims, body


def load_idx_images(image_path, label_path) -> Dataset:
    """Load an IDX image/label pair (the MNIST container) as a pixel dataset."""
    (n, rows, cols), pixels = _read_idx(image_path, _IDX_IMAGES, 3)
    (n_labels,), labels = _read_idx(label_path, _IDX_LABELS, 1)
    if n != n_labels:
        raise FormatError(f"{label_path}: {n_labels} labels for {n} images in {image_path}")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    k = int(y.max()) + 1 if n else 1
    return Dataset(x, y, max(k, 1), FeatureDomain(PIXEL), Path(image_path).name)


def write_idx(image_path, label_path, images: np.ndarray, labels) -> None:
    """Write ``uint8`` images of shape (n, rows, cols) and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">4I", _IDX_IMAGES, n, rows, cols) + images.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(label_path).write_bytes(struct.pack(">2I", _IDX_LABELS, len(lab)) + lab.tobytes())


def load_csv(path, label_column: int = -1, has_header: bool = False,
             ignore_columns=(), domain: str | None = None) -> Dataset:
    """Parse a rectangular CSV into a dataset.

    Labels are mapped to ``0..K-1`` in order of first appearance. Features are
    treated as binary when every value is 0 or 1, tabular otherwise, unless
    ``domain`` forces a kind. Row numbers in errors are 1-based file lines.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    start = 1 if has_header else 0
    header = rows[0] if has_header and rows else None
    body = [(i + 1, r) for i, r in enumerate(rows) if i >= start and r]
    width = len(header) if header is not None else (len(body[0][1]) if body else 0)
    if width == 0:
        raise FormatError(f"{path}: no columns")
    if not -width <= label_column < width:
        raise FormatError(f"{path}: label column {label_column} out of range for {width} columns")
    lc = label_column % width
    skip = {lc} | {c % width for c in ignore_columns}
    keep = [c for c in range(width) if c not in skip]

    feats, names, labels = [], {}, []
    for lineno, r in body:
        if len(r) != width:
            raise FormatError(f"{path}: row {lineno} has {len(r)} fields, expected {width}")
        try:
            feats.append([float(r[c]) for c in keep])
        except ValueError:
            raise FormatError(f"{path}: row {lineno} has a non-numeric feature") from None
        key = r[lc].strip()
        labels.append(names.setdefault(key, len(names)))

    x = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(keep))
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite feature value")
    if domain is None:
        domain = BINARY if len(x) and np.all((x == 0) | (x == 1)) else TABULAR
    fd = FeatureDomain.tabular_from(x) if domain == TABULAR else FeatureDomain(domain)
    return Dataset(x, labels, max(len(names), 1), fd, path.name)


# ---------------------------------------------------------------- synthetic

# Seven-segment strokes on an 8x8 canvas: (row slice, col slice) per segment.
_SEGMENTS = {
    "a": (slice(1, 2), slice(2, 6)),
    "b": (slice(1, 4), slice(5, 6)),
    "c": (slice(4, 7), slice(5, 6)),
    "d": (slice(6, 7), slice(2, 6)),
    "e": (slice(4, 7), slice(2, 3)),
    "f": (slice(1, 4), slice(2, 3)),
    "g": (slice(3, 5), slice(3, 5)),
}
_DIGIT_SEGMENTS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd"]
_STROKE = 0.9


def digit_templates() -> np.ndarray:
    """The ten noiseless 8x8 stroke templates, flattened to (10, 64)."""
    out = np.zeros((10, 8, 8))
    for digit, segs in enumerate(_DIGIT_SEGMENTS):
        for s in segs:
            r, c = _SEGMENTS[s]
            out[digit, r, c] = _STROKE
    # a diagonal tail keeps 1 and 7 apart from the bare right column
    out[1, 2, 4] = _STROKE
    out[7, 3, 4] = _STROKE
    return out.reshape(10, 64)


def synth_digits(per_class: int, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Ten-class 8x8 pixel stand-in for handwritten digits."""
    if per_class < 1:
        raise ContractError("per_class must be >= 1")
    rng = make_rng(seed)
    templates = digit_templates()
    y = np.repeat(np.arange(10), per_class)
    x = templates[y] + noise * rng.standard_normal((len(y), 64))
    order = rng.permutation(len(y))
    return Dataset(np.clip(x[order], 0.0, 1.0), y[order], 10, FeatureDomain(PIXEL), "synth_digits")


def synth_binary_malware(n_benign: int, n_malicious: int, d: int = 50, seed: int = 0) -> Dataset:
    """Two-class binary feature vectors with class-specific activation rates.

    The activation profiles depend only on ``d`` so draws with different seeds
    come from the same distribution.
    """
    if d < 20:
        raise ContractError("d must be >= 20")
    prof = make_rng(7919 + d)
    p_benign = prof.uniform(0.05, 0.35, d)
    p_mal = p_benign.copy()
    shifted = prof.choice(d, size=d // 2, replace=False)
    p_mal[shifted] = np.clip(p_benign[shifted] + prof.choice([-1, 1], d // 2) * 0.3, 0.02, 0.95)
    rng = make_rng(seed)
    y = np.concatenate([np.zeros(n_benign, int), np.ones(n_malicious, int)])
    p = np.where(y[:, None] == 0, p_benign, p_mal)
    x = (rng.random((len(y), d)) < p).astype(np.float64)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], 2, FeatureDomain(BINARY), "synth_binary_malware")


_TAB_MEANS = np.array([[0.0, 1.0, 5.0, -2.0, 10.0], [2.0, 0.0, 7.0, -0.5, 13.0]])
_TAB_STDS = np.array([[1.0, 0.5, 1.5, 0.8, 3.0], [1.2, 0.4, 1.5, 0.9, 3.5]])


def synth_tabular(n_per_class: int, seed: int = 0) -> Dataset:
    """Two-class, five-feature real-valued data with class-dependent moments."""
    rng = make_rng(seed)
    y = np.repeat([0, 1], n_per_class)
    x = _TAB_MEANS[y] + _TAB_STDS[y] * rng.standard_normal((len(y), 5))
    order = rng.permutation(len(y))
    x = x[order]
    return Dataset(x, y[order], 2, FeatureDomain.tabular_from(x), "synth_tabular")


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    n_test = int(round(n * spec.test_fraction))
    if n < 2 or n_test == 0 or n_test == n:
        raise ContractError(f"test fraction {spec.test_fraction} on {n} rows leaves an empty split")
    order = make_rng(spec.seed).permutation(n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------- geometry

def _side(dataset: Dataset) -> int:
    if dataset.domain.kind != PIXEL:
        raise ContractError("geometric perturbations need a pixel domain")
    side = int(round(np.sqrt(dataset.dim)))
    if side * side != dataset.dim:
        raise ContractError(f"{dataset.dim} features are not a square image")
    return side


def _blur_kernel(radius: int) -> np.ndarray:
    sigma = radius / 2.0
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2 * sigma**2))
    return k / k.sum()


def _convolve_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, w in enumerate(k):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def geometric_perturb(dataset: Dataset, transform: str, param: int | None = None) -> Dataset:
    """Apply ``"flip"``, ``"subsample"`` (keep a centered ``param``-wide square,
    rescale by nearest neighbour) or ``"gaussian_blur"`` (radius ``param``)."""
    side = _side(dataset)
    imgs = dataset.features.reshape(-1, side, side)
    if transform == "flip":
        out = imgs[:, :, ::-1]
    elif transform == "subsample":
        k = int(param)
        if not 1 <= k <= side:
            raise ContractError(f"subsample width must be in [1, {side}]")
        lo = (side - k) // 2
        crop = imgs[:, lo : lo + k, lo : lo + k]
        src = (np.arange(side) * k) // side
        out = crop[:, src][:, :, src]
    elif transform == "gaussian_blur":
        r = int(param)
        if r < 1:
            raise ContractError("blur radius must be >= 1")
        k = _blur_kernel(r)
        out = _convolve_axis(_convolve_axis(imgs, k, 1), k, 2)
    else:
        raise ContractError(f"unknown transform {transform!r}")
    feats = np.clip(out.reshape(len(dataset), -1), 0.0, 1.0)
    return replace(dataset, features=feats, name=f"{dataset.name}+{transform}")
