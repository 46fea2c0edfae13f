"""Classifier families with a shared predict / probability / input-gradient
contract: softmax regression, ReLU MLP, one-vs-rest linear SVM and a CART
decision tree."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import Dataset, FormatError
from .numerics import ContractError, UnsupportedOperation, make_rng

FAMILIES = ("logreg", "mlp", "linear_svm", "decision_tree")
MODEL_FORMAT = "statdetect-model"
MODEL_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    l2: float = 1e-4
    dropout: float = 0.25
    patience: int = 5
    seed: int = 0
    hidden: tuple[int, ...] = (64,)
    max_depth: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning rate must be > 0")
        if self.l2 < 0 or not 0 <= self.dropout < 1 or self.epochs < 0 or self.patience < 0:
            raise ContractError("invalid training configuration")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def _uniform_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Classifier:
    """Base class. ``n_outputs`` is K, or K+1 when ``outlier`` is set, in
    which case the last output is the outlier class."""

    family = "base"
    differentiable = True

    def __init__(self, n_inputs: int, n_outputs: int, outlier: bool = False, meta: dict | None = None):
        self.n_inputs = int(n_inputs)
        self.n_outputs = int(n_outputs)
        self.outlier = bool(outlier)
        self.meta = dict(meta or {})

    @property
    def n_classes(self) -> int:
        """Number of original (non-outlier) classes."""
        return self.n_outputs - int(self.outlier)

    @property
    def outlier_index(self) -> int | None:
        return self.n_outputs - 1 if self.outlier else None

    def _check(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.n_inputs:
            raise ContractError(f"expected inputs of length {self.n_inputs}, got shape {x.shape}")
        return x2, single

    # -- prediction
    def logits(self, x) -> np.ndarray:
        x2, single = self._check(x)
        z = self._logits(x2)
        return z[0] if single else z

    def predict_proba(self, x) -> np.ndarray:
        x2, single = self._check(x)
        p = softmax(self._logits(x2))
        return p[0] if single else p

    def predict(self, x):
        p = self.predict_proba(x)
        # argmax returns the first maximum: ties go to the lowest index
        return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=1)

    # -- gradients
    def loss_gradient(self, x, y) -> np.ndarray:
        """Gradient of the cross-entropy at label(s) ``y`` wrt the input(s)."""
        x2, single = self._check(x)
        y2 = np.atleast_1d(np.asarray(y, dtype=np.int64))
        dz = softmax(self._logits(x2)) - _onehot(y2, self.n_outputs)
        g = self._backprop_input(x2, dz)
        return g[0] if single else g

    def logit_jacobian(self, x) -> np.ndarray:
        """Per-class gradients of the pre-softmax scores, shape (..., n_outputs, d)."""
        x2, single = self._check(x)
        j = self._jacobian(x2)
        return j[0] if single else j

    def input_gradient(self, x, y: int | None = None, cls: int | None = None) -> np.ndarray:
        """Either the loss gradient at true label ``y`` or the score gradient of ``cls``."""
        if (y is None) == (cls is None):
            raise ContractError("give exactly one of y (loss) or cls (class score)")
        if y is not None:
            return self.loss_gradient(x, y)
        return self.logit_jacobian(x)[..., cls, :]

    # -- subclass hooks
    def _logits(self, x):
        raise NotImplementedError

    def _backprop_input(self, x, dz):
        raise NotImplementedError

    def _jacobian(self, x):
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def loss_and_grads(self, x, y, cfg: TrainConfig, rng=None):
        raise NotImplementedError

    def loss(self, x, y, cfg: TrainConfig) -> float:
        return self.loss_and_grads(x, y, cfg, rng=None)[0]

    def param_dict(self) -> dict:
        raise NotImplementedError


class LogisticRegression(Classifier):
    family = "logreg"

    def __init__(self, W, b, outlier=False, meta=None):
        W = np.asarray(W, dtype=np.float64)
        super().__init__(W.shape[0], W.shape[1], outlier, meta)
        self.W = W
        self.b = np.asarray(b, dtype=np.float64)

    @classmethod
    def init(cls, d, k, rng, cfg=None, outlier=False):
        return cls(_uniform_init(rng, d, k), np.zeros(k), outlier)

    def _logits(self, x):
        return x @ self.W + self.b

    def _backprop_input(self, x, dz):
        return dz @ self.W.T

    def _jacobian(self, x):
        return np.broadcast_to(self.W.T, (len(x),) + self.W.T.shape).copy()

    def params(self):
        return [self.W, self.b]

    def loss_and_grads(self, x, y, cfg, rng=None):
        p = softmax(self._logits(x))
        n = len(x)
        loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))
        loss += 0.5 * cfg.l2 * np.sum(self.W**2)
        dz = (p - _onehot(y, self.n_outputs)) / n
        return loss, [x.T @ dz + cfg.l2 * self.W, dz.sum(axis=0)]

    def param_dict(self):
        return {"W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_params(cls, p, outlier, meta):
        return cls(p["W"], p["b"], outlier, meta)


class LinearSVM(LogisticRegression):
    """One-vs-rest linear SVM; ``W[:, c]`` is the weight vector of class c.

    Probabilities are a softmax over the per-class margins.
    """

    family = "linear_svm"

    def loss_and_grads(self, x, y, cfg, rng=None):
        s = self._logits(x)
        t = 2.0 * _onehot(y, self.n_outputs) - 1.0
        slack = np.maximum(0.0, 1.0 - t * s)
        n = len(x)
        loss = np.sum(slack**2) / n + 0.5 * cfg.l2 * np.sum(self.W**2)
        ds = -2.0 * t * slack / n
        return loss, [x.T @ ds + cfg.l2 * self.W, ds.sum(axis=0)]


class MLP(Classifier):
    """Dense ReLU network with a softmax output layer."""

    family = "mlp"

    def __init__(self, weights, biases, outlier=False, meta=None):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        super().__init__(self.weights[0].shape[0], self.weights[-1].shape[1], outlier, meta)

    @classmethod
    def init(cls, d, k, rng, cfg, outlier=False):
        sizes = [d, *cfg.hidden, k]
        ws = [_uniform_init(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(ws, [np.zeros(b) for b in sizes[1:]], outlier)

    def _forward(self, x, dropout=0.0, rng=None):
        acts, masks = [x], []
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            pre = h @ w + b
            mask = (pre > 0).astype(np.float64)
            if dropout > 0 and rng is not None:
                mask *= (rng.random(pre.shape) >= dropout) / (1.0 - dropout)
            h = pre * mask
            acts.append(h)
            masks.append(mask)
        z = h @ self.weights[-1] + self.biases[-1]
        return z, acts, masks

    def _logits(self, x):
        return self._forward(x)[0]

    def _backprop_input(self, x, dz):
        _, _, masks = self._forward(x)
        g = dz @ self.weights[-1].T
        for w, m in zip(reversed(self.weights[:-1]), reversed(masks)):
            g = (g * m) @ w.T
        return g

    def _jacobian(self, x):
        _, _, masks = self._forward(x)
        g = np.broadcast_to(self.weights[-1].T, (len(x),) + self.weights[-1].T.shape)
        for w, m in zip(reversed(self.weights[:-1]), reversed(masks)):
            g = (g * m[:, None, :]) @ w.T
        return np.array(g)

    def params(self):
        return [*self.weights, *self.biases]

    def loss_and_grads(self, x, y, cfg, rng=None):
        z, acts, masks = self._forward(x, cfg.dropout if rng is not None else 0.0, rng)
        p = softmax(z)
        n = len(x)
        loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))
        loss += 0.5 * cfg.l2 * sum(np.sum(w**2) for w in self.weights)
        g = (p - _onehot(y, self.n_outputs)) / n
        gw, gb = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            gw.append(acts[i].T @ g + cfg.l2 * self.weights[i])
            gb.append(g.sum(axis=0))
            if i:
                g = (g @ self.weights[i].T) * masks[i - 1]
        return loss, [*reversed(gw), *reversed(gb)]

    def param_dict(self):
        return {"weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_params(cls, p, outlier, meta):
        return cls(p["weights"], p["biases"], outlier, meta)


class DecisionTree(Classifier):
    """Binary CART tree. Node ``i`` goes left when ``x[feature[i]] <= threshold[i]``;
    leaves have ``feature == -1`` and carry ``value`` as their class."""

    family = "decision_tree"
    differentiable = False

    def __init__(self, n_inputs, n_outputs, feature, threshold, left, right, value, outlier=False, meta=None):
        super().__init__(n_inputs, n_outputs, outlier, meta)
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, x) -> np.ndarray:
        """Leaf index reached by each row."""
        x2, single = self._check(x)
        node = np.zeros(len(x2), dtype=np.int64)
        active = ~self.is_leaf_array(node)
        while np.any(active):
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = x2[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active[idx] = ~self.is_leaf_array(node[idx])
        return node[0] if single else node

    def is_leaf_array(self, nodes):
        return self.feature[nodes] < 0

    def path(self, leaf: int) -> list[int]:
        """Node indices from the root down to ``leaf``."""
        parent = self.parents()
        out = [leaf]
        while parent[out[-1]] >= 0:
            out.append(parent[out[-1]])
        return out[::-1]

    def parents(self) -> np.ndarray:
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        for i in range(self.n_nodes):
            if not self.is_leaf(i):
                parent[self.left[i]] = i
                parent[self.right[i]] = i
        return parent

    def predict_proba(self, x):
        x2, single = self._check(x)
        p = np.zeros((len(x2), self.n_outputs))
        p[np.arange(len(x2)), self.value[self.apply(x2)]] = 1.0
        return p[0] if single else p

    def _logits(self, x):
        raise UnsupportedOperation("decision trees have no scores to differentiate")

    def loss_gradient(self, x, y):
        raise UnsupportedOperation("decision trees are not differentiable")

    def logit_jacobian(self, x):
        raise UnsupportedOperation("decision trees are not differentiable")

    def param_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_params(cls, p, outlier, meta, n_inputs, n_outputs):
        return cls(n_inputs, n_outputs, p["feature"], p["threshold"], p["left"], p["right"], p["value"], outlier, meta)


# ---------------------------------------------------------------- training

BatchSampler = Callable[[np.random.Generator], Iterable[np.ndarray]]


def minibatches(n: int, batch_size: int) -> BatchSampler:
    def sample(rng):
        order = rng.permutation(n)
        return [order[i : i + batch_size] for i in range(0, n, batch_size)]

    return sample


def _gini(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / tot[..., None]
    return np.where(tot > 0, 1.0 - np.sum(p**2, axis=-1), 0.0)


def _best_split(x, y, k):
    """Lowest weighted Gini over all (feature, midpoint) splits; ties resolve
    to the lowest feature, then the lowest threshold. None when every feature
    is constant."""
    best = None
    n = len(y)
    onehot = _onehot(y, k)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        valid = np.flatnonzero(xs[1:] > xs[:-1])
        if not len(valid):
            continue
        lc = left[valid]
        rc = left[-1] + onehot[order[-1]] - lc
        nl = valid + 1.0
        score = (nl * _gini(lc) + (n - nl) * _gini(rc)) / n
        j = int(np.argmin(score))
        if best is None or score[j] < best[0] - 1e-12:
            i = valid[j]
            best = (score[j], f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def _grow_tree(x, y, k, max_depth):
    feature, threshold, left, right, value = [], [], [], [], []

    def node(idx, depth):
        me = len(feature)
        counts = np.bincount(y[idx], minlength=k)
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, int(np.argmax(counts)))):
            lst.append(v)
        if depth >= max_depth or np.count_nonzero(counts) <= 1:
            return me
        split = _best_split(x[idx], y[idx], k)
        if split is None:
            return me
        _, f, t = split
        go_left = x[idx, f] <= t
        feature[me], threshold[me] = f, t
        left[me] = node(idx[go_left], depth + 1)
        right[me] = node(idx[~go_left], depth + 1)
        return me

    node(np.arange(len(y)), 0)
    return feature, threshold, left, right, value


_FAMILY_CLASSES = {"logreg": LogisticRegression, "mlp": MLP, "linear_svm": LinearSVM}


def init_model(family: str, d: int, k: int, cfg: TrainConfig, outlier: bool = False) -> Classifier:
    if family not in _FAMILY_CLASSES:
        raise ContractError(f"no gradient initialisation for family {family!r}")
    return _FAMILY_CLASSES[family].init(d, k, make_rng(cfg.seed), cfg, outlier)


def train(family: str, dataset: Dataset, config: TrainConfig, *, outlier: bool = False,
          batch_sampler: BatchSampler | None = None, validation: Dataset | None = None) -> Classifier:
    """Fit a classifier of ``family`` on ``dataset``.

    Gradient families run mini-batch descent with early stopping on a held-out
    tenth of the data (disabled when ``patience`` is 0). A custom
    ``batch_sampler`` yields index arrays per epoch; the caller then supplies
    its own ``validation`` set. With ``outlier`` set the last class of the
    dataset is treated as the outlier class.
    """
    if family not in FAMILIES:
        raise ContractError(f"unknown model family {family!r}")
    if len(np.unique(dataset.labels)) < 2:
        raise ContractError("training needs at least two classes")
    x, y, k = dataset.features, dataset.labels, dataset.n_classes

    if family == "decision_tree":
        nodes = _grow_tree(x, y, k, config.max_depth)
        return DecisionTree(dataset.dim, k, *nodes, outlier=outlier)

    rng = make_rng(config.seed)
    model = _FAMILY_CLASSES[family].init(dataset.dim, k, rng, config, outlier)
    if batch_sampler is None:
        if validation is None and config.patience > 0 and len(y) >= 20:
            order = rng.permutation(len(y))
            n_val = max(1, len(y) // 10)
            validation = dataset.subset(order[:n_val])
            x, y = x[order[n_val:]], y[order[n_val:]]
        batch_sampler = minibatches(len(y), config.batch_size)

    params = model.params()
    best = [p.copy() for p in params]
    best_loss, stale = np.inf, 0
    for epoch in range(config.epochs):
        for idx in batch_sampler(rng):
            loss, grads = model.loss_and_grads(x[idx], y[idx], config, rng)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss in epoch {epoch}")
            for p, g in zip(params, grads):
                p -= config.learning_rate * g
        if validation is not None and config.patience > 0:
            vloss = model.loss(validation.features, validation.labels, config)
            if vloss < best_loss - 1e-9:
                best_loss, stale = vloss, 0
                best = [p.copy() for p in params]
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if validation is not None and config.patience > 0 and np.isfinite(best_loss):
        for p, b in zip(params, best):
            p[...] = b
    return model


def accuracy(model: Classifier, dataset: Dataset) -> float:
    if not len(dataset):
        return float("nan")
    return float(np.mean(model.predict(dataset.features) == dataset.labels))


# ---------------------------------------------------------------- persistence

def to_json(model: Classifier) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "family": model.family,
        "n_inputs": model.n_inputs,
        "n_outputs": model.n_outputs,
        "outlier": model.outlier,
        "meta": model.meta,
        "params": model.param_dict(),
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def from_json(text: str) -> Classifier:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt model file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError("not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        fam, p = doc["family"], doc["params"]
        if fam == "decision_tree":
            model = DecisionTree.from_params(p, doc["outlier"], doc["meta"], doc["n_inputs"], doc["n_outputs"])
        elif fam in _FAMILY_CLASSES:
            model = _FAMILY_CLASSES[fam].from_params(p, doc["outlier"], doc["meta"])
        else:
            raise FormatError(f"unknown family {fam!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model file: {exc}") from None
    if model.n_inputs != doc["n_inputs"] or model.n_outputs != doc["n_outputs"]:
        raise FormatError("model dimensions disagree with header")
    return model


def save(model: Classifier, path) -> None:
    Path(path).write_text(to_json(model))


def load(path) -> Classifier:
    return from_json(Path(path).read_text())
