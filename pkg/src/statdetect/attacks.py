"""Adversarial example crafting: FGSM, JSMA, the linear-SVM shift and the
decision-tree path attack, all projected back into the feature domain."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import BINARY, PIXEL, TABULAR, Dataset, FeatureDomain
from .models import Classifier, DecisionTree
from .numerics import ContractError, UnsupportedOperation

ATTACK_KINDS = ("fgsm", "jsma", "svm_shift", "dt_path")
DT_MARGIN = 1e-6


class NoValidTarget(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """``epsilon`` drives fgsm/svm_shift, ``budget`` (max features changed)
    drives jsma/dt_path. ``target`` is ``"second"``, ``"exclude_outlier"``,
    ``"auto"`` (exclude the outlier class when the model has one) or a class
    index."""

    kind: str
    epsilon: float | None = None
    budget: int | None = None
    target: str | int = "auto"
    variance_scaled: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractError(f"unknown attack {self.kind!r}")
        if self.kind in ("fgsm", "svm_shift"):
            if self.epsilon is None or self.epsilon <= 0:
                raise ContractError(f"{self.kind} needs epsilon > 0")
        else:
            if self.budget is None or self.budget < 1:
                raise ContractError(f"{self.kind} needs a feature budget >= 1")

    @property
    def parameter(self) -> float | int:
        return self.epsilon if self.kind in ("fgsm", "svm_shift") else self.budget

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.parameter}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "budget": self.budget,
                "target": self.target, "variance_scaled": self.variance_scaled}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(d["kind"], d.get("epsilon"), d.get("budget"), d.get("target", "auto"),
                   bool(d.get("variance_scaled", False)))


@dataclass
class AttackOutcome:
    x: np.ndarray
    x_adv: np.ndarray
    source: int
    pred_before: int
    pred_after: int
    succeeded: bool
    target: int | None = None

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    @property
    def features_changed(self) -> int:
        return int(np.count_nonzero(self.x_adv != self.x))


def _require_differentiable(model: Classifier, name: str):
    if not model.differentiable:
        raise UnsupportedOperation(f"{name} needs a differentiable model, got {model.family}")


def _step_scale(domain: FeatureDomain, variance_scaled: bool):
    if variance_scaled and domain.kind == TABULAR:
        return domain.std
    return 1.0


# ---------------------------------------------------------------- FGSM

def fgsm_batch(model: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float,
               domain: FeatureDomain, variance_scaled: bool = False) -> np.ndarray:
    _require_differentiable(model, "fgsm")
    g = model.loss_gradient(x, y)
    return domain.clip(x + epsilon * _step_scale(domain, variance_scaled) * np.sign(g))


def fgsm(model: Classifier, x, y: int, epsilon: float, domain: FeatureDomain,
         variance_scaled: bool = False) -> AttackOutcome:
    x = np.asarray(x, dtype=np.float64)
    x_adv = fgsm_batch(model, x[None], np.array([y]), epsilon, domain, variance_scaled)[0]
    before, after = model.predict(x), model.predict(x_adv)
    return AttackOutcome(x, x_adv, int(y), before, after, after != y)


# ---------------------------------------------------------------- JSMA

def choose_target(model: Classifier, proba: np.ndarray, rule="auto") -> np.ndarray:
    """Second most confident class per row, optionally skipping the outlier class."""
    proba = np.atleast_2d(proba)
    if isinstance(rule, (int, np.integer)):
        return np.full(len(proba), int(rule))
    exclude = rule == "exclude_outlier" or (rule == "auto" and model.outlier)
    p = proba.copy()
    if exclude:
        if not model.outlier:
            raise ContractError("exclude_outlier target rule on a model without outlier class")
        p = p[:, : model.n_classes]
        if model.n_classes < 2:
            raise NoValidTarget("no original class left once the outlier class is excluded")
    # stable descending order keeps the lowest index on ties
    order = np.argsort(-p, axis=1, kind="stable")
    if exclude:
        # strongest original class that is not the current prediction
        pred = np.argmax(proba, axis=1)
        return np.where(order[:, 0] != pred, order[:, 0], order[:, 1])
    return order[:, 1]


def saliency(jac: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Increase-only saliency map per row: ``dt * |sum_others|`` where the
    target gradient is positive and the others' sum is negative, else 0."""
    n = len(jac)
    dt = jac[np.arange(n), target]
    others = jac.sum(axis=1) - dt
    return np.where((dt > 0) & (others < 0), dt * np.abs(others), 0.0)


def jsma_batch(model: Classifier, x: np.ndarray, targets: np.ndarray, budget: int,
               domain: FeatureDomain) -> np.ndarray:
    _require_differentiable(model, "jsma")
    x_adv = x.copy()
    top = domain.upper(x)
    changed = np.zeros(x.shape, dtype=bool)
    active = model.predict(x_adv) != targets
    rows = np.arange(len(x))
    for _ in range(budget):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        s = saliency(model.logit_jacobian(x_adv[idx]), targets[idx])
        s[changed[idx] | (x_adv[idx] >= top[idx])] = 0.0
        best = np.argmax(s, axis=1)
        ok = s[np.arange(len(idx)), best] > 0
        # rows with no admissible feature stop here
        active[idx[~ok]] = False
        idx, best = idx[ok], best[ok]
        x_adv[idx, best] = top[idx, best]
        changed[idx, best] = True
        if len(idx):
            active[idx] = model.predict(x_adv[idx]) != targets[idx]
    return x_adv


def jsma(model: Classifier, x, y: int, target="auto", budget: int = 10,
         domain: FeatureDomain | None = None) -> AttackOutcome:
    x = np.asarray(x, dtype=np.float64)
    domain = domain or FeatureDomain(PIXEL)
    _require_differentiable(model, "jsma")
    t = int(choose_target(model, model.predict_proba(x), target)[0])
    if budget < 1:
        x_adv = x.copy()
    else:
        x_adv = jsma_batch(model, x[None], np.array([t]), budget, domain)[0]
    before, after = model.predict(x), model.predict(x_adv)
    return AttackOutcome(x, x_adv, int(y), before, after, after == t, target=t)


# ---------------------------------------------------------------- SVM shift

def svm_shift(model: Classifier, x, target: int, epsilon: float, domain: FeatureDomain | None = None,
              y: int | None = None, variance_scaled: bool = False) -> AttackOutcome:
    """Move ``x`` by ``epsilon`` along the unit weight vector of ``target``."""
    if model.family != "linear_svm":
        raise UnsupportedOperation(f"svm_shift needs a linear_svm, got {model.family}")
    x = np.asarray(x, dtype=np.float64)
    domain = domain or FeatureDomain(TABULAR)
    w = model.W[:, target]
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError(f"degenerate model: class {target} has a zero weight vector")
    step = epsilon * _step_scale(domain, variance_scaled) * w / norm
    x_adv = domain.clip(x + step)
    before, after = model.predict(x), model.predict(x_adv)
    src = before if y is None else int(y)
    return AttackOutcome(x, x_adv, src, before, after, after != src, target=int(target))


# ---------------------------------------------------------------- tree path

def _nearest_other_leaf(tree: DecisionTree, leaf: int) -> int | None:
    parent = tree.parents()
    cls = tree.value[leaf]
    seen = {leaf}
    queue = deque([leaf])
    while queue:
        node = queue.popleft()
        if tree.is_leaf(node) and tree.value[node] != cls:
            return node
        nbrs = [parent[node]] if parent[node] >= 0 else []
        if not tree.is_leaf(node):
            nbrs += [tree.left[node], tree.right[node]]
        for nb in nbrs:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return None


def dt_path(model: Classifier, x, budget: int, domain: FeatureDomain | None = None,
            y: int | None = None) -> AttackOutcome:
    """Cross the split of the deepest shared ancestor between the current
    leaf and the nearest leaf of another class, until the prediction moves."""
    if not isinstance(model, DecisionTree):
        raise UnsupportedOperation(f"dt_path needs a decision_tree, got {model.family}")
    if model.n_nodes < 2:
        raise NoValidTarget("tree has a single leaf")
    x = np.asarray(x, dtype=np.float64)
    domain = domain or FeatureDomain(TABULAR)
    before = model.predict(x)
    x_adv = x.copy()
    for _ in range(max(budget, 0)):
        if model.predict(x_adv) != before:
            break
        leaf = int(model.apply(x_adv))
        goal = _nearest_other_leaf(model, leaf)
        if goal is None:
            break
        here, there = model.path(leaf), model.path(goal)
        depth = sum(1 for a, b in zip(here, there) if a == b)
        common = there[depth - 1]
        f, t = model.feature[common], model.threshold[common]
        to_left = there[depth] == model.left[common]
        if domain.kind == BINARY:
            x_adv[f] = 0.0 if to_left else 1.0
        else:
            x_adv[f] = t - DT_MARGIN if to_left else t + DT_MARGIN
            if domain.kind == PIXEL:
                x_adv[f] = min(max(x_adv[f], 0.0), 1.0)
    after = model.predict(x_adv)
    src = before if y is None else int(y)
    return AttackOutcome(x, x_adv, src, before, after, after != before)


# ---------------------------------------------------------------- batches

@dataclass
class CraftResult:
    spec: AttackSpec
    outcomes: list[AttackOutcome] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def adversarial(self) -> np.ndarray:
        if not self.outcomes:
            return np.zeros((0, 0))
        return np.vstack([o.x_adv for o in self.outcomes])

    @property
    def sources(self) -> np.ndarray:
        return np.array([o.source for o in self.outcomes], dtype=np.int64)

    @property
    def predictions(self) -> np.ndarray:
        return np.array([o.pred_after for o in self.outcomes], dtype=np.int64)

    def summary(self) -> dict:
        """Success rate over all outcomes; perturbation means over successes."""
        ok = [o for o in self.outcomes if o.succeeded]
        out = {"attack": self.spec.to_dict(), "n": self.n, "succeeded": len(ok),
               "success_rate": len(ok) / self.n if self.n else None,
               "no_samples": self.n == 0}
        if self.spec.kind in ("fgsm", "svm_shift"):
            out["epsilon"] = self.spec.epsilon
            out["mean_linf"] = float(np.mean([np.abs(o.delta).max(initial=0.0) for o in ok])) if ok else None
        out["mean_features_changed"] = float(np.mean([o.features_changed for o in ok])) if ok else None
        return out


def craft_batch(model: Classifier, dataset: Dataset, spec: AttackSpec, rng=None) -> CraftResult:
    """Apply ``spec`` to every row of ``dataset``. ``rng`` is accepted for
    interface symmetry; every attack here is deterministic."""
    x, y, dom = dataset.features, dataset.labels, dataset.domain
    res = CraftResult(spec)
    if not len(dataset):
        return res
    if spec.kind in ("fgsm", "jsma"):
        _require_differentiable(model, spec.kind)
    before = model.predict(x)
    if spec.kind == "fgsm":
        x_adv = fgsm_batch(model, x, y, spec.epsilon, dom, spec.variance_scaled)
        after = model.predict(x_adv)
        res.outcomes = [AttackOutcome(x[i], x_adv[i], int(y[i]), int(before[i]), int(after[i]),
                                      bool(after[i] != y[i])) for i in range(len(y))]
    elif spec.kind == "jsma":
        targets = choose_target(model, model.predict_proba(x), spec.target)
        x_adv = jsma_batch(model, x, targets, spec.budget, dom)
        after = model.predict(x_adv)
        res.outcomes = [AttackOutcome(x[i], x_adv[i], int(y[i]), int(before[i]), int(after[i]),
                                      bool(after[i] == targets[i]), int(targets[i])) for i in range(len(y))]
    elif spec.kind == "svm_shift":
        if model.family != "linear_svm":
            raise UnsupportedOperation(f"svm_shift needs a linear_svm, got {model.family}")
        targets = choose_target(model, model.predict_proba(x), spec.target)
        res.outcomes = [svm_shift(model, x[i], int(targets[i]), spec.epsilon, dom, int(y[i]),
                                  spec.variance_scaled) for i in range(len(y))]
    else:
        res.outcomes = [dt_path(model, x[i], spec.budget, dom, int(y[i])) for i in range(len(y))]
    return res
