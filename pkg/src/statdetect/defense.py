"""Outlier-class defense: training with an extra class for adversarial
inputs, and its evaluation under white-box, cross-attack and transferred
(substitute-model) attacks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, craft_batch
from .data import Dataset
from .models import Classifier, TrainConfig, train
from .numerics import ContractError, UnsupportedOperation, derive_seed, draw_seed, make_rng


class EmptyAugmentation(RuntimeError):
    pass


@dataclass
class AugmentedTrainPlan:
    base_config: TrainConfig
    attacks: list[AttackSpec]
    legit_fraction: float = 2.0 / 3.0
    include_failed: bool = True

    def __post_init__(self):
        if not 0.0 < self.legit_fraction < 1.0:
            raise ContractError("legit fraction must lie in (0, 1)")
        if not self.attacks:
            raise ContractError("augmentation needs at least one attack")

    def to_dict(self) -> dict:
        return {"base_config": self.base_config.to_dict(), "attacks": [a.to_dict() for a in self.attacks],
                "legit_fraction": self.legit_fraction, "include_failed": self.include_failed}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentedTrainPlan":
        return cls(TrainConfig(**d["base_config"]), [AttackSpec.from_dict(a) for a in d["attacks"]],
                   d["legit_fraction"], d["include_failed"])


@dataclass
class DetectionBreakdown:
    recovered: int
    detected: int
    error: int
    attack: AttackSpec | None = None
    label: str = ""

    @property
    def n(self) -> int:
        return self.recovered + self.detected + self.error

    def _rate(self, k: int) -> float:
        return k / self.n

    @property
    def recovered_rate(self) -> float:
        return self._rate(self.recovered)

    @property
    def detected_rate(self) -> float:
        return self._rate(self.detected)

    @property
    def error_rate(self) -> float:
        return self._rate(self.error)

    def to_dict(self) -> dict:
        return {"label": self.label, "attack": self.attack.to_dict() if self.attack else None, "n": self.n,
                "recovered": self.recovered_rate, "detected": self.detected_rate, "error": self.error_rate,
                "recovered_count": self.recovered, "detected_count": self.detected, "error_count": self.error}


def breakdown(model: Classifier, x_adv: np.ndarray, sources: np.ndarray, attack: AttackSpec | None = None,
              label: str = "") -> DetectionBreakdown:
    """Sort adversarial inputs into recovered (original label), detected
    (outlier class) and error (anything else)."""
    if not model.outlier:
        raise ContractError("model has no outlier class")
    if not len(sources):
        raise ContractError("no adversarial inputs to evaluate")
    pred = model.predict(x_adv)
    rec = int(np.count_nonzero(pred == sources))
    det = int(np.count_nonzero(pred == model.outlier_index))
    return DetectionBreakdown(rec, det, len(sources) - rec - det, attack, label)


def augmented_batches(n_legit: int, n_adv: int, batch_size: int, legit_fraction: float):
    """Sampler over rows ``[0, n_legit)`` legitimate then ``[n_legit, n_legit+n_adv)``
    adversarial. Each batch holds ``round(legit_fraction*batch_size)`` legitimate
    rows; an epoch covers every legitimate row once, adversarial rows cycle
    through fresh permutations."""
    b_legit = min(max(1, int(round(legit_fraction * batch_size))), batch_size - 1) if batch_size > 1 else 1
    b_adv = max(batch_size - b_legit, 1)

    def sample(rng):
        legit = rng.permutation(n_legit)
        chunks = [legit[i:i + b_legit] for i in range(0, n_legit, b_legit)]
        # a short final batch keeps the same mix
        counts = [b_adv if len(c) == b_legit else max(1, int(round(len(c) * b_adv / b_legit))) for c in chunks]
        need = sum(counts)
        adv = np.concatenate([rng.permutation(n_adv) for _ in range(-(-need // n_adv))])[:need]
        ends = np.cumsum(counts)
        return [np.concatenate([c, n_legit + adv[e - a:e]]) for c, a, e in zip(chunks, counts, ends)]

    return sample


def craft_outliers(model: Classifier, data: Dataset, attacks: list[AttackSpec], include_failed: bool = True) -> np.ndarray:
    """Pool adversarial versions of ``data`` from every attack into one matrix."""
    parts = []
    for spec in attacks:
        res = craft_batch(model, data, spec)
        keep = [o.x_adv for o in res.outcomes if include_failed or o.succeeded]
        if keep:
            parts.append(np.vstack(keep))
    if not parts:
        raise EmptyAugmentation("no adversarial example survived for the outlier class")
    return np.vstack(parts)


def train_augmented(family: str, data: Dataset, plan: AugmentedTrainPlan, rng=0) -> Classifier:
    """Train a base model, craft outliers on it over ``data``, then train a
    fresh model with one extra output on legitimate plus outlier rows mixed
    per batch at ``plan.legit_fraction``."""
    if family == "decision_tree":
        raise UnsupportedOperation("the outlier-class defense needs a gradient-trained family")
    master = int(rng) if not isinstance(rng, np.random.Generator) else draw_seed(rng)
    base_cfg = replace(plan.base_config, seed=derive_seed(master, 0))
    base = train(family, data, base_cfg)
    x_in = craft_outliers(base, data, plan.attacks, plan.include_failed)

    k = data.n_classes
    g = make_rng(derive_seed(master, 1))
    legit_order, adv_order = g.permutation(len(data)), g.permutation(len(x_in))
    n_lv, n_av = len(data) // 10, len(x_in) // 10
    legit_tr, legit_val = legit_order[n_lv:], legit_order[:n_lv]
    adv_tr, adv_val = adv_order[n_av:], adv_order[:n_av]
    x = np.vstack([data.features[legit_tr], x_in[adv_tr]])
    y = np.concatenate([data.labels[legit_tr], np.full(len(adv_tr), k)])
    aug = Dataset(x, y, k + 1, data.domain, data.name + "+outliers")
    validation = None
    if plan.base_config.patience > 0 and n_lv and n_av:
        validation = Dataset(np.vstack([data.features[legit_val], x_in[adv_val]]),
                             np.concatenate([data.labels[legit_val], np.full(n_av, k)]),
                             k + 1, data.domain)
    cfg = replace(plan.base_config, seed=derive_seed(master, 2))
    sampler = augmented_batches(len(legit_tr), len(adv_tr), cfg.batch_size, plan.legit_fraction)
    model = train(family, aug, cfg, outlier=True, batch_sampler=sampler, validation=validation)
    model.meta["augmentation"] = plan.to_dict()
    model.meta["trained_on"] = "+".join(a.label for a in plan.attacks)
    return model


def evaluate_detection(model: Classifier, test: Dataset, attack: AttackSpec, rng=None) -> DetectionBreakdown:
    """White-box: craft on ``model`` itself, then classify the crafted inputs."""
    if not model.outlier:
        raise ContractError("model has no outlier class")
    res = craft_batch(model, test, attack)
    return breakdown(model, res.adversarial, res.sources, attack, attack.label)


@dataclass
class AdaptiveRow:
    train_attack: str
    eval_attack: str
    parameter: float
    result: DetectionBreakdown

    def to_dict(self) -> dict:
        return {"train_attack": self.train_attack, "eval_attack": self.eval_attack,
                "parameter": self.parameter, **{k: v for k, v in self.result.to_dict().items()
                                                if k in ("n", "recovered", "detected", "error")}}


def adaptive_matrix(model: Classifier, eval_attacks: list[AttackSpec], test: Dataset, rng=None,
                    train_attack: str | None = None) -> list[AdaptiveRow]:
    trained = train_attack or model.meta.get("trained_on", "unknown")
    return [AdaptiveRow(trained, a.kind, a.parameter, evaluate_detection(model, test, a, rng))
            for a in eval_attacks]


@dataclass
class TransferResult:
    kind: str
    result: DetectionBreakdown
    agreement: float

    def to_dict(self) -> dict:
        return {"substitute": self.kind, "agreement": self.agreement, **self.result.to_dict()}


def make_substitute(kind: str, family: str, train_data: Dataset, plan: AugmentedTrainPlan, seed: int) -> Classifier:
    """``"bb"``: plain K-class model; ``"bb+1"``: outlier-class model built
    with the victim's plan. Both use the victim's training data and a fresh seed."""
    if kind == "bb":
        return train(family, train_data, replace(plan.base_config, seed=derive_seed(seed, 10)))
    if kind == "bb+1":
        return train_augmented(family, train_data, plan, derive_seed(seed, 11))
    raise ContractError(f"unknown substitute kind {kind!r}")


def blackbox_transfer(victim: Classifier, substitute, test: Dataset, attack: AttackSpec, *,
                      train_data: Dataset | None = None, plan: AugmentedTrainPlan | None = None,
                      rng=0) -> TransferResult:
    """Craft on a substitute, evaluate on the victim.

    ``substitute`` is ``"bb"``, ``"bb+1"`` (trained here from ``train_data``
    and ``plan``) or a ready classifier. Agreement compares the two models'
    predictions over the original classes on the clean test inputs.
    """
    if not victim.outlier:
        raise ContractError("victim has no outlier class")
    if isinstance(substitute, str):
        if train_data is None:
            raise ContractError("substitute training needs the training data")
        if plan is None:
            plan = AugmentedTrainPlan.from_dict(victim.meta["augmentation"])
        kind = substitute
        seed = int(rng) if not isinstance(rng, np.random.Generator) else draw_seed(rng)
        substitute = make_substitute(kind, victim.family, train_data, plan, seed)
    else:
        kind = "given"
    res = craft_batch(substitute, test, attack)
    bd = breakdown(victim, res.adversarial, res.sources, attack, f"{kind}:{attack.label}")
    k = victim.n_classes
    sub_pred = np.argmax(substitute.predict_proba(test.features)[:, :k], axis=1)
    vic_pred = np.argmax(victim.predict_proba(test.features)[:, :k], axis=1)
    return TransferResult(kind, bd, float(np.mean(sub_pred == vic_pred)))


def confusion_matrix(model: Classifier, data: Dataset) -> np.ndarray:
    """``counts[true, predicted]`` over all model outputs."""
    if len(data.labels) and data.labels.max() >= model.n_classes:
        raise ContractError(f"labels must be < {model.n_classes}")
    out = np.zeros((model.n_outputs, model.n_outputs), dtype=np.int64)
    if len(data):
        np.add.at(out, (data.labels, model.predict(data.features)), 1)
    return out


def false_outlier_rate(model: Classifier, data: Dataset) -> float:
    cm = confusion_matrix(model, data)
    return float(cm[:, model.outlier_index].sum() / max(len(data), 1))
