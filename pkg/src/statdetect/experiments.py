"""Desk-scale versions of the detection experiments on synthetic digits.

Each ``table*``/``fig3`` function returns a :class:`Report` with its result
rows and the ordinal properties checked on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, defense, stats
from .attacks import AttackSpec
from .data import Dataset, geometric_perturb, synth_digits
from .models import TrainConfig, accuracy, train
from .numerics import KernelSpec, derive_seed, median_pairwise_distance

DIGITS_CONFIG = TrainConfig(hidden=(512,))
JSMA_BUDGET = 10
SIZES = (10, 20, 50, 100)
FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class Report:
    name: str
    rows: list[dict] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"table": self.name, "passed": self.passed, "rows": self.rows,
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks]}


@dataclass
class DigitsSetup:
    seed: int
    train: Dataset
    reference: Dataset
    source: Dataset
    benign: Dataset
    config: TrainConfig
    _models: dict = field(default_factory=dict)

    def model(self, family: str):
        if family not in self._models:
            self._models[family] = train(family, self.train, replace(self.config, seed=derive_seed(self.seed, 9)))
        return self._models[family]


def digits_setup(seed: int = 0, per_class: int = 100, pool_per_class: int = 50,
                 config: TrainConfig = DIGITS_CONFIG) -> DigitsSetup:
    """Independent draws: training set, reference pool, attack-source pool
    and a benign held-out pool (``pool_per_class`` rows per class each)."""
    return DigitsSetup(
        seed,
        synth_digits(per_class, derive_seed(seed, 0)),
        synth_digits(pool_per_class, derive_seed(seed, 1)),
        synth_digits(pool_per_class, derive_seed(seed, 2)),
        synth_digits(pool_per_class, derive_seed(seed, 3)),
        config,
    )


def successful(res: attacks.CraftResult) -> attacks.CraftResult:
    return attacks.CraftResult(res.spec, [o for o in res.outcomes if o.succeeded])


def fmt(v) -> str:
    return "none" if v is None else f"{v:g}"


# ---------------------------------------------------------------- statistics

def table1(s: DigitsSetup) -> Report:
    """MMD / energy distance of manipulated sets to the reference pool."""
    mlp = s.model("mlp")
    sets = {
        ("Original", "-"): s.benign.features,
        ("FGSM", "eps=0.07"): attacks.craft_batch(mlp, s.source, AttackSpec("fgsm", 0.07)).adversarial,
        ("FGSM", "eps=0.275"): attacks.craft_batch(mlp, s.source, AttackSpec("fgsm", 0.275)).adversarial,
        ("FGSM", "eps=0.3"): attacks.craft_batch(mlp, s.source, AttackSpec("fgsm", 0.3)).adversarial,
        ("JSMA", f"budget={JSMA_BUDGET}"): attacks.craft_batch(mlp, s.source, AttackSpec("jsma", budget=JSMA_BUDGET)).adversarial,
        ("DT attack", "budget=5"): attacks.craft_batch(s.model("decision_tree"), s.source, AttackSpec("dt_path", budget=5)).adversarial,
        # 0.25 per pixel over 64 pixels is an l2 step of 2
        ("SVM attack", "eps=2.0"): attacks.craft_batch(s.model("linear_svm"), s.source, AttackSpec("svm_shift", 2.0)).adversarial,
        ("Flipped", "-"): geometric_perturb(s.benign, "flip").features,
        ("Subsampling", "side=2"): geometric_perturb(s.benign, "subsample", 2).features,
        ("Gaussian Blur", "r=1"): geometric_perturb(s.benign, "gaussian_blur", 1).features,
    }
    kernel = KernelSpec(bandwidth=median_pairwise_distance(s.reference.features, s.benign.features))
    rows = []
    for (name, param), x in sets.items():
        rows.append({"manipulation": name, "parameters": param,
                     "mmd": stats.mmd_biased(s.reference.features, x, kernel),
                     "ed": stats.energy_distance(s.reference.features, x)})
    mmd = {(r["manipulation"], r["parameters"]): r["mmd"] for r in rows}
    orig, lo, hi = mmd[("Original", "-")], mmd[("FGSM", "eps=0.07")], mmd[("FGSM", "eps=0.3")]
    checks = [
        Check("mmd_fgsm_large_gt_benign", hi > orig, f"{hi:.4f} > {orig:.4f}"),
        Check("mmd_fgsm_large_gt_small", hi > lo, f"{hi:.4f} > {lo:.4f}"),
        Check("mmd_fgsm_small_gt_benign", lo > orig, f"{lo:.4f} > {orig:.4f}"),
    ]
    return Report("table1", rows, checks)


def table2a(s: DigitsSetup, sizes=SIZES, repetitions=200, bootstrap=1000, threads=1) -> Report:
    """Minimal confidently-detected sample size per attack."""
    runs = {
        "benign": s.benign.features,
        "fgsm:0.3": successful(attacks.craft_batch(s.model("mlp"), s.source, AttackSpec("fgsm", 0.3))).adversarial,
        f"jsma:{JSMA_BUDGET}": successful(attacks.craft_batch(s.model("mlp"), s.source,
                                                              AttackSpec("jsma", budget=JSMA_BUDGET))).adversarial,
        "svm_shift:2.0": successful(attacks.craft_batch(s.model("linear_svm"), s.source,
                                                       AttackSpec("svm_shift", 2.0))).adversarial,
        "dt_path:5": successful(attacks.craft_batch(s.model("decision_tree"), s.source,
                                                   AttackSpec("dt_path", budget=5))).adversarial,
    }
    rows, minimal = [], {}
    for i, (name, cand) in enumerate(runs.items()):
        usable = [z for z in sizes if z <= min(len(cand), len(s.reference))]
        sw = stats.confident_detection_sweep(s.reference, cand, usable, repetitions, bootstrap=bootstrap,
                                             rng=derive_seed(s.seed, 20, i), threads=threads)
        minimal[name] = sw.minimal_size
        rows += [{"candidates": name, **r} for r in sw.rows()]
    fg = minimal["fgsm:0.3"]
    checks = [
        Check("fgsm_confident_at_or_below_100", fg is not None and fg <= 100, f"minimal size {fmt(fg)}"),
        Check("benign_never_confident", minimal["benign"] is None, f"minimal size {fmt(minimal['benign'])}"),
    ]
    return Report("table2a", rows, checks)


def classwise_vs_plain(s: DigitsSetup, sizes=SIZES, repetitions=200, bootstrap=1000, threads=1):
    """JSMA candidates: plain sweep versus class-wise sweeps (O and P)."""
    res = successful(attacks.craft_batch(s.model("mlp"), s.source, AttackSpec("jsma", budget=JSMA_BUDGET)))
    cand = res.adversarial
    usable = [z for z in sizes if z <= len(cand)]
    plain = stats.confident_detection_sweep(s.reference, cand, usable, repetitions, bootstrap=bootstrap,
                                            rng=derive_seed(s.seed, 30), threads=threads)
    small = [z for z in sizes if z <= 50]
    grouped = {
        g: stats.classwise_test(s.reference, cand, labels, g, small, repetitions, bootstrap=bootstrap,
                                rng=derive_seed(s.seed, 31), threads=threads)
        for g, labels in (("O", res.sources), ("P", res.predictions))
    }
    return plain, grouped


def table2b(s: DigitsSetup, sizes=SIZES, repetitions=200, bootstrap=1000, threads=1) -> Report:
    plain, grouped = classwise_vs_plain(s, sizes, repetitions, bootstrap, threads)
    rows = [{"grouping": "none", "class": "all", **r} for r in plain.rows()]
    for g, cw in grouped.items():
        for c, sw in cw.per_class.items():
            rows += [{"grouping": g, "class": c, **r} for r in sw.rows()]
    p = grouped["P"].mean_minimal_size
    ref = plain.minimal_size
    ok = p is not None and (ref is None or p <= ref)
    checks = [Check("classwise_P_not_worse_than_plain", ok,
                    f"P mean minimal {fmt(p)}, O mean minimal {fmt(grouped['O'].mean_minimal_size)}, plain {fmt(ref)}")]
    return Report("table2b", rows, checks)


def fig3(s: DigitsSetup, sizes=(20, 50), fractions=FRACTIONS, repetitions=200, bootstrap=1000, threads=1) -> Report:
    adv = successful(attacks.craft_batch(s.model("mlp"), s.source, AttackSpec("fgsm", 0.3))).adversarial
    grid = stats.mixture_sweep(s.reference, adv, s.benign, fractions, sizes, repetitions, bootstrap=bootstrap,
                               rng=derive_seed(s.seed, 40), threads=threads)
    checks = [Check("acceptance_monotone_in_benign_fraction", grid.monotone(0.05),
                    "; ".join(f"size {z}: " + ",".join(f"{a:.3f}" for a in grid.acceptance[:, j])
                              for j, z in enumerate(grid.sizes)))]
    return Report("fig3", grid.rows(), checks)


# ---------------------------------------------------------------- defense

def augmented(s: DigitsSetup, spec: AttackSpec, family: str = "mlp"):
    plan = defense.AugmentedTrainPlan(s.config, [spec])
    return defense.train_augmented(family, s.train, plan, derive_seed(s.seed, 50)), plan


def table3(s: DigitsSetup, epsilons=(0.2, 0.275, 0.3, 0.4, 0.5)) -> Report:
    fg = AttackSpec("fgsm", 0.275)
    model, _ = augmented(s, fg)
    base = s.model("mlp")
    rows = []
    for spec in [AttackSpec("fgsm", e) for e in epsilons] + [AttackSpec("jsma", budget=JSMA_BUDGET)]:
        bd = defense.evaluate_detection(model, s.source, spec)
        rows.append({"attack": spec.kind, "parameter": spec.parameter, "recovered": bd.recovered_rate,
                     "detected": bd.detected_rate, "error": bd.error_rate, "n": bd.n})
    at = next(r for r in rows if r["attack"] == "fgsm" and r["parameter"] == 0.275)
    acc_base, acc_aug = accuracy(base, s.benign), accuracy(model, s.benign)
    fo = defense.false_outlier_rate(model, s.benign)
    checks = [
        Check("detected_at_training_eps", at["detected"] >= 0.80, f"detected {at['detected']:.3f} >= 0.80"),
        Check("rates_partition", all(abs(r["recovered"] + r["detected"] + r["error"] - 1) < 1e-12 for r in rows),
              "recovered + detected + error = 1 on every row"),
        Check("benign_accuracy_cost", acc_aug >= acc_base - 0.02, f"augmented {acc_aug:.3f} vs base {acc_base:.3f}"),
        Check("false_outlier_rate", fo <= 0.02, f"{fo:.4f} <= 0.02"),
    ]
    return Report("table3", rows, checks)


def table5(s: DigitsSetup, epsilons=(0.1, 0.275, 0.4, 0.6)) -> Report:
    js, fg = AttackSpec("jsma", budget=JSMA_BUDGET), AttackSpec("fgsm", 0.275)
    m_js, _ = augmented(s, js)
    m_fg, _ = augmented(s, fg)
    table = defense.adaptive_matrix(m_js, [AttackSpec("fgsm", e) for e in epsilons], s.source)
    table += defense.adaptive_matrix(m_fg, [js], s.source)
    rows = [r.to_dict() for r in table]
    js_fg = max(r["error"] for r in rows if r["train_attack"].startswith("jsma") and r["parameter"] >= 0.275)
    fg_js = next(r["error"] for r in rows if r["train_attack"].startswith("fgsm"))
    checks = [
        Check("jsma_trained_resists_fgsm", js_fg <= 0.10, f"max error at eps>=0.275: {js_fg:.3f} <= 0.10"),
        Check("fgsm_trained_weaker_on_jsma", fg_js >= 3 * js_fg, f"{fg_js:.3f} >= 3 x {js_fg:.3f}"),
    ]
    return Report("table5", rows, checks)


def table6(s: DigitsSetup, epsilons=(0.1, 0.275, 0.4), kinds=("bb", "bb+1")) -> Report:
    victim, plan = augmented(s, AttackSpec("fgsm", 0.275))
    rows = []
    for kind in kinds:
        sub = defense.make_substitute(kind, "mlp", s.train, plan, derive_seed(s.seed, 60))
        for spec in [AttackSpec("fgsm", e) for e in epsilons] + [AttackSpec("jsma", budget=JSMA_BUDGET)]:
            tr = defense.blackbox_transfer(victim, sub, s.source, spec)
            rows.append({"substitute": kind, "attack": spec.kind, "parameter": spec.parameter,
                         "recovered": tr.result.recovered_rate, "detected": tr.result.detected_rate,
                         "error": tr.result.error_rate, "agreement": tr.agreement})
    bb = {r["parameter"]: r for r in rows if r["substitute"] == "bb" and r["attack"] == "fgsm"}
    big = [r["error"] for p, r in bb.items() if p >= 0.275]
    checks = [
        Check("bb_detection_grows_with_eps", bb[0.275]["detected"] >= bb[0.1]["detected"],
              f"{bb[0.275]['detected']:.3f} >= {bb[0.1]['detected']:.3f}"),
        Check("bb_error_small_at_large_eps", max(big) <= 0.05, f"max error {max(big):.3f} <= 0.05"),
    ]
    return Report("table6", rows, checks)


TABLES = {
    "table1": table1,
    "table2a": table2a,
    "table2b": table2b,
    "table3": table3,
    "table5": table5,
    "table6": table6,
    "fig3": fig3,
}
