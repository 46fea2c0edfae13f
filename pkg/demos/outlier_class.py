"""
Training with an outlier class
==============================

Add an eleventh output, fill it with FGSM examples crafted on a plain
network, and see where new adversarial inputs end up: back in their
original class, in the outlier class, or somewhere wrong.
"""

from statdetect import defense
from statdetect.attacks import AttackSpec
from statdetect.experiments import digits_setup
from statdetect.models import accuracy

s = digits_setup(seed=0)
fg, js = AttackSpec("fgsm", 0.275), AttackSpec("jsma", budget=10)

plan = defense.AugmentedTrainPlan(s.config, [fg])
model = defense.train_augmented("mlp", s.train, plan, rng=5)

print("benign accuracy  base %.3f  augmented %.3f" % (accuracy(s.model("mlp"), s.benign), accuracy(model, s.benign)))
print("benign flagged as outlier %.4f" % defense.false_outlier_rate(model, s.benign))

for spec in (AttackSpec("fgsm", 0.1), fg, AttackSpec("fgsm", 0.5), js):
    bd = defense.evaluate_detection(model, s.source, spec)
    print(f"{spec.label:>11}  recovered {bd.recovered_rate:.3f}  detected {bd.detected_rate:.3f}  error {bd.error_rate:.3f}")

# an attacker who only sees a substitute trained on the same data
for kind in ("bb", "bb+1"):
    sub = defense.make_substitute(kind, "mlp", s.train, plan, seed=6)
    tr = defense.blackbox_transfer(model, sub, s.source, fg)
    print(f"{kind:>5} transfer: detected {tr.result.detected_rate:.3f}  error {tr.result.error_rate:.3f}")
