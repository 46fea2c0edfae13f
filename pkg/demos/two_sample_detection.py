"""
Detecting a shifted sample with a kernel two-sample test
=========================================================

Train a small network on synthetic 8x8 digits, perturb a pool of inputs
with FGSM and ask whether the perturbed pool still looks like the training
distribution.
"""

import numpy as np

from statdetect import attacks, stats
from statdetect.attacks import AttackSpec
from statdetect.experiments import digits_setup, successful

s = digits_setup(seed=0)
model = s.model("mlp")
print("benign accuracy", np.mean(model.predict(s.benign.features) == s.benign.labels))

# keep only the inputs that actually flipped the prediction
adv = successful(attacks.craft_batch(model, s.source, AttackSpec("fgsm", 0.3))).adversarial
print("successful adversarial rows", len(adv))

# a single test on 50 rows from each side
rng = np.random.default_rng(1)
ref = s.reference.features[rng.choice(len(s.reference), 50, replace=False)]
for name, pool in (("benign", s.benign.features), ("fgsm 0.3", adv)):
    cand = pool[rng.choice(len(pool), 50, replace=False)]
    rep = stats.two_sample_test(ref, cand, bootstrap=1000, rng=2)
    print(f"{name:>9}: mmd {rep.statistic:.4f}  p {rep.p_value:.4f}  {rep.decision}")

# how many rows are needed before every one of 50 repeats rejects
sweep = stats.confident_detection_sweep(s.reference, adv, [10, 20, 50], repetitions=50, bootstrap=500, rng=3)
for row in sweep.rows():
    print(row)
print("minimal confident size", sweep.minimal_size)
