import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from statdetect.attacks import AttackSpec, craft_batch
from statdetect.data import Dataset
from statdetect.numerics import ContractError, KernelSpec, derive_seed, median_pairwise_distance
from statdetect.stats import (
    classwise_test,
    confident_detection_sweep,
    distance_table,
    energy_distance,
    mixture_sweep,
    mmd_biased,
    null_statistics,
    two_sample_test,
)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def sample(max_rows=6, d=2):
    return st.integers(1, max_rows).flatmap(lambda n: arrays(np.float64, (n, d), elements=finite))


def naive_mmd(x1, x2, sigma):
    def k(a, b):
        return math.exp(-sum((p - q) ** 2 for p, q in zip(a, b)) / (2 * sigma * sigma))

    xx = sum(k(a, b) for a in x1 for b in x1) / len(x1) ** 2
    yy = sum(k(a, b) for a in x2 for b in x2) / len(x2) ** 2
    xy = sum(k(a, b) for a in x1 for b in x2) / (len(x1) * len(x2))
    return math.sqrt(max(xx + yy - 2 * xy, 0.0))


def naive_energy(x1, x2):
    def mean_dist(u, v):
        return sum(math.dist(a, b) for a in u for b in v) / (len(u) * len(v))

    return 2 * mean_dist(x1, x2) - mean_dist(x1, x1) - mean_dist(x2, x2)


# ---------------------------------------------------------------- statistics

def test_mmd_examples():
    assert mmd_biased([[0.0]], [[0.0]], KernelSpec(bandwidth=1.0)) == 0.0
    want = math.sqrt(2 - 2 * math.exp(-0.5))
    got = mmd_biased([[0.0]], [[1.0]], KernelSpec(bandwidth=1.0))
    assert got == pytest.approx(want, abs=1e-15)
    # the commonly quoted rounding 0.88714 is off in the fifth decimal
    assert got == pytest.approx(0.887096, abs=1e-6)


def test_energy_examples():
    assert energy_distance([[0.0]], [[0.0]]) == 0.0
    assert energy_distance([[0.0]], [[1.0]]) == 2.0


@given(sample(), sample(), st.floats(0.1, 10))
def test_mmd_matches_naive_loops(x1, x2, sigma):
    # squared values: the root amplifies rounding near zero
    got = mmd_biased(x1, x2, KernelSpec(bandwidth=sigma)) ** 2
    assert got == pytest.approx(naive_mmd(x1, x2, sigma) ** 2, abs=1e-12)


@given(sample(), sample())
def test_energy_matches_naive_loops(x1, x2):
    assert energy_distance(x1, x2) == pytest.approx(naive_energy(x1, x2), abs=1e-10)


@given(sample(), sample(), st.integers(0, 2**32))
def test_mmd_properties(x1, x2, seed):
    spec = KernelSpec(bandwidth=median_pairwise_distance(x1, x2))
    v = mmd_biased(x1, x2, spec)
    assert v >= 0
    assert v**2 == pytest.approx(mmd_biased(x2, x1, spec) ** 2, abs=1e-12)
    rng = np.random.default_rng(seed)
    permuted = mmd_biased(x1[rng.permutation(len(x1))], x2[rng.permutation(len(x2))], spec)
    assert permuted**2 == pytest.approx(v**2, abs=1e-12)
    assert mmd_biased(x1, x1.copy(), spec) == 0.0


@given(sample(), sample())
def test_energy_properties(x1, x2):
    e = energy_distance(x1, x2)
    assert e >= -1e-9
    assert e == pytest.approx(energy_distance(x2, x1), abs=1e-9)
    assert energy_distance(x1, x1) == pytest.approx(0.0, abs=1e-9)


def test_energy_nonnegative_random_pairs(rng):
    for _ in range(100):
        n, m, d = rng.integers(1, 12, size=3)
        assert energy_distance(rng.normal(size=(n, d)), rng.normal(size=(m, d)) + rng.normal()) >= -1e-12


def test_statistic_errors():
    with pytest.raises(ContractError):
        mmd_biased([[0.0]], [[1.0]], KernelSpec("identity"))
    with pytest.raises(ContractError):
        mmd_biased(np.zeros((0, 1)), [[1.0]])
    with pytest.raises(ContractError):
        energy_distance([[0.0, 1.0]], [[1.0]])


def test_default_bandwidth_is_median_heuristic(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
    sigma = median_pairwise_distance(a, b)
    assert mmd_biased(a, b) == mmd_biased(a, b, KernelSpec(bandwidth=sigma))


def test_distance_table_shares_bandwidth(rng):
    ref = rng.normal(size=(20, 2))
    rows = distance_table(ref, {"near": ref + 0.1, "far": ref + 3})
    assert rows[0]["bandwidth"] == rows[1]["bandwidth"]
    assert rows[1]["mmd"] > rows[0]["mmd"] and rows[1]["ed"] > rows[0]["ed"]


# ---------------------------------------------------------------- test

def test_identical_samples_accept(rng):
    x = rng.normal(size=(15, 3))
    for b in (1, 10, 500):
        rep = two_sample_test(x, x, bootstrap=b, rng=4)
        assert rep.statistic == 0.0 and rep.p_value == 1.0 and rep.decision == "accept"


def test_null_matches_explicit_permutations(rng):
    x = rng.normal(size=(7, 2))
    k = np.exp(-((x[:, None] - x[None]) ** 2).sum(-1) / 2)
    null = null_statistics(k, 3, 4, 5, np.random.default_rng(9))
    g = np.random.default_rng(9)
    perms = g.permuted(np.tile(np.arange(7), (5, 1)), axis=1)
    for b, p in enumerate(perms):
        a, c = x[p[:3]], x[p[3:]]
        assert null[b] == pytest.approx(naive_mmd(a, c, 1.0) ** 2, abs=1e-12)


def test_bootstrap_weights_sum(rng):
    k = np.ones((6, 6))
    # constant kernel: every split gives statistic zero under either method
    for method in ("permutation", "bootstrap"):
        np.testing.assert_allclose(null_statistics(k, 3, 3, 50, rng, method), 0.0, atol=1e-12)
    with pytest.raises(ContractError):
        null_statistics(k, 3, 3, 5, rng, "jackknife")


def test_shifted_gaussians_reject():
    rng = np.random.default_rng(0)
    for trial in range(20):
        rep = two_sample_test(rng.normal(size=(50, 1)), rng.normal(3, 1, size=(50, 1)), rng=trial)
        assert rep.p_value < 0.01 and rep.decision == "reject"


def test_same_distribution_mostly_accepts():
    rng = np.random.default_rng(1)
    accepts = sum(two_sample_test(rng.normal(size=(50, 1)), rng.normal(size=(50, 1)), rng=t).decision == "accept"
                  for t in range(20))
    assert accepts >= 18


def test_bootstrap_method_runs(rng):
    a, b = rng.normal(size=(30, 2)), rng.normal(2, 1, size=(30, 2))
    rep = two_sample_test(a, b, method="bootstrap", rng=1)
    assert rep.method == "bootstrap" and rep.decision == "reject"


@given(st.integers(0, 1000), st.integers(1, 200))
def test_pvalue_range_and_determinism(seed, b):
    rng = np.random.default_rng(seed)
    a, c = rng.normal(size=(5, 2)), rng.normal(size=(6, 2))
    r1, r2 = two_sample_test(a, c, bootstrap=b, rng=seed), two_sample_test(a, c, bootstrap=b, rng=seed)
    assert 0 < r1.p_value <= 1 and r1 == r2
    assert r1.p_value >= 1 / (b + 1)


def test_two_sample_errors():
    with pytest.raises(ContractError):
        two_sample_test([[0.0]], [[1.0], [2.0]])
    with pytest.raises(ContractError):
        two_sample_test([[0.0], [1.0]], [[1.0], [2.0]], bootstrap=0)


# ---------------------------------------------------------------- protocols

def test_sweep_nominal_level():
    rng = np.random.default_rng(2)
    ref, cand = rng.random((400, 3)), rng.random((400, 3))
    sw = confident_detection_sweep(ref, cand, [10, 30], repetitions=200, rng=5)
    for a in sw.acceptance:
        assert abs(a - 0.95) <= 0.07
    assert sw.minimal_size is None


def test_sweep_disjoint_support():
    rng = np.random.default_rng(3)
    ref, cand = rng.random((200, 3)), rng.random((200, 3)) + 10
    sw = confident_detection_sweep(ref, cand, [10, 50, 100], repetitions=20, bootstrap=200, rng=0)
    assert sw.sizes == (10, 50, 100) and sw.minimal_size == 10
    assert [r["size"] for r in sw.rows()] == [10, 50, 100]


def test_sweep_thread_independent():
    rng = np.random.default_rng(4)
    ref, cand = rng.random((100, 2)), rng.random((100, 2)) + 0.3
    one = confident_detection_sweep(ref, cand, [5, 10], repetitions=30, bootstrap=100, rng=8, threads=1)
    many = confident_detection_sweep(ref, cand, [5, 10], repetitions=30, bootstrap=100, rng=8, threads=3)
    assert one == many


def test_sweep_errors(rng):
    with pytest.raises(ContractError):
        confident_detection_sweep(rng.random((5, 2)), rng.random((50, 2)), [10])
    with pytest.raises(ContractError):
        confident_detection_sweep(rng.random((5, 2)), rng.random((50, 2)), [])


def test_classwise_single_class_equals_plain(rng):
    ref = Dataset(rng.random((60, 2)), np.repeat([0, 1], 30), 2)
    cand = rng.random((30, 2)) + 0.5
    cw = classwise_test(ref, cand, np.ones(30, int), "O", [5, 20], repetitions=20, bootstrap=100, rng=3)
    plain = confident_detection_sweep(ref.of_class(1), cand, [5, 20], 20, bootstrap=100, rng=derive_seed(3, 1))
    assert list(cw.per_class) == [1] and cw.per_class[1] == plain


def test_classwise_targeted_lands_in_one_partition(digits_mlp, digits_small):
    res = craft_batch(digits_mlp, digits_small, AttackSpec("jsma", budget=20, target=4))
    ok = [o for o in res.outcomes if o.succeeded]
    assert ok
    preds = np.array([o.pred_after for o in ok])
    assert set(preds.tolist()) == {4}


def test_classwise_warnings_and_restriction(rng):
    ref = Dataset(rng.random((40, 2)), np.repeat([0, 1], 20), 2)
    cand = rng.random((16, 2)) + 5
    labels = np.array([0] * 10 + [1] * 6)
    cw = classwise_test(ref, cand, labels, "P", [6, 10], repetitions=10, bootstrap=50, rng=0)
    assert cw.per_class[0].sizes == (6, 10) and cw.per_class[1].sizes == (6,)
    assert any("class 1" in w for w in cw.warnings)
    assert cw.mean_minimal_size == 6.0
    short = classwise_test(ref, cand, labels, "P", [4, 30], repetitions=5, bootstrap=20, rng=0)
    assert not short.per_class and short.mean_minimal_size is None
    with pytest.raises(ContractError):
        classwise_test(ref, cand, labels, "X", [4])


def test_mixture_matches_sweep_at_zero():
    rng = np.random.default_rng(5)
    ref, adv, ben = rng.random((100, 2)), rng.random((100, 2)) + 0.4, rng.random((100, 2))
    grid = mixture_sweep(ref, adv, ben, [0.0, 1.0], [10, 20], repetitions=40, bootstrap=100, rng=6)
    sw = confident_detection_sweep(ref, adv, [10, 20], repetitions=40, bootstrap=100, rng=6)
    assert tuple(grid.acceptance[0]) == sw.acceptance
    assert all(abs(a - 0.95) <= 0.1 for a in grid.acceptance[1])
    assert {r["benign_fraction"] for r in grid.rows()} == {0.0, 1.0}


def test_mixture_monotone_on_separated_pool():
    rng = np.random.default_rng(6)
    ref, adv, ben = rng.random((200, 2)), rng.random((200, 2)) + 3, rng.random((200, 2))
    grid = mixture_sweep(ref, adv, ben, [0.1, 0.5, 0.9], [20, 50], repetitions=100, bootstrap=200, rng=1)
    assert np.all(grid.acceptance[2] >= grid.acceptance[0] - 0.05)
    assert grid.monotone(0.05)


def test_mixture_errors(rng):
    with pytest.raises(ContractError):
        mixture_sweep(rng.random((10, 2)), rng.random((10, 2)), rng.random((10, 2)), [1.5], [5])
    with pytest.raises(ContractError):
        mixture_sweep(rng.random((10, 2)), rng.random((3, 2)), rng.random((10, 2)), [0.0], [5])
