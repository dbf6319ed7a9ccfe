import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import linalg
from scipy.stats import binom, chi2

from tfdlab.datasets import SyntheticSpec, ring_means, sample_batch
from tfdlab.metrics import (MetricRecord, MetricsFile, budgeted_best, frechet_from_moments, gaussian_frechet,
                            max_pairwise_similarity, mmd_squared, mode_coverage, read_metrics, with_budget_best)
from tfdlab.numerics import ContractError, NumericError

RING = SyntheticSpec()


def scipy_frechet(a, b):
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    root = linalg.sqrtm(ca @ cb).real
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(ca + cb - 2 * root))


def test_frechet_identical_sets_zero():
    x = np.random.default_rng(0).standard_normal((300, 3))
    assert abs(gaussian_frechet(x, x)) < 1e-9


def test_frechet_population_examples():
    assert frechet_from_moments([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-8)
    cov = np.array([[0.5, 0.1], [0.1, 0.3]])
    mu1, mu2 = np.array([1.0, -2.0]), np.array([0.5, 0.5])
    assert frechet_from_moments(mu1, cov, mu2, cov) == pytest.approx(((mu1 - mu2) ** 2).sum(), abs=1e-8)


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(1)
    for d in (2, 5):
        a = rng.standard_normal((200, d)) @ rng.standard_normal((d, d))
        b = rng.standard_normal((150, d)) @ rng.standard_normal((d, d)) + 0.3
        assert gaussian_frechet(a, b) == pytest.approx(scipy_frechet(a, b), rel=1e-7, abs=1e-9)


def test_frechet_errors():
    with pytest.raises(ContractError):
        gaussian_frechet(np.ones((2, 2)), np.ones((5, 2)))
    with pytest.raises(NumericError):
        frechet_from_moments([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], np.eye(2))


def test_mmd_examples():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((30, 2)), rng.standard_normal((20, 2)) + 1
    assert mmd_squared(a, a) == 0.0
    assert mmd_squared(a, b) == pytest.approx(mmd_squared(b, a), rel=1e-14)
    delta = 3.0
    assert mmd_squared([[0.0, 0.0]], [[delta, 0.0]], (1.0,)) == pytest.approx(2 - 2 * np.exp(-delta**2 / 2),
                                                                              abs=1e-15)


def test_mode_coverage_examples():
    cov = mode_coverage(ring_means(RING), RING)
    assert cov.modes_hit == 8 and cov.high_quality_fraction == 1.0
    assert mode_coverage(np.tile(ring_means(RING)[2], (50, 1)), RING).modes_hit == 1
    with pytest.raises(ContractError):
        mode_coverage(np.zeros((4, 2)), SyntheticSpec(family="two_moons", num_classes=1))


def test_mode_coverage_true_mixture_binomial_bound():
    # per-mode miss probability from the binomial law of in-radius counts
    n = 4000
    p_in = chi2.cdf(9.0, df=2) / 8          # inside 3 std of one mode
    miss = 8 * binom.cdf(int(np.ceil(0.01 * n)) - 1, n, p_in)
    assert miss < 1e-3
    hits = [mode_coverage(sample_batch(RING, n, np.random.default_rng(s)).points, RING).modes_hit
            for s in range(20)]
    assert hits == [8] * 20


def test_max_pairwise_similarity():
    z = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 0.5], [10.0, 10.0], [10.0, 11.0]])
    labels = np.array([0, 0, 0, 1, 1])
    assert max_pairwise_similarity(z, labels) == pytest.approx((np.exp(-0.5) + np.exp(-1.0)) / 2)
    assert max_pairwise_similarity(z[:2], None) == pytest.approx(np.exp(-3.0))
    assert max_pairwise_similarity(np.array([[1.0, 2.0], [1.0, 2.0]])) == 1.0


def test_budgeted_best_examples():
    trace = [MetricRecord(10, "fd", 5.0, 5.0), MetricRecord(20, "fd", 7.0, 5.0), MetricRecord(30, "fd", 4.0, 4.0)]
    assert budgeted_best(trace, [20]) == {20: 5.0}
    assert budgeted_best([(10, 9.0), (20, 8.0), (30, 1.0)], [15, 25, 30]) == {15: 9.0, 25: 8.0, 30: 1.0}
    out = budgeted_best([(100, 2.5)], [50, 100, 1000])
    assert np.isnan(out[50]) and out[100] == out[1000] == 2.5
    with pytest.raises(ContractError):
        budgeted_best([], [1])
    with pytest.raises(ContractError):
        budgeted_best([(5, 1.0), (3, 2.0)], [10])


def test_with_budget_best_running_min():
    rows = [(0, "a", 3.0), (0, "b", 1.0), (5, "a", 4.0), (10, "a", 2.0)]
    assert [r.budget_best for r in with_budget_best(rows)] == [3.0, 1.0, 3.0, 2.0]


def test_metrics_file_roundtrip_and_truncate(tmp_path):
    f = MetricsFile(tmp_path / "m.csv")
    f.extend([(0, "fd", 0.1), (10, "fd", 1 / 3), (20, "fd", 0.05)])
    f.append(30, "modes", 8)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "step,name,value"
    assert read_metrics(tmp_path / "m.csv", "fd")[1] == (10, "fd", 1 / 3)
    f.truncate_after(10)
    assert [r[0] for r in read_metrics(tmp_path / "m.csv")] == [0, 10]


vals = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), vals), min_size=1, max_size=30),
       st.lists(st.integers(0, 1200), min_size=2, max_size=6))
def test_property_budgeted_best_monotone(records, budgets):
    trace = sorted(records, key=lambda r: r[0])
    out = budgeted_best(trace, sorted(budgets))
    seq = [out[b] for b in sorted(budgets) if not np.isnan(out[b])]
    assert all(y <= x for x, y in zip(seq, seq[1:]))
    for b in budgets:
        prior = [v for s, v in trace if s <= b]
        assert (np.isnan(out[b]) and not prior) or out[b] == min(prior)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 2), elements=st.floats(-3, 3)), arrays(np.float64, (9, 2), elements=st.floats(-3, 3)))
def test_property_frechet_symmetric_nonnegative(a, b):
    if np.linalg.matrix_rank(np.cov(a, rowvar=False)) < 2 or np.linalg.matrix_rank(np.cov(b, rowvar=False)) < 2:
        return
    ab, ba = gaussian_frechet(a, b), gaussian_frechet(b, a)
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-7)
    assert ab > -1e-7


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 7))
def test_property_coverage_rotation_invariant(seed, shift):
    x = sample_batch(RING, 400, np.random.default_rng(seed)).points.data
    ang = 2 * np.pi * shift / 8
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    a, b = mode_coverage(x, RING), mode_coverage(x @ rot.T, RING)
    assert a.modes_hit == b.modes_hit
    assert a.high_quality_fraction == pytest.approx(b.high_quality_fraction)
    assert np.array_equal(np.roll(a.counts, shift), b.counts)
