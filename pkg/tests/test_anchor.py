import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tfdlab import numerics as nx
from tfdlab.anchor import (anchor_margin_loss, build_anchor_bank, generated_support, median_bandwidth,
                           self_support)
from tfdlab.numerics import ContractError, Tensor, finite_difference_check

E1 = math.exp(-1.0)


def loop_support(a, z, h):
    return np.array([sum(math.exp(-math.dist(ai, zj) / h) for zj in z) / len(a) for ai in a])


def loop_self_support(a, h):
    m = len(a)
    return np.array([sum(math.exp(-math.dist(a[i], a[k]) / (2 * h)) for k in range(m) if k != i) / (m - 1)
                     for i in range(m)])


def test_generated_support_examples():
    s = generated_support([[0.0, 0.0], [1.0, 0.0]], Tensor([[0.0, 0.0], [1.0, 0.0]]), 1.0)
    np.testing.assert_allclose(s.data, [(1 + E1) / 2] * 2, atol=1e-15)
    assert s.data[0] == pytest.approx(0.683940, abs=1e-6)
    far = generated_support([[0.0, 0.0], [1.0, 0.0]], Tensor([[1e4, 0.0], [0.0, 1e4]]), 1.0)
    assert np.all(far.data >= 0) and far.data.max() < 1e-300


def test_self_support_examples():
    np.testing.assert_allclose(self_support([[0.0, 0.0], [2.0, 0.0]], 1.0), [E1, E1], atol=1e-15)
    np.testing.assert_array_equal(self_support(np.ones((4, 3)), 0.3), np.ones(4))
    assert self_support([[0.0, 0.0], [1e6, 0.0]], 1.0).max() < 1e-300
    with pytest.raises(ContractError):
        self_support([[0.0, 0.0]], 1.0)


def test_anchor_margin_examples():
    anchors = np.array([[0.0, 0.0], [2.0, 0.0]])
    gen = Tensor([[0.0, 0.0], [1.0, 0.0]])
    loss, _ = anchor_margin_loss(anchors, gen, 1.0, 0.0)
    assert loss.item() == 0.0

    pair = np.array([[0.0, 0.0], [1.0, 0.0]])
    loss, report = anchor_margin_loss(pair, Tensor(pair), 1.0, 0.5)
    assert loss.item() == 0.0 and report.violations == 0

    _, rep = anchor_margin_loss(anchors, Tensor(anchors), 1.0, 0.5)
    np.testing.assert_allclose(rep.thresholds, [0.5 * E1] * 2, atol=1e-15)

    loss, report = anchor_margin_loss(anchors, Tensor([[1e3, 1e3], [-1e3, 1e3]]), 1.0, 0.5)
    assert loss.item() == pytest.approx(0.5 * E1, abs=1e-12)
    assert report.violations == 2


def test_support_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, z = rng.standard_normal((6, 4)), rng.standard_normal((9, 4))
    np.testing.assert_allclose(generated_support(a, Tensor(z), 0.8).data, loop_support(a, z, 0.8), rtol=1e-13)
    np.testing.assert_allclose(self_support(a, 0.8), loop_self_support(a, 0.8), rtol=1e-13)


def test_support_normalizer_switch():
    rng = np.random.default_rng(1)
    a, z = rng.standard_normal((3, 2)), rng.standard_normal((5, 2))
    m = generated_support(a, Tensor(z), 1.0, "M").data
    n = generated_support(a, Tensor(z), 1.0, "N").data
    np.testing.assert_allclose(n * 5, m * 3, rtol=1e-13)
    with pytest.raises(ContractError):
        generated_support(a, Tensor(z), 1.0, "K")


def test_anchor_loss_gradient_finite_differences():
    rng = np.random.default_rng(2)
    anchors = rng.standard_normal((5, 3))
    z0 = anchors[:4] + 0.9 * rng.standard_normal((4, 3))
    f = lambda z: anchor_margin_loss(anchors, z, 0.7, 0.9)[0]
    assert f(Tensor(z0)).item() > 0
    assert finite_difference_check(f, z0) < 1e-4


def test_satisfied_anchors_give_no_gradient():
    anchors = np.array([[0.0, 0.0], [0.3, 0.0]])
    z = Tensor(anchors.copy(), requires_grad=True)
    loss, report = anchor_margin_loss(anchors, z, 1.0, 0.5)
    assert report.violations == 0
    nx.backward(loss)
    np.testing.assert_array_equal(z.grad, np.zeros((2, 2)))


def test_build_anchor_bank():
    rng = np.random.default_rng(3)
    feats = {2: rng.standard_normal((8, 4)), 4: rng.standard_normal((8, 6))}
    whole = build_anchor_bank(feats, 8, np.random.default_rng(0), bandwidth=1.0)
    np.testing.assert_array_equal(whole.anchors[2], feats[2])
    assert whole.layers == [2, 4]
    a = build_anchor_bank(feats, 5, np.random.default_rng(9))
    b = build_anchor_bank(feats, 5, np.random.default_rng(9))
    for layer in (2, 4):
        np.testing.assert_array_equal(a.anchors[layer], b.anchors[layer])
        assert a.bandwidth[layer] == median_bandwidth(a.anchors[layer])
    with pytest.raises(ContractError):
        build_anchor_bank(feats, 9, np.random.default_rng(0))


def test_median_bandwidth_within_groups():
    a = np.array([[0.0], [1.0], [10.0], [13.0]])
    assert median_bandwidth(a) == pytest.approx(np.median([1, 10, 13, 9, 12, 3]))
    assert median_bandwidth(a, 2.0, groups=[0, 0, 1, 1]) == pytest.approx(4.0)


pts = arrays(np.float64, st.tuples(st.integers(2, 6), st.just(3)), elements=st.floats(-2, 2))


@settings(max_examples=50, deadline=None)
@given(pts, pts, st.floats(0.1, 3.0), st.floats(0.0, 2.0))
def test_property_hinge_nonnegative_and_zero_iff_supported(anchors, gen, h, alpha):
    loss, rep = anchor_margin_loss(anchors, Tensor(gen), h, alpha)
    assert loss.item() >= 0
    assert (loss.item() == 0) == bool(np.all(rep.generated_support >= rep.thresholds))


@settings(max_examples=50, deadline=None)
@given(pts, pts, st.floats(0.1, 3.0), st.integers(0, 5), st.floats(0.05, 0.95))
def test_property_moving_toward_violated_anchor_does_not_increase_loss(anchors, gen, h, j, frac):
    loss, rep = anchor_margin_loss(anchors, Tensor(gen), h, 1.0)
    violated = np.flatnonzero(rep.generated_support < rep.thresholds)
    if violated.size == 0:
        return
    i = violated[0]
    j = j % len(gen)
    moved = gen.copy()
    moved[j] = gen[j] + frac * (anchors[i] - gen[j])
    new, _ = anchor_margin_loss(anchors, Tensor(moved), h, 1.0)
    # moving toward anchor i can pull the point away from other anchors; with the
    # others fixed, only anchor i's hinge is guaranteed not to grow
    s_new = generated_support(anchors, Tensor(moved), h).data
    assert rep.thresholds[i] - s_new[i] <= rep.thresholds[i] - rep.generated_support[i] + 1e-12
    if len(anchors) == 1 or np.all(np.delete(s_new, i) >= np.delete(rep.thresholds, i)):
        assert new.item() <= loss.item() + 1e-12


@settings(max_examples=30, deadline=None)
@given(pts, pts, st.floats(0.1, 3.0))
def test_property_alpha_zero_disables(anchors, gen, h):
    z = Tensor(gen, requires_grad=True)
    loss, _ = anchor_margin_loss(anchors, z, h, 0.0)
    assert loss.item() == 0.0
    nx.backward(loss)
    np.testing.assert_array_equal(z.grad, np.zeros_like(gen))
