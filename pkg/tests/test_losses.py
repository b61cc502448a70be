import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_diff, rel_err

from segrobust.core import ConfigError, softmax
from segrobust.losses import (LOSS_KINDS, ClassWeights, baseline_weighted_ce, ce_loss, evaluate,
                              js_loss, masked_ce_loss, segpgd_lambda)

WEIGHTS = ClassWeights.from_counts([10, 40, 25])


def one(u):
    return np.array(u, dtype=np.float64)[None, None, :]


def y0(y=0):
    return np.array([[y]])


def test_ce_two_class_uniform():
    ev = ce_loss(one([0.0, 0.0]), y0())
    assert ev.total == pytest.approx(np.log(2), abs=1e-15)
    assert np.allclose(ev.grad[0, 0], [-0.5, 0.5])


def test_ce_confident_correct():
    ev = ce_loss(one([40.0, -40.0]), y0())
    assert ev.total < 1e-30
    assert np.abs(ev.grad).max() < 1e-30


def test_ce_gradient_norm_at_lower_bound():
    """K=2, p=(0.5, 0.5): squared norm 0.5 equals the lower bound; upper bound is 0.75."""
    g = ce_loss(one([0.0, 0.0]), y0()).grad[0, 0]
    q = 1 - softmax(np.array([0.0, 0.0]))[0]
    lower, upper = 2 / (2 - 1) * q**2, q**2 + q
    assert (g**2).sum() == pytest.approx(lower) == pytest.approx(0.5)
    assert upper == pytest.approx(0.75) and (g**2).sum() < upper


def test_js_identical_distributions():
    ev = js_loss(one([60.0, -60.0]), y0())
    assert ev.total == pytest.approx(0.0, abs=1e-15)
    assert np.abs(ev.grad).max() < 1e-15


def test_js_two_class_uniform():
    """Value 0.215761 and gradient (-0.137327, 0.137327) at p=(0.5, 0.5)."""
    ev = js_loss(one([0.0, 0.0]), y0())
    # (KL(p || m) + KL(e_y || m)) / 2 with m = (p + e_y) / 2
    m = np.array([0.75, 0.25])
    ref = 0.5 * (np.log(1 / m[0])) + 0.5 * (0.5 * np.log(0.5 / m[0]) + 0.5 * np.log(0.5 / m[1]))
    assert ev.total == pytest.approx(ref, abs=1e-12)
    assert ev.total == pytest.approx(0.215761, abs=1e-6)
    assert np.allclose(ev.grad[0, 0], [-0.137327, 0.137327], atol=1e-6)
    fd = central_diff(lambda u: js_loss(u, y0()).total, one([0.0, 0.0]))
    assert np.allclose(ev.grad, fd, atol=1e-9)


def test_js_vanishing_gradient():
    ev = js_loss(one([-40.0, 0.0, 0.0]), y0())
    assert np.linalg.norm(ev.grad) < 1e-12


@settings(max_examples=200)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_js_bounded(u, data):
    y = data.draw(st.integers(0, len(u) - 1))
    v = js_loss(one(u), y0(y)).total
    assert -1e-12 <= v <= np.log(2) + 1e-12


def test_masked_ce_correct_pixel():
    ev = masked_ce_loss(one([2.0, 0.0]), y0())
    assert ev.total == pytest.approx(np.log1p(np.exp(-2.0)), abs=1e-15)
    assert ev.total == pytest.approx(0.126928, abs=1e-6)
    p = softmax(np.array([2.0, 0.0]))
    assert np.allclose(ev.grad[0, 0], p - [1, 0])


def test_masked_ce_misclassified_pixel():
    ev = masked_ce_loss(one([0.0, 2.0]), y0())
    assert ev.total == 0.0
    assert not ev.grad.any()


def test_masked_ce_balanced_weight():
    w = ClassWeights.from_counts([10, 40])
    bal = masked_ce_loss(one([0.0, 2.0]), y0(1), balanced=True, weights=w)
    plain = masked_ce_loss(one([0.0, 2.0]), y0(1))
    assert bal.total == pytest.approx(0.025 * plain.total)


def test_masked_ce_errors():
    with pytest.raises(ConfigError):
        masked_ce_loss(one([0.0, 1.0]), y0(), balanced=True)
    with pytest.raises(ConfigError):
        masked_ce_loss(one([0.0, 1.0, 2.0]), y0(1), balanced=True,
                       weights=ClassWeights.from_counts([5, 0, 3]))


def test_masked_ce_equals_ce_when_all_correct():
    u = np.zeros((3, 3, 4))
    u[..., 2] = 3.0
    y = np.full((3, 3), 2)
    assert masked_ce_loss(u, y).total == pytest.approx(ce_loss(u, y).total)


def test_segpgd_weights():
    assert segpgd_lambda(1, 10) == 0.0
    assert segpgd_lambda(6, 10) == pytest.approx(0.25)
    ev = baseline_weighted_ce(np.stack([one([1.0, 0.0])[0], one([0.0, 1.0])[0]]),
                              np.array([[0], [0]]), "segpgd", 6, 10)
    assert np.allclose(ev.pixel_weights.ravel(), [0.75, 0.25])
    ev1 = baseline_weighted_ce(one([0.0, 1.0]), y0(), "segpgd", 1, 10)
    assert ev1.total == 0.0
    with pytest.raises(ConfigError):
        segpgd_lambda(0, 10)
    with pytest.raises(ConfigError):
        segpgd_lambda(11, 10)


def test_cospgd_weight():
    ev = baseline_weighted_ce(one([0.0, 0.0]), y0(), "cospgd")
    assert ev.pixel_weights[0, 0] == pytest.approx(0.5 / np.sqrt(0.5), abs=1e-12)
    assert ev.pixel_weights[0, 0] == pytest.approx(0.707107, abs=1e-6)


def test_label_out_of_range():
    for kind in ("ce", "js", "mce"):
        with pytest.raises(ConfigError):
            evaluate(kind, one([0.0, 0.0]), y0(2))


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_gradients_match_finite_differences(kind):
    """Away from mask switches, every loss gradient equals the numerical one."""
    rng = np.random.default_rng(LOSS_KINDS.index(kind))
    u = rng.normal(scale=2.0, size=(3, 4, 3))
    y = rng.integers(0, 3, size=(3, 4))
    ev = evaluate(kind, u, y, weights=WEIGHTS, t=4, T=10)
    # the weights are constants of the iteration, so freeze them for the oracle
    w = ev.pixel_weights

    def value(z):
        if w is None:
            return evaluate(kind, z, y, weights=WEIGHTS, t=4, T=10).total
        return float((w * ce_loss(z, y).values).sum())
    assert rel_err(ev.grad, central_diff(value, u)) < 1e-6


@settings(max_examples=300)
@given(st.integers(2, 21).flatmap(
    lambda k: st.tuples(st.just(k), st.lists(st.floats(-20, 20), min_size=k, max_size=k),
                        st.integers(0, k - 1))))
def test_ce_gradient_norm_bounds(case):
    k, u, y = case
    p = softmax(np.array(u))
    g = ce_loss(one(u), y0(y)).grad[0, 0]
    n2 = (g**2).sum()
    q = 1 - p[y]
    assert k / (k - 1) * q**2 <= n2 + 1e-12
    assert n2 <= q**2 + q + 1e-12
