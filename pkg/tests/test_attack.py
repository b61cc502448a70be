import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segrobust.attack import (AttackConfig, _checkpoint_params, apgd, attack_dataset,
                              clean_accumulator, pgd, project_linf_box, red_eps_attack,
                              red_eps_slots, run_attack, transfer_eval)
from segrobust.core import ConfigError, NumericInputError, predict, substream
from segrobust.data import generate_dataset
from segrobust.losses import ClassWeights, ce_loss
from segrobust.metrics import pixel_accuracy
from segrobust.models import forward, init_params, pixel_linear, small_conv

EPS = 8 / 255


@pytest.fixture(scope="module")
def model():
    return init_params(small_conv(6, (4,), n_backbone=1), 0)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(0, 3, 16, 16)


def test_projection_examples():
    x = np.full((1, 1, 3), 0.9)
    assert np.array_equal(project_linf_box(x, x, 0.1), x)
    assert np.array_equal(project_linf_box(x, x + 0.05, 0.0), x)
    assert np.allclose(project_linf_box(x, np.full_like(x, 1.3), 0.1), 1.0)
    assert np.allclose(project_linf_box(x, np.full_like(x, 0.5), 0.1), 0.8)


unit = st.floats(0, 1)


@settings(max_examples=300)
@given(arrays(np.float64, 6, elements=unit), arrays(np.float64, 6, elements=st.floats(-2, 3)),
       st.sampled_from([0.0, 1 / 255, 4 / 255, 8 / 255, 12 / 255, 0.1, 0.5]))
def test_projection_is_exactly_feasible(x, c, eps):
    z = project_linf_box(x, c, eps)
    assert np.abs(z - x).max() <= eps
    assert z.min() >= 0 and z.max() <= 1


def test_checkpoint_schedule():
    assert _checkpoint_params(100) == (22, 6, 3)
    assert _checkpoint_params(90) == (20, 6, 3)


def test_red_eps_slots():
    assert red_eps_slots(300) == (90, 90, 120)
    assert red_eps_slots(10) == (3, 3, 4)
    assert sum(red_eps_slots(137)) == 137
    with pytest.raises(ConfigError):
        red_eps_slots(9)


@pytest.mark.parametrize("loss", ["ce", "mce", "js", "segpgd"])
def test_zero_radius_returns_original(model, data, loss):
    x, y = data.images[0], data.labels[0]
    r = run_attack(model, x, y, AttackConfig(0.0, 20, loss), image_id="a")
    assert np.array_equal(r.adversarial, x)
    assert np.array_equal(r.prediction, predict(forward(model, x)))


def test_one_iteration_is_feasible(model, data):
    r = apgd(model, "ce", data.images[0], data.labels[0], EPS, 1, seed=3)
    assert r.max_perturbation <= EPS
    assert len(r.trace) == 2


def test_apgd_never_worse_than_its_start(model, data):
    """The returned iterate is at least as damaging as the random start."""
    x, y = data.images[1], data.labels[1]
    for seed in range(3):
        start = project_linf_box(x, x + substream(seed, "apgd-init").uniform(-EPS, EPS, x.shape),
                                 EPS)
        r = apgd(model, "mce", x, y, EPS, 20, seed=seed)
        assert r.accuracy <= np.mean(predict(forward(model, start)) == y)


@pytest.mark.parametrize("loss", ["ce", "mce", "js"])
def test_warm_start_dominance_in_radius(model, data, loss):
    """A small-radius solution fed as the start at a larger radius is never undone."""
    x, y = data.images[2], data.labels[2]
    small = apgd(model, loss, x, y, 2 / 255, 15, seed=0)
    for eps in (2 / 255, 4 / 255, 8 / 255):
        big = apgd(model, loss, x, y, eps, 15, seed=1, init=small.adversarial)
        assert big.accuracy <= small.accuracy


def test_apgd_matches_grid_oracle_on_one_pixel():
    """Pixel-linear, K=2, one pixel: best loss equals the best point of a dense grid."""
    p = init_params(pixel_linear(2), 4)
    x = np.array([[[0.4, 0.55, 0.6]]])
    y = np.array([[0]])
    eps = 0.05
    r = apgd(p, "ce", x, y, eps, 50, seed=1)
    grid = np.linspace(-eps, eps, 21)
    best = max(ce_loss(forward(p, x + np.array(d)), y).total
               for d in itertools.product(grid, repeat=3))
    w = p.layers[0].weight[0, 0]
    corner = x + eps * np.sign(w[:, 1] - w[:, 0])
    assert r.best_objective == pytest.approx(best, rel=1e-9)
    assert ce_loss(forward(p, corner), y).total == pytest.approx(best, rel=1e-9)


def test_pgd_keeps_highest_loss(model, data):
    r = pgd(model, "cospgd", data.images[0], data.labels[0], EPS, 10, seed=0)
    assert r.max_perturbation <= EPS and len(r.trace) == 11


def test_red_eps_final_radius(model, data):
    r = red_eps_attack(model, "js", data.images[0], data.labels[0], EPS, 20, seed=0)
    assert r.epsilon == EPS and r.max_perturbation <= EPS and len(r.trace) == 23


def test_mce_bal_needs_weights(model, data):
    with pytest.raises(ConfigError):
        apgd(model, "mce-bal", data.images[0], data.labels[0], EPS, 5)


def test_non_finite_image_rejected(model, data):
    x = data.images[0].copy()
    x[0, 0, 0] = np.nan
    with pytest.raises(NumericInputError):
        apgd(model, "ce", x, data.labels[0], EPS, 5)


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(-0.1)
    with pytest.raises(ConfigError):
        AttackConfig(EPS, loss="hinge")
    with pytest.raises(ConfigError):
        AttackConfig(EPS, restarts=3)
    with pytest.raises(ConfigError):
        AttackConfig(EPS, iterations=5)


def test_zero_radius_dataset_equals_clean(model, data):
    _, acc = attack_dataset(model, AttackConfig(0.0, 10, "mce"), data)
    clean = clean_accumulator(model, data)
    assert np.array_equal(acc.total, clean.total)


def test_single_image_dataset(model, data):
    one = data.subset([2])
    results, acc = attack_dataset(model, AttackConfig(EPS, 10, "ce"), one)
    assert pixel_accuracy(acc) == results[0].accuracy


def test_worker_count_does_not_change_results(model, data):
    weights = ClassWeights.from_counts(data.class_stats().counts)
    cfg = AttackConfig(EPS, 10, "mce-bal", seed=5)
    serial, acc1 = attack_dataset(model, cfg, data, weights, workers=1)
    parallel, acc2 = attack_dataset(model, cfg, data, weights, workers=2)
    assert np.array_equal(acc1.total, acc2.total)
    assert all(np.array_equal(a.adversarial, b.adversarial) for a, b in zip(serial, parallel))
    # a reordered dataset gives the same per-image results
    reordered, acc3 = attack_dataset(model, cfg, data.subset([2, 1, 0]), weights)
    assert np.array_equal(acc3.total, acc1.total)
    assert all(np.array_equal(a.adversarial, b.adversarial)
               for a, b in zip(serial, reversed(reordered)))


def test_const_eps_restarts(model, data):
    r = run_attack(model, data.images[0], data.labels[0],
                   AttackConfig(EPS, 12, "ce", "const-eps", restarts=3))
    assert len(r.trace) == 5 and r.max_perturbation <= EPS


def test_transfer_to_self_and_zero_radius(model, data):
    results, acc = attack_dataset(model, AttackConfig(EPS, 10, "ce"), data)
    assert np.array_equal(transfer_eval(results, model, data).total, acc.total)
    other = init_params(small_conv(6, (4,), n_backbone=1), 1)
    zero, _ = attack_dataset(model, AttackConfig(0.0, 10, "ce"), data)
    assert np.array_equal(transfer_eval(zero, other, data).total,
                          clean_accumulator(other, data).total)


def test_transfer_shape_mismatch(model, data):
    results, _ = attack_dataset(model, AttackConfig(EPS, 10, "ce"), data)
    bigger = generate_dataset(0, 3, 20, 20)
    with pytest.raises(ConfigError):
        transfer_eval(results, model, bigger)
