"""L-inf attacks on segmentation models: APGD, plain PGD and radius reduction.

All attacks maximize ``sum_a L(f(x + delta)_a, y_a)`` subject to
``||delta||_inf <= eps`` and ``x + delta in [0, 1]``.  The input gradient is
obtained by contracting the per-pixel logit gradients of the loss with the
model's vector-Jacobian product.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from .core import (ConfigError, NumericInputError, as_image, as_labels, derive_seed, predict,
                   substream)
from .metrics import ConfusionAccumulator, confusion_matrix, counts_from_confusion
from .models import ModelParams, backward, forward, forward_with_cache

SCHEDULES = ("red-eps", "const-eps")
BASELINE_LOSSES = ("segpgd", "cospgd")
RED_EPS_RADII = (2.0, 1.5, 1.0)

# step sizes used for the PGD baselines, keyed by radius in 1/255 units
BASELINE_STEP_GRID = ((0.25, 8e-4), (0.5, 9e-4), (1.0, 1e-3), (2.0, 2e-3),
                      (4.0, 3e-3), (8.0, 5e-3), (12.0, 6e-3))

_observers: list = []


class AttackError(RuntimeError):
    """Raised when an attack cannot continue (e.g. non-finite gradients)."""


def add_result_observer(fn) -> None:
    """Register ``fn(result)``, called for every :class:`AttackResult` produced."""
    _observers.append(fn)


def remove_result_observer(fn) -> None:
    _observers.remove(fn)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    iterations: int = 300
    loss: str = "ce"
    schedule: str = "red-eps"
    restarts: int = 1
    seed: int = 0
    alpha0: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.loss not in L.LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.restarts < 1 or (self.restarts > 1 and self.schedule != "const-eps"):
            raise ConfigError("restarts > 1 only apply to the const-eps schedule")
        if self.schedule == "red-eps" and self.iterations < 10:
            raise ConfigError("red-eps needs at least 10 iterations")
        if self.alpha0 <= 0:
            raise ConfigError("alpha0 must be positive")


@dataclass
class AttackResult:
    image_id: object
    epsilon: float
    loss: str
    original: np.ndarray
    adversarial: np.ndarray
    prediction: np.ndarray
    labels: np.ndarray
    trace: np.ndarray
    num_classes: int
    confusion: np.ndarray = field(init=False)

    def __post_init__(self):
        self.confusion = confusion_matrix(self.prediction, self.labels, self.num_classes)

    @property
    def best_objective(self) -> float:
        return float(self.trace.max())

    @property
    def accuracy(self) -> float:
        return float((self.prediction == self.labels).mean())

    @property
    def tp_fp_fn(self):
        return counts_from_confusion(self.confusion)

    @property
    def max_perturbation(self) -> float:
        return float(np.abs(self.adversarial - self.original).max(initial=0.0))

    def record(self) -> dict:
        tp, fp, fn = self.tp_fp_fn
        return {"image_id": self.image_id, "epsilon": self.epsilon, "loss": self.loss,
                "best_objective": self.best_objective, "accuracy": self.accuracy,
                "tp": tp.tolist(), "fp": fp.tolist(), "fn": fn.tolist()}


def _emit(result: AttackResult) -> AttackResult:
    for fn in _observers:
        fn(result)
    return result


def project_linf_box(original, candidate, epsilon: float) -> np.ndarray:
    """Clamp to the eps-ball around ``original`` intersected with ``[0, 1]``."""
    original = np.asarray(original, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if original.shape != candidate.shape:
        raise ConfigError(f"shapes {original.shape} and {candidate.shape} disagree")
    lo, hi = _ball_bounds(original, epsilon)
    return np.clip(np.minimum(np.maximum(candidate, lo), hi), 0.0, 1.0)


def _ball_bounds(x, epsilon):
    # x +- eps can round so that |bound - x| > eps; step inward until exact
    lo, hi = x - epsilon, x + epsilon
    for _ in range(4):
        bad_lo, bad_hi = x - lo > epsilon, hi - x > epsilon
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, np.nextafter(lo, np.inf), lo)
        hi = np.where(bad_hi, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def baseline_step_size(epsilon: float) -> float:
    """Constant PGD step for SegPGD/CosPGD, interpolated on the tuned grid."""
    radii = np.array([r for r, _ in BASELINE_STEP_GRID]) / 255
    steps = np.array([s for _, s in BASELINE_STEP_GRID])
    if epsilon > radii[-1]:
        return float(steps[-1] * epsilon / radii[-1])
    if epsilon < radii[0]:
        return float(steps[0] * epsilon / radii[0])
    return float(np.interp(epsilon, radii, steps))


class _Objective:
    """Loss value, input gradient and accuracy score at a candidate image."""

    def __init__(self, params, labels, loss, weights=None):
        self.params = params
        self.labels = labels
        self.loss = loss
        self.weights = weights
        if loss == "mce-bal":
            if weights is None:
                raise ConfigError("mce-bal needs class weights")
            self.pixel_weight = weights.for_labels(labels)
        else:
            self.pixel_weight = None

    def __call__(self, x, t=None, T=None):
        logits, tape = forward_with_cache(self.params, x)
        ev = L.evaluate(self.loss, logits, self.labels, weights=self.weights, t=t, T=T)
        grad, _ = backward(self.params, tape, ev.grad)
        if not np.all(np.isfinite(grad)):
            raise AttackError(f"non-finite input gradient for loss {self.loss!r}")
        correct = predict(logits) == self.labels
        if self.pixel_weight is None:
            score = float(correct.sum())
        else:
            # the mIoU-targeted attack minimizes 1/N_y-weighted accuracy
            score = float((self.pixel_weight * correct).sum())
        return ev, grad, score


def _random_start(x, epsilon, rng):
    return project_linf_box(x, x + rng.uniform(-epsilon, epsilon, size=x.shape), epsilon)


def _checkpoint_params(n_iter):
    first = max(math.ceil(0.22 * n_iter), 1)
    min_gap = max(math.ceil(0.06 * n_iter), 1)
    decrease = max(math.ceil(0.03 * n_iter), 1)
    return first, min_gap, decrease


def apgd(params: ModelParams, loss: str, image, labels, epsilon: float, n_iter: int,
         seed: int = 0, init=None, class_weights=None, alpha0: float = 1.0,
         image_id=0, rho: float = 0.75) -> AttackResult:
    """APGD with momentum, checkpointed step-size halving and dual best tracking.

    Returns the iterate with the lowest (weighted) pixel accuracy; the trace
    holds the tracked objective at the start point and after every step.
    """
    x = as_image(image)
    y = as_labels(labels, params.num_classes)
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    objective = _Objective(params, y, loss, class_weights)
    if init is None:
        x_adv = _random_start(x, epsilon, substream(seed, "apgd-init"))
    else:
        x_adv = project_linf_box(x, as_image(init), epsilon)

    ev, grad, score = objective(x_adv)
    trace = np.empty(n_iter + 1)
    trace[0] = ev.tracked_total
    loss_best = trace[0]
    x_best, grad_best = x_adv, grad
    x_best_adv, score_best = x_adv, score

    step = 2.0 * epsilon * alpha0
    x_old = x_adv
    k, min_gap, decrease = _checkpoint_params(n_iter)
    since_check = 0
    loss_best_last_check = loss_best
    reduced_last_check = True

    for i in range(n_iter):
        momentum = x_adv - x_old
        x_old = x_adv
        a = 0.75 if i > 0 else 1.0
        z = project_linf_box(x, x_adv + step * np.sign(grad), epsilon)
        x_adv = project_linf_box(x, x_adv + a * (z - x_adv) + (1 - a) * momentum, epsilon)

        ev, grad, score = objective(x_adv)
        trace[i + 1] = ev.tracked_total
        if score < score_best:
            x_best_adv, score_best = x_adv, score
        if trace[i + 1] > loss_best:
            x_best, grad_best, loss_best = x_adv, grad, trace[i + 1]

        since_check += 1
        if since_check == k:
            window = trace[i + 1 - k: i + 2]
            oscillating = np.count_nonzero(np.diff(window) > 0) <= k * rho
            stalled = (not reduced_last_check) and loss_best_last_check >= loss_best
            reduce = oscillating or stalled
            reduced_last_check = reduce
            loss_best_last_check = loss_best
            if reduce:
                step /= 2.0
                x_adv, grad = x_best, grad_best
            k = max(k - decrease, min_gap)
            since_check = 0

    return _finish(params, image_id, epsilon, loss, x, x_best_adv, y, trace)


def pgd(params: ModelParams, loss: str, image, labels, epsilon: float, n_iter: int,
        seed: int = 0, init=None, class_weights=None, step_size: float | None = None,
        image_id=0) -> AttackResult:
    """Sign-gradient PGD with a constant step, keeping the highest-loss iterate.

    Used for the SegPGD and CosPGD baselines; the iteration counter ``t`` runs
    from 1 to ``n_iter``.
    """
    x = as_image(image)
    y = as_labels(labels, params.num_classes)
    objective = _Objective(params, y, loss, class_weights)
    if step_size is None:
        step_size = baseline_step_size(epsilon)
    if init is None:
        x_adv = _random_start(x, epsilon, substream(seed, "pgd-init"))
    else:
        x_adv = project_linf_box(x, as_image(init), epsilon)
    trace = np.empty(n_iter + 1)
    best, x_best = -np.inf, x_adv
    for t in range(1, n_iter + 1):
        ev, grad, _ = objective(x_adv, t, n_iter)
        trace[t - 1] = ev.total
        if ev.total > best:
            best, x_best = ev.total, x_adv
        x_adv = project_linf_box(x, x_adv + step_size * np.sign(grad), epsilon)
    ev, _, _ = objective(x_adv, n_iter, n_iter)
    trace[n_iter] = ev.total
    if ev.total > best:
        x_best = x_adv
    return _finish(params, image_id, epsilon, loss, x, x_best, y, trace)


def _finish(params, image_id, epsilon, loss, x, x_adv, y, trace):
    pred = predict(forward(params, x_adv))
    return _emit(AttackResult(image_id, float(epsilon), loss, x, x_adv, pred, y,
                              trace, params.num_classes))


def _inner(loss):
    return pgd if loss in BASELINE_LOSSES else apgd


def red_eps_slots(n_iter: int) -> tuple[int, int, int]:
    """Budget split 3:3:4 across the radii 2*eps, 1.5*eps, eps."""
    if n_iter < 10:
        raise ConfigError("red-eps needs at least 10 iterations")
    first = int(0.3 * n_iter)
    return first, first, n_iter - 2 * first


def red_eps_attack(params: ModelParams, loss: str, image, labels, epsilon: float,
                   n_iter: int = 300, seed: int = 0, class_weights=None,
                   alpha0: float = 1.0, image_id=0) -> AttackResult:
    """Progressive radius reduction: three warm-started runs at 2, 1.5 and 1 eps.

    Each slot is an independent optimizer run (state is not carried over); it
    starts from the previous slot's returned iterate projected onto the new
    radius.
    """
    x = as_image(image)
    run = _inner(loss)
    init = None
    traces = []
    result = None
    for slot, (scale, n) in enumerate(zip(RED_EPS_RADII, red_eps_slots(n_iter))):
        radius = scale * epsilon
        kwargs = {"class_weights": class_weights, "image_id": image_id}
        if run is apgd:
            kwargs["alpha0"] = alpha0
        result = run(params, loss, x, labels, radius, n, seed=seed, init=init, **kwargs)
        traces.append(result.trace)
        if slot < len(RED_EPS_RADII) - 1:
            init = project_linf_box(x, result.adversarial, RED_EPS_RADII[slot + 1] * epsilon)
    return _emit(replace(result, trace=np.concatenate(traces), epsilon=float(epsilon)))


def _score(result: AttackResult, class_weights) -> float:
    correct = result.prediction == result.labels
    if result.loss == "mce-bal" and class_weights is not None:
        return float((class_weights.for_labels(result.labels) * correct).sum())
    return float(correct.sum())


def run_attack(params: ModelParams, image, labels, config: AttackConfig,
               class_weights=None, image_id=0, seed: int | None = None) -> AttackResult:
    """Run one configured attack on one image."""
    seed = config.seed if seed is None else seed
    if config.schedule == "red-eps":
        return red_eps_attack(params, config.loss, image, labels, config.epsilon,
                              config.iterations, seed, class_weights, config.alpha0, image_id)
    run = _inner(config.loss)
    per_restart = config.iterations // config.restarts
    if per_restart < 1:
        raise ConfigError("fewer iterations than restarts")
    best = None
    for r in range(config.restarts):
        kwargs = {"class_weights": class_weights, "image_id": image_id}
        if run is apgd:
            kwargs["alpha0"] = config.alpha0
        rseed = seed if r == 0 else int(substream(seed, "restart", r).integers(2**31))
        res = run(params, config.loss, image, labels, config.epsilon, per_restart,
                  seed=rseed, **kwargs)
        if best is None or _score(res, class_weights) < _score(best, class_weights):
            best = res
    return best


def _attack_one(args):
    params, config, image, labels, class_weights, image_id = args
    return run_attack(params, image, labels, config, class_weights, image_id,
                      seed=derive_seed(config.seed, f"image:{image_id}"))


def attack_dataset(params: ModelParams, config: AttackConfig, dataset, class_weights=None,
                   workers: int = 1):
    """Attack every image independently with a seed derived from its id.

    Returns ``(results, accumulator)`` with results in dataset order.  Results do
    not depend on ``workers`` or on the position of an image in the dataset.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("empty dataset")
    jobs = [(params, config, dataset.images[i], dataset.labels[i], class_weights,
             dataset.ids[i]) for i in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_attack_one, jobs))
        for r in results:
            _emit(r)  # observers live in this process
    else:
        results = [_attack_one(job) for job in jobs]
    acc = ConfusionAccumulator(params.num_classes)
    for r in results:
        acc.add_confusion(r.image_id, r.confusion)
    return results, acc


def clean_accumulator(params: ModelParams, dataset) -> ConfusionAccumulator:
    acc = ConfusionAccumulator(params.num_classes)
    for img_id, img, lab in zip(dataset.ids, dataset.images, dataset.labels):
        acc.add(img_id, predict(forward(params, img)), lab)
    return acc


def transfer_eval(source_results, target: ModelParams, dataset) -> ConfusionAccumulator:
    """Evaluate ``target`` on adversarial images crafted against another model."""
    by_id = {r.image_id: r for r in source_results}
    acc = ConfusionAccumulator(target.num_classes)
    for img_id, img, lab in zip(dataset.ids, dataset.images, dataset.labels):
        if img_id not in by_id:
            raise ConfigError(f"no source result for image {img_id!r}")
        adv = by_id[img_id].adversarial
        if adv.shape != img.shape or adv.shape[-1] != target.spec.in_channels:
            raise ConfigError(f"source image shape {adv.shape} does not fit the target")
        acc.add(img_id, predict(forward(target, adv)), lab)
    return acc
