"""Per-pixel attack objectives with analytic logit gradients.

Every loss returns a :class:`LossEval` holding per-pixel values, the gradient
with respect to the logits, and the per-pixel objective that APGD uses for its
step-size control (``tracked``).  Totals are plain sums over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, as_labels, log_softmax, predict

LOSS_KINDS = ("ce", "js", "mce", "mce-bal", "segpgd", "cospgd")
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class ClassWeights:
    """Inverse training-set pixel counts ``1/N_s``; absent classes have weight 0."""

    counts: np.ndarray
    weights: np.ndarray
    present: np.ndarray

    @classmethod
    def from_counts(cls, counts) -> "ClassWeights":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or np.any(counts < 0):
            raise ConfigError("class counts must be a non-negative vector")
        present = counts > 0
        weights = np.zeros(len(counts))
        weights[present] = 1.0 / counts[present]
        return cls(counts, weights, present)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def for_labels(self, labels: np.ndarray) -> np.ndarray:
        if labels.size and labels.max() >= self.num_classes:
            raise ConfigError("label outside the class-weight table")
        missing = ~self.present[labels]
        if np.any(missing):
            bad = sorted(set(labels[missing].tolist()))
            raise ConfigError(f"classes {bad} have no training pixels (N_s = 0)")
        return self.weights[labels]


@dataclass(frozen=True)
class LossEval:
    values: np.ndarray  # (H, W) per-pixel loss
    grad: np.ndarray  # (H, W, K) d loss / d logits
    tracked: np.ndarray  # (H, W) objective seen by step-size control
    pixel_weights: np.ndarray | None = None  # constants multiplying CE, if any

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def tracked_total(self) -> float:
        return float(self.tracked.sum())


def _prepare(logits, labels):
    u = np.asarray(logits, dtype=np.float64)
    y = as_labels(labels, u.shape[-1])
    if u.shape[:-1] != y.shape:
        raise ConfigError(f"logits {u.shape} and labels {y.shape} disagree")
    logp = log_softmax(u)
    return u, y, logp


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[y]


def _ce_parts(logits, labels):
    u, y, logp = _prepare(logits, labels)
    logp_y = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    p = np.exp(logp)
    return u, y, p, -logp_y, p - _onehot(y, u.shape[-1])


def ce_loss(logits, labels) -> LossEval:
    """``-log p_y`` with gradient ``p - e_y``."""
    _, _, _, value, grad = _ce_parts(logits, labels)
    return LossEval(value, grad, value)


def js_loss(logits, labels) -> LossEval:
    """Jensen-Shannon divergence between the softmax output and ``e_y``.

    The gradient ``0.5 * p_y * log(p_y / (1 + p_y)) * (e_y - p)`` vanishes as
    ``p_y -> 0``, so confidently misclassified pixels stop pulling the update.
    """
    u, y, logp = _prepare(logits, labels)
    p = np.exp(logp)
    logp_y = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    p_y = np.exp(logp_y)
    log1p_py = np.log1p(p_y)
    # sum_{i != y} p_i log 2 + p_y log(2 p_y / (1 + p_y)), with 0 log 0 = 0
    value = 0.5 * (np.log(2.0) - log1p_py + (1.0 - p_y) * np.log(2.0)
                   + p_y * (np.log(2.0) + logp_y - log1p_py))
    coeff = 0.5 * p_y * (logp_y - log1p_py)
    grad = coeff[..., None] * (_onehot(y, u.shape[-1]) - p)
    return LossEval(value, grad, value)


def masked_ce_loss(logits, labels, balanced: bool = False,
                   weights: ClassWeights | None = None) -> LossEval:
    """Cross-entropy restricted to pixels whose prediction is still correct.

    The mask is recomputed from the current logits and applied to the value and
    the gradient.  ``tracked`` keeps the unmasked (optionally ``1/N_y``-weighted)
    cross-entropy, because the masked value is not monotone along an attack and
    would mislead step-size control.
    """
    u, y, _, ce, grad = _ce_parts(logits, labels)
    w = np.ones_like(ce)
    if balanced:
        if weights is None:
            raise ConfigError("balanced masked CE needs class weights")
        w = weights.for_labels(y)
    mask = (predict(u) == y).astype(np.float64)
    scale = mask * w
    return LossEval(scale * ce, scale[..., None] * grad, w * ce, scale)


def segpgd_lambda(t: int, T: int) -> float:
    if not (isinstance(t, (int, np.integer)) and isinstance(T, (int, np.integer))):
        raise ConfigError("t and T must be integers")
    if T < 1 or not 1 <= t <= T:
        raise ConfigError(f"need 1 <= t <= T, got t={t}, T={T}")
    return (t - 1) / (2 * T)


def baseline_weighted_ce(logits, labels, kind: str, t: int | None = None,
                         T: int | None = None) -> LossEval:
    """SegPGD / CosPGD pixel-weighted cross-entropy.

    Weights are treated as constants in the gradient.  SegPGD weights correct
    pixels by ``1 - lambda(t)`` and wrong ones by ``lambda(t)``; CosPGD uses
    ``sigmoid(u_y) / ||sigmoid(u)||_2``.
    """
    u, y, _, ce, grad = _ce_parts(logits, labels)
    if kind == "segpgd":
        lam = segpgd_lambda(t, T)
        correct = predict(u) == y
        w = np.where(correct, 1.0 - lam, lam)
    elif kind == "cospgd":
        sig = 0.5 * (1.0 + np.tanh(0.5 * u))  # overflow-free logistic
        sig_y = np.take_along_axis(sig, y[..., None], axis=-1)[..., 0]
        w = sig_y / np.linalg.norm(sig, axis=-1)
    else:
        raise ConfigError(f"unknown baseline {kind!r}")
    value = w * ce
    return LossEval(value, w[..., None] * grad, value, w)


def evaluate(kind: str, logits, labels, *, weights: ClassWeights | None = None,
             t: int | None = None, T: int | None = None) -> LossEval:
    """Dispatch on the CLI loss name."""
    if kind == "ce":
        return ce_loss(logits, labels)
    if kind == "js":
        return js_loss(logits, labels)
    if kind == "mce":
        return masked_ce_loss(logits, labels)
    if kind == "mce-bal":
        return masked_ce_loss(logits, labels, balanced=True, weights=weights)
    if kind in ("segpgd", "cospgd"):
        return baseline_weighted_ce(logits, labels, kind, t, T)
    raise ConfigError(f"unknown loss {kind!r}; choose from {', '.join(LOSS_KINDS)}")
