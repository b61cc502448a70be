"""PGD adversarial training (AT), robust-backbone init (PIR-AT) and backbone pretraining."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import project_linf_box
from .core import ConfigError, NumericInputError, as_labels, log_softmax, predict, substream
from .models import (CHECKPOINT_FORMAT, CHECKPOINT_VERSION, ArchSpec, ModelParams,
                     _layers_from_json, _layers_to_json, _read_container, backward,
                     forward_with_cache, init_params)

INIT_MODES = ("clean", "robust")
PROVENANCES = ("clean-pretrained", "adv-pretrained")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    steps: int = 2
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    lr: float = 0.05
    momentum: float = 0.9
    warmup_frac: float = 0.1
    poly_power: float = 0.9
    batch_size: int = 16
    seed: int = 0
    init: str = "clean"
    optimizer: str = "sgd-momentum"
    flip: bool = True
    probe_epsilon: float = 2 / 255
    probe_images: int = 8
    probe_steps: int = 5

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.steps < 1:
            raise ConfigError("attack steps k must be >= 1")
        if not (self.epsilon >= 0 and self.step_size >= 0 and self.probe_epsilon >= 0):
            raise ConfigError("epsilon and step sizes must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}")
        if self.optimizer != "sgd-momentum":
            raise ConfigError("only sgd-momentum is supported")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")

    @classmethod
    def large_scale_preset(cls, **overrides) -> "TrainConfig":
        """Radius 4/255 with step 0.01, as used for full-scale segmentation AT."""
        return cls(**{"epsilon": 4 / 255, "step_size": 0.01, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, it: int, total: int) -> float:
    """Linear warmup over the first ``warmup_frac`` of updates, then poly decay."""
    warm = int(math.ceil(config.warmup_frac * total))
    if it < warm:
        return config.lr * (it + 1) / warm
    span = max(total - warm, 1)
    return config.lr * (1.0 - (it - warm) / span) ** config.poly_power


# -- adversarial examples and gradients ----------------------------------------

def _ce_and_cotangent(logits, y, pooled: bool):
    """Summed CE and its logit cotangent, per pixel or on pixel-averaged logits."""
    if pooled:
        z = logits.mean(axis=(1, 2))
        logp = log_softmax(z)
        ce = -np.take_along_axis(logp, y[:, None], axis=-1).sum()
        g = np.exp(logp)
        g[np.arange(len(y)), y] -= 1.0
        hw = logits.shape[1] * logits.shape[2]
        cot = np.broadcast_to(g[:, None, None, :] / hw, logits.shape)
        return float(ce), cot
    logp = log_softmax(logits)
    ce = -np.take_along_axis(logp, y[..., None], axis=-1).sum()
    g = np.exp(logp)
    np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
    return float(ce), g


def _n_terms(y, pooled):
    return len(y) if pooled else y.size


def pgd_examples(params: ModelParams, x, y, steps: int, epsilon: float, step_size: float,
                 rng, pooled: bool = False) -> np.ndarray:
    """k-step sign-gradient PGD on CE from a uniform start in the eps-box."""
    x_adv = project_linf_box(x, x + rng.uniform(-epsilon, epsilon, size=x.shape), epsilon)
    if epsilon == 0:
        return x_adv
    for _ in range(steps):
        logits, tape = forward_with_cache(params, x_adv)
        _, cot = _ce_and_cotangent(logits, y, pooled)
        grad, _ = backward(params, tape, cot)
        x_adv = project_linf_box(x, x_adv + step_size * np.sign(grad), epsilon)
    return x_adv


def mean_ce(params: ModelParams, x, y, pooled: bool = False) -> float:
    logits, _ = forward_with_cache(params, x)
    ce, _ = _ce_and_cotangent(logits, y, pooled)
    return ce / _n_terms(y, pooled)


def pgd_train_step(params: ModelParams, images, labels, steps: int, epsilon: float,
                   step_size: float, rng, pooled: bool = False):
    """Adversarial examples for a batch and the parameter gradient of CE on them.

    Every example in the batch is adversarial.  Returns
    ``(grads, clean_loss, adv_loss, x_adv)`` with losses averaged over pixels
    (or over samples when ``pooled``).
    """
    if steps < 1:
        raise ConfigError("k must be >= 1")
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    clean = mean_ce(params, x, y, pooled)
    x_adv = pgd_examples(params, x, y, steps, epsilon, step_size, rng, pooled)
    logits, tape = forward_with_cache(params, x_adv)
    ce, cot = _ce_and_cotangent(logits, y, pooled)
    n = _n_terms(y, pooled)
    if not (math.isfinite(ce) and math.isfinite(clean)):
        raise TrainingDiverged(f"non-finite loss (clean {clean}, adversarial {ce / n})")
    _, grads = backward(params, tape, cot / n, need_input=False, need_params=True)
    return grads, clean, ce / n, x_adv


def robust_pixel_accuracy(params: ModelParams, images, labels, epsilon: float, steps: int,
                          step_size: float | None = None, seed: int = 0) -> float:
    """Pixel accuracy under k-step CE PGD (a cheap probe, not a full evaluation)."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    step_size = 2.5 * epsilon / steps if step_size is None else step_size
    x_adv = pgd_examples(params, x, y, steps, epsilon, step_size, substream(seed, "probe"))
    logits, _ = forward_with_cache(params, x_adv)
    return float((predict(logits) == y).mean())


# -- optimization loop ----------------------------------------------------------

def _sgd_fit(params: ModelParams, x_all, y_all, config: TrainConfig, pooled: bool,
             epoch_hook=None):
    n = len(x_all)
    per_epoch = int(math.ceil(n / config.batch_size))
    total = config.epochs * per_epoch
    arrays = [a.copy() for a in params.arrays()]
    velocity = [np.zeros_like(a) for a in arrays]
    log = []
    it = 0
    for epoch in range(config.epochs):
        rng = substream(config.seed, "shuffle", epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if config.flip else np.zeros(n, dtype=bool)
        attack_rng = substream(config.seed, "train-attack", epoch)
        clean_sum = adv_sum = 0.0
        lr = config.lr
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb = x_all[idx].copy()
            yb = y_all[idx].copy()
            f = flips[idx]
            xb[f] = xb[f][:, :, ::-1]
            if not pooled:
                yb[f] = yb[f][:, :, ::-1]
            current = params.with_arrays(arrays)
            try:
                grads, clean, adv, _ = pgd_train_step(current, xb, yb, config.steps,
                                                      config.epsilon, config.step_size,
                                                      attack_rng, pooled)
            except NumericInputError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, update {it}") from exc
            lr = lr_at(config, it, total)
            for a, v, g in zip(arrays, velocity, grads):
                v *= config.momentum
                v += g
                a -= lr * v
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise TrainingDiverged(f"non-finite weights at epoch {epoch}, update {it}, lr {lr:.4g}")
            clean_sum += clean * len(idx)
            adv_sum += adv * len(idx)
            it += 1
        record = {"epoch": epoch + 1, "lr": lr, "clean_loss": clean_sum / n,
                  "adv_loss": adv_sum / n}
        if epoch_hook is not None:
            record.update(epoch_hook(params.with_arrays(arrays)))
        log.append(record)
    return params.with_arrays(arrays), log


def _check_backbone(spec: ArchSpec, config: TrainConfig, backbone):
    if config.init == "robust":
        if backbone is None:
            raise ConfigError("robust init needs a backbone checkpoint")
        if backbone.provenance != "adv-pretrained":
            raise ConfigError(f"robust init needs an adv-pretrained backbone, "
                              f"got {backbone.provenance}")
    elif backbone is not None and backbone.provenance == "adv-pretrained":
        raise ConfigError("clean init was requested with an adv-pretrained backbone")
    if backbone is not None:
        backbone.check_compatible(spec)


def train(spec: ArchSpec, config: TrainConfig, dataset, backbone=None, val=None,
          log_path=None):
    """Adversarial training of a segmentation model.

    ``config.init`` selects clean initialization (random, or a clean-pretrained
    backbone if given) or a robust backbone.  The decoder is always random.
    Returns ``(params, log)``; ``log`` has one record per epoch and is also
    written as JSON lines to ``log_path`` when given.
    """
    _check_backbone(spec, config, backbone)
    params = init_params(spec, config.seed, backbone)
    params = ModelParams(params.spec, params.layers, params.seed,
                         {**params.meta, "train": config.to_dict()})
    x_all = np.asarray(dataset.images, dtype=np.float64)
    y_all = as_labels(dataset.labels, spec.num_classes)

    hook = None
    if val is not None and config.probe_images > 0:
        m = min(config.probe_images, len(val))
        vx, vy = val.images[:m], val.labels[:m]

        def hook(p):
            acc = robust_pixel_accuracy(p, vx, vy, config.probe_epsilon, config.probe_steps,
                                        seed=config.seed)
            return {"probe_epsilon": config.probe_epsilon, "probe_robust_acc": acc}

    params, log = _sgd_fit(params, x_all, y_all, config, pooled=False, epoch_hook=hook)
    if log_path is not None:
        Path(log_path).write_text("".join(json.dumps(r) + "\n" for r in log))
    return params, log


# -- backbone pretraining --------------------------------------------------------

@dataclass
class BackboneCheckpoint:
    layers: tuple
    provenance: str
    epsilon: float
    in_channels: int
    widths: tuple
    kernel_sizes: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"unknown provenance {self.provenance!r}")

    def check_compatible(self, spec: ArchSpec) -> None:
        n = spec.n_backbone
        ok = (spec.in_channels == self.in_channels and len(self.layers) == n
              and tuple(spec.widths[:n]) == tuple(self.widths)
              and tuple(spec.kernel_sizes[:n]) == tuple(self.kernel_sizes))
        if not ok:
            raise ConfigError(
                f"backbone (widths {list(self.widths)}, kernels {list(self.kernel_sizes)}) "
                f"does not match the model prefix (widths {list(spec.widths[:n])}, "
                f"kernels {list(spec.kernel_sizes[:n])})")

    def save(self, path) -> None:
        doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": "backbone",
               "provenance": self.provenance, "epsilon": self.epsilon,
               "in_channels": self.in_channels, "widths": list(self.widths),
               "kernel_sizes": list(self.kernel_sizes), "meta": self.meta,
               "layers": _layers_to_json(self.layers)}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "BackboneCheckpoint":
        doc = _read_container(path, "backbone")
        return cls(_layers_from_json(doc["layers"]), doc["provenance"], doc["epsilon"],
                   doc["in_channels"], tuple(doc["widths"]), tuple(doc["kernel_sizes"]),
                   doc.get("meta", {}))


def classifier_spec(spec: ArchSpec) -> ArchSpec:
    """Backbone prefix of ``spec`` with a 1x1 class head.

    Averaging the head's per-pixel logits equals global average pooling
    followed by a linear layer, so the classifier reuses the segmentation code.
    """
    n = spec.n_backbone
    if n < 1:
        raise ConfigError("the architecture has no backbone to pretrain")
    return ArchSpec("small-conv", spec.num_classes, spec.in_channels, spec.widths[:n],
                    spec.kernel_sizes[:n], n)


def pretrain_robust_backbone(spec: ArchSpec, patches, patch_labels, config: TrainConfig):
    """PGD-AT of a patch classifier on the backbone prefix; the head is dropped.

    ``config.epsilon == 0`` gives plain training and a clean-pretrained
    checkpoint.  Returns ``(checkpoint, classifier_params, log)``.
    """
    cspec = classifier_spec(spec)
    params = init_params(cspec, config.seed)
    x = np.asarray(patches, dtype=np.float64)
    y = as_labels(patch_labels, spec.num_classes)
    if y.ndim != 1 or len(y) != len(x):
        raise ConfigError("patch labels must be one class id per patch")
    params, log = _sgd_fit(params, x, y, config, pooled=True)
    provenance = "adv-pretrained" if config.epsilon > 0 else "clean-pretrained"
    ckpt = BackboneCheckpoint(params.layers[:-1], provenance, float(config.epsilon),
                              spec.in_channels, cspec.widths, cspec.kernel_sizes,
                              {"pretrain": config.to_dict()})
    return ckpt, params, log


def classifier_robust_accuracy(params: ModelParams, patches, patch_labels, epsilon: float,
                               steps: int = 10, step_size: float | None = None,
                               seed: int = 0) -> float:
    x = np.asarray(patches, dtype=np.float64)
    y = np.asarray(patch_labels, dtype=np.int64)
    step_size = 2.5 * epsilon / steps if step_size is None else step_size
    x_adv = pgd_examples(params, x, y, steps, epsilon, step_size, substream(seed, "probe"),
                         pooled=True)
    logits, _ = forward_with_cache(params, x_adv)
    return float((np.argmax(logits.mean(axis=(1, 2)), axis=-1) == y).mean())
