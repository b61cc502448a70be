"""The toy benchmark recipe shared by the CLI, the scripts and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import generate_dataset, patch_dataset
from .losses import ClassWeights
from .models import small_conv
from .train import TrainConfig, pretrain_robust_backbone, train

TRAIN_EPS = 12 / 255


@dataclass(frozen=True)
class Benchmark:
    size: int = 32
    num_classes: int = 6
    n_train: int = 200
    n_val: int = 50
    n_pretrain: int = 200
    contrast: float = 0.3
    texture: float = 0.01
    widths: tuple = (8, 16, 16)
    n_backbone: int = 3
    patch: int = 4
    patch_stride: int = 4
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=10, steps=5, epsilon=TRAIN_EPS, step_size=0.006, lr=0.05, batch_size=32))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=5, steps=2, epsilon=TRAIN_EPS, step_size=3 / 255, lr=0.05, batch_size=8))
    short_epochs: int = 1

    @property
    def spec(self):
        return small_conv(self.num_classes, self.widths, n_backbone=self.n_backbone)

    def split(self, seed: int, name: str, n: int | None = None):
        n = {"train": self.n_train, "val": self.n_val, "pretrain": self.n_pretrain}[name] \
            if n is None else n
        return generate_dataset(seed, n, self.size, self.size, self.num_classes, name,
                                contrast=self.contrast, texture=self.texture)

    def class_weights(self, train_ds) -> ClassWeights:
        return ClassWeights.from_counts(train_ds.class_stats().counts)

    def pretrain_patches(self, seed: int, pretrain_ds=None):
        pre = self.split(seed, "pretrain") if pretrain_ds is None else pretrain_ds
        return patch_dataset(pre, self.patch, self.patch_stride, balance=True)

    def pretrained(self, seed: int, pretrain_ds=None) -> dict:
        """Clean (eps 0) and adversarially pretrained ``(backbone, classifier)`` pairs."""
        x, y = self.pretrain_patches(seed, pretrain_ds)
        out = {}
        for init, eps in (("clean", 0.0), ("robust", self.pretrain.epsilon)):
            cfg = replace(self.pretrain, epsilon=eps, seed=seed,
                          step_size=self.pretrain.step_size if eps else 0.0)
            ckpt, classifier, _ = pretrain_robust_backbone(self.spec, x, y, cfg)
            out[init] = (ckpt, classifier)
        return out

    def backbones(self, seed: int, pretrain_ds=None) -> dict:
        """Clean and adversarially pretrained backbones for one seed."""
        return {k: v[0] for k, v in self.pretrained(seed, pretrain_ds).items()}

    def fit(self, train_ds, init: str, backbone, seed: int, epochs: int | None = None,
            val=None):
        cfg = replace(self.train, init=init, seed=seed,
                      epochs=self.train.epochs if epochs is None else epochs)
        return train(self.spec, cfg, train_ds, backbone=backbone, val=val)

    def fit_clean(self, train_ds, seed: int, epochs: int = 20):
        """Standard (non-adversarial) training from random init."""
        cfg = replace(self.train, epsilon=0.0, step_size=0.0, steps=1, seed=seed, epochs=epochs)
        return train(self.spec, cfg, train_ds)
