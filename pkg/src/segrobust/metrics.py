"""Confusion accumulation, pixel accuracy, mIoU and class-balanced accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, as_labels


class EmptyMetricError(ValueError):
    """Raised when a metric is requested on data that cannot define it."""


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels with truth ``t`` predicted as ``p``."""
    pred = as_labels(pred, num_classes)
    truth = as_labels(truth, num_classes)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction {pred.shape} and truth {truth.shape} disagree")
    idx = truth.ravel() * num_classes + pred.ravel()
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def counts_from_confusion(cm: np.ndarray):
    """TP, FP, FN along the last two axes of one or many confusion matrices."""
    tp = np.diagonal(cm, axis1=-2, axis2=-1)
    fp = cm.sum(axis=-2) - tp
    fn = cm.sum(axis=-1) - tp
    return tp, fp, fn


def miou_from_counts(tp, fp, fn) -> float:
    union = tp + fp + fn
    valid = union > 0
    if not np.any(valid):
        raise EmptyMetricError("no class with TP+FP+FN > 0")
    return float(np.mean(tp[valid] / union[valid]))


def balanced_accuracy_from_counts(tp, fp, fn) -> float:
    n = tp + fn
    valid = n > 0
    if not np.any(valid):
        raise EmptyMetricError("no class with N_s > 0")
    return float(np.mean(tp[valid] / n[valid]))


class ConfusionAccumulator:
    """Per-image confusion matrices plus their running sum.

    Accumulators over disjoint image sets combine with :meth:`merge`; the
    aggregate does not depend on the merge order.  Alongside each matrix an
    image keeps a ``missed`` vector: pixels of class ``s`` predicted into a
    class that was dropped from evaluation (all zero unless
    :meth:`without_class` was used).
    """

    def __init__(self, num_classes: int):
        self.num_classes = int(num_classes)
        self.per_image: dict = {}
        self.missed: dict = {}
        self.total = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.total_missed = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, image_id, pred, truth) -> "ConfusionAccumulator":
        return self.add_confusion(image_id, confusion_matrix(pred, truth, self.num_classes))

    def add_confusion(self, image_id, cm, missed=None) -> "ConfusionAccumulator":
        if image_id in self.per_image:
            raise ConfigError(f"image {image_id!r} already accumulated")
        cm = np.asarray(cm, dtype=np.int64)
        if cm.shape != self.total.shape:
            raise ConfigError(f"confusion shape {cm.shape} != {self.total.shape}")
        missed = (np.zeros(self.num_classes, dtype=np.int64) if missed is None
                  else np.asarray(missed, dtype=np.int64))
        self.per_image[image_id] = cm
        self.missed[image_id] = missed
        self.total = self.total + cm
        self.total_missed = self.total_missed + missed
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge accumulators with different K")
        out = ConfusionAccumulator(self.num_classes)
        for acc in (self, other):
            for key, cm in acc.per_image.items():
                out.add_confusion(key, cm, acc.missed[key])
        return out

    @property
    def image_ids(self) -> list:
        return list(self.per_image)

    def without_class(self, cls: int) -> "ConfusionAccumulator":
        """Drop one class (usually background) from evaluation.

        Pixels whose truth is ``cls`` are ignored; pixels predicted as ``cls``
        still count as false negatives of their true class.
        """
        keep = [c for c in range(self.num_classes) if c != cls]
        out = ConfusionAccumulator(self.num_classes - 1)
        for key, cm in self.per_image.items():
            out.add_confusion(key, cm[np.ix_(keep, keep)],
                              self.missed[key][keep] + cm[keep, cls])
        return out

    def tp_fp_fn(self, image_id=None):
        if image_id is None:
            cm, missed = self.total, self.total_missed
        else:
            cm, missed = self.per_image[image_id], self.missed[image_id]
        tp, fp, fn = counts_from_confusion(cm)
        return tp, fp, fn + missed

    def stacked_counts(self, image_ids=None):
        """``(n_images, K)`` arrays of TP, FP, FN in ``image_ids`` order."""
        ids = self.image_ids if image_ids is None else list(image_ids)
        rows = [self.tp_fp_fn(i) for i in ids]
        return tuple(np.array([r[j] for r in rows]) for j in range(3))


def accumulate(acc: ConfusionAccumulator, pred, truth, image_id) -> ConfusionAccumulator:
    return acc.add(image_id, pred, truth)


def pixel_accuracy(acc: ConfusionAccumulator, image_id=None) -> float:
    tp, _, fn = acc.tp_fp_fn(image_id)
    n = int((tp + fn).sum())
    if n == 0:
        raise EmptyMetricError("no pixels accumulated")
    return float(tp.sum() / n)


def per_class_iou(acc: ConfusionAccumulator) -> np.ndarray:
    """IoU per class, NaN where the class never occurs."""
    tp, fp, fn = acc.tp_fp_fn()
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(acc: ConfusionAccumulator) -> float:
    """Mean IoU over classes with non-empty union, from dataset-level counts."""
    return miou_from_counts(*acc.tp_fp_fn())


def balanced_accuracy(acc: ConfusionAccumulator) -> float:
    """Mean of ``TP_s / N_s`` over classes present in the ground truth.

    This upper-bounds :func:`miou`: classes that only appear as predictions add
    an IoU of 0 to the mIoU mean and have no defined accuracy.
    """
    return balanced_accuracy_from_counts(*acc.tp_fp_fn())


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_pixel_counts(label_maps, num_classes: int) -> ClassStats:
    counts = np.zeros(num_classes, dtype=np.int64)
    n = 0
    for y in label_maps:
        y = as_labels(y, num_classes)
        counts += np.bincount(y.ravel(), minlength=num_classes)
        n += 1
    if n == 0:
        raise EmptyMetricError("empty split")
    return ClassStats(counts)
