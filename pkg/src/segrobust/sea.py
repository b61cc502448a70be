"""Segmentation ensemble attack: worst case over several red-eps APGD runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, attack_dataset
from .core import ConfigError, derive_seed, substream
from .metrics import ConfusionAccumulator, miou_from_counts

SEA_LOSSES = ("mce", "mce-bal", "js")


def worst_case_accuracy(accuracies, pixel_counts=None):
    """Per image, pick the attack with the lowest accuracy (ties -> lowest index).

    ``accuracies`` is ``(n_images, n_attacks)``; ``pixel_counts`` weights images
    when forming the dataset accuracy (uniform if omitted).
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[1] < 1:
        raise ConfigError("need an (n_images, n_attacks) accuracy table")
    choice = np.argmin(acc, axis=1)
    picked = acc[np.arange(len(acc)), choice]
    w = np.ones(len(acc)) if pixel_counts is None else np.asarray(pixel_counts, dtype=np.float64)
    return choice, float((picked * w).sum() / w.sum())


@dataclass
class GreedyTrace:
    rounds: int
    swaps: int
    history: list = field(default_factory=list)


def greedy_worst_case_miou(tp, fp, fn, seed: int = 0, max_rounds: int = 10_000):
    """Approximately minimize dataset mIoU over per-image attack choices.

    ``tp``, ``fp``, ``fn`` are ``(n_images, n_attacks, K)`` per-image counts.
    Starts from the single attack with the lowest mIoU, then sweeps the images
    in a freshly shuffled order each round, switching an image to whichever
    other attack lowers the mIoU the most (strict improvement only) until a
    round makes no switch.  Candidate evaluation is O(K) thanks to cached
    aggregate counts.

    Returns ``(choice, miou, trace)``.
    """
    tp, fp, fn = (np.asarray(a, dtype=np.int64) for a in (tp, fp, fn))
    if tp.ndim != 3 or tp.shape != fp.shape or tp.shape != fn.shape:
        raise ConfigError("counts must share an (n_images, n_attacks, K) shape")
    n_img, n_att, _ = tp.shape
    singles = [miou_from_counts(tp[:, j].sum(0), fp[:, j].sum(0), fn[:, j].sum(0))
               for j in range(n_att)]
    choice = np.full(n_img, int(np.argmin(singles)), dtype=np.int64)
    rows = np.arange(n_img)
    agg_tp = tp[rows, choice].sum(0)
    agg_fp = fp[rows, choice].sum(0)
    agg_fn = fn[rows, choice].sum(0)
    current = miou_from_counts(agg_tp, agg_fp, agg_fn)
    trace = GreedyTrace(0, 0, [current])
    rng = substream(seed, "shuffle")
    for _ in range(max_rounds):
        trace.rounds += 1
        swapped = False
        for i in rng.permutation(n_img):
            c = choice[i]
            base_tp = agg_tp - tp[i, c]
            base_fp = agg_fp - fp[i, c]
            base_fn = agg_fn - fn[i, c]
            best_j, best_val = c, current
            for j in range(n_att):
                if j == c:
                    continue
                val = miou_from_counts(base_tp + tp[i, j], base_fp + fp[i, j], base_fn + fn[i, j])
                if val < best_val:
                    best_j, best_val = j, val
            if best_j != c:
                choice[i] = best_j
                agg_tp = base_tp + tp[i, best_j]
                agg_fp = base_fp + fp[i, best_j]
                agg_fn = base_fn + fn[i, best_j]
                current = best_val
                trace.swaps += 1
                trace.history.append(current)
                swapped = True
        if not swapped:
            break
    return choice, current, trace


@dataclass
class EnsembleResult:
    losses: tuple
    epsilon: float
    image_ids: list
    results: list  # results[j][i]: attack j on image i
    accuracies: np.ndarray  # (n_images, n_attacks)
    pixel_counts: np.ndarray
    tp: np.ndarray  # (n_images, n_attacks, K)
    fp: np.ndarray
    fn: np.ndarray
    acc_choice: np.ndarray
    miou_choice: np.ndarray
    aacc: float
    miou: float
    greedy: GreedyTrace

    def attack_aacc(self, j: int) -> float:
        return float((self.accuracies[:, j] * self.pixel_counts).sum() / self.pixel_counts.sum())

    def attack_miou(self, j: int) -> float:
        return miou_from_counts(self.tp[:, j].sum(0), self.fp[:, j].sum(0), self.fn[:, j].sum(0))

    def choice_histogram(self, which: str = "acc") -> dict:
        choice = self.acc_choice if which == "acc" else self.miou_choice
        return {loss: int((choice == j).sum()) for j, loss in enumerate(self.losses)}

    def selected_results(self, which: str = "acc") -> list:
        choice = self.acc_choice if which == "acc" else self.miou_choice
        return [self.results[j][i] for i, j in enumerate(choice)]

    def accumulator(self, which="acc") -> ConfusionAccumulator:
        """Confusion counts of attack ``which`` (an index) or of a worst-case selection."""
        picked = self.results[which] if isinstance(which, int) else self.selected_results(which)
        acc = ConfusionAccumulator(picked[0].num_classes)
        for r in picked:
            acc.add_confusion(r.image_id, r.confusion)
        return acc


def ensemble_from_results(per_attack_results, losses, epsilon, seed=0) -> EnsembleResult:
    """Aggregate already computed per-attack results (``[attack][image]``)."""
    if not per_attack_results:
        raise ConfigError("no attacks to aggregate")
    n_img = len(per_attack_results[0])
    if any(len(r) != n_img for r in per_attack_results):
        raise ConfigError("every attack must cover every image")
    ids = [r.image_id for r in per_attack_results[0]]
    acc = np.array([[r.accuracy for r in col] for col in zip(*per_attack_results)])
    pixels = np.array([r.labels.size for r in per_attack_results[0]], dtype=np.float64)
    counts = np.array([[r.tp_fp_fn for r in col] for col in zip(*per_attack_results)])
    tp, fp, fn = counts[:, :, 0], counts[:, :, 1], counts[:, :, 2]
    acc_choice, aacc = worst_case_accuracy(acc, pixels)
    miou_choice, miou, trace = greedy_worst_case_miou(tp, fp, fn, seed)
    return EnsembleResult(tuple(losses), float(epsilon), ids, per_attack_results, acc, pixels,
                          tp, fp, fn, acc_choice, miou_choice, aacc, miou, trace)


def sea_attack(params, dataset, epsilon: float, class_weights, iterations: int = 300,
               seed: int = 0, losses=SEA_LOSSES, workers: int = 1) -> EnsembleResult:
    """One red-eps APGD run per loss and image, then both worst-case reductions.

    ``class_weights`` must come from the training split (used by ``mce-bal``).
    ``losses`` may name a subset of the ensemble for pairwise ablations.
    """
    losses = tuple(losses)
    if not losses:
        raise ConfigError("ensemble needs at least one loss")
    per_attack = []
    for loss in losses:
        cfg = AttackConfig(epsilon=epsilon, iterations=iterations, loss=loss,
                           schedule="red-eps", seed=derive_seed(seed, "attack", *loss.encode()))
        results, _ = attack_dataset(params, cfg, dataset, class_weights, workers)
        per_attack.append(results)
    return ensemble_from_results(per_attack, losses, epsilon, seed)
