"""Segmentation metrics: Dice, average surface distance, pseudo-label accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .segnet import ModelParams, predict
from .synthgen import CLASS_NAMES, Dataset

EVAL_THRESHOLD = 0.5


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels outside the image count as background.
    """
    m = np.pad(np.asarray(mask).astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def _directed_mean(src: np.ndarray, dst: np.ndarray) -> float:
    # exact nearest-neighbour search on integer squared distances
    best = np.full(len(src), np.iinfo(np.int64).max, dtype=np.int64)
    for start in range(0, len(dst), 1024):
        chunk = dst[start : start + 1024]
        d2 = ((src[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=-1)
        best = np.minimum(best, d2.min(axis=1))
    return float(np.sqrt(best.astype(np.float64)).mean())


def asd(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Symmetrized average surface distance in pixels.

    Returns ``None`` when either mask is empty (undefined).
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    bp = np.argwhere(boundary(pred)).astype(np.int64)
    bg = np.argwhere(boundary(gt)).astype(np.int64)
    return (_directed_mean(bp, bg) + _directed_mean(bg, bp)) / 2.0


def pl_counts(pseudo: np.ndarray, mask: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    """(correct, selected) entry counts for pooling across images."""
    pseudo = np.asarray(pseudo).astype(bool)
    sel = np.asarray(mask).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if not (pseudo.shape == sel.shape == gt.shape):
        raise ValueError("pseudo label, mask and ground truth must share one shape")
    return int((sel & (pseudo == gt)).sum()), int(sel.sum())


def pl_accuracy(pseudo: np.ndarray, mask: np.ndarray, gt: np.ndarray) -> float | None:
    """Fraction of selected entries whose pseudo label matches ground truth."""
    correct, selected = pl_counts(pseudo, mask, gt)
    if selected == 0:
        return None
    return correct / selected


@dataclass
class ClassSummary:
    dice_mean: float
    dice_std: float
    asd_mean: float
    asd_std: float
    asd_undefined: int


@dataclass
class EvalReport:
    stems: list[str]
    dice: np.ndarray  # (N, C)
    asd: np.ndarray  # (N, C), NaN where undefined
    summary: dict[str, ClassSummary] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice_mean for s in self.summary.values()]))

    @property
    def mean_asd(self) -> float:
        return float(np.mean([s.asd_mean for s in self.summary.values()]))

    def rows(self):
        for i, stem in enumerate(self.stems):
            for c, name in enumerate(CLASS_NAMES):
                yield stem, name, float(self.dice[i, c]), float(self.asd[i, c])

    def to_csv(self) -> str:
        lines = ["stem,class,dice,asd"]
        for stem, name, d, a in self.rows():
            lines.append(f"{stem},{name},{d:.9f},{'' if math.isnan(a) else f'{a:.9f}'}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"images: {len(self.stems)}"]
        for name, s in self.summary.items():
            lines.append(
                f"{name}: dice {100 * s.dice_mean:.2f} +- {100 * s.dice_std:.2f} %  "
                f"asd {s.asd_mean:.3f} +- {s.asd_std:.3f} px  (asd undefined: {s.asd_undefined})"
            )
        lines.append(f"mean dice {100 * self.mean_dice:.2f} %  mean asd {self.mean_asd:.3f} px")
        return "\n".join(lines) + "\n"


def summarize(stems: list[str], dice_arr: np.ndarray, asd_arr: np.ndarray) -> EvalReport:
    """Mean and population std per class; undefined ASD values are excluded."""
    summary = {}
    for c, name in enumerate(CLASS_NAMES):
        d = dice_arr[:, c]
        a = asd_arr[:, c]
        defined = a[~np.isnan(a)]
        summary[name] = ClassSummary(
            float(d.mean()), float(d.std()),
            float(defined.mean()) if defined.size else math.nan,
            float(defined.std()) if defined.size else math.nan,
            int(np.isnan(a).sum()),
        )
    return EvalReport(list(stems), dice_arr, asd_arr, summary)


def evaluate_predictions(stems: list[str], preds: np.ndarray, labels: np.ndarray) -> EvalReport:
    n, _, _, c = labels.shape
    dice_arr = np.zeros((n, c))
    asd_arr = np.full((n, c), np.nan)
    for i in range(n):
        for k in range(c):
            dice_arr[i, k] = dice(preds[i, ..., k], labels[i, ..., k])
            a = asd(preds[i, ..., k], labels[i, ..., k])
            if a is not None:
                asd_arr[i, k] = a
    return summarize(stems, dice_arr, asd_arr)


def evaluate(params: ModelParams, dataset: Dataset, config=None) -> EvalReport:
    """Eval-mode predictions binarized at 0.5, scored per image and class."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels is None:
        raise ValueError("evaluation needs ground-truth labels")
    prob, _ = predict(params, dataset.images)
    return evaluate_predictions(dataset.stems, (prob >= EVAL_THRESHOLD).astype(np.uint8), dataset.labels)
