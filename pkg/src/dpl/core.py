"""Pseudo-label denoising: thresholding, MC-dropout uncertainty, prototype tests.

All maps are channels-last ``(..., H, W, C)`` arrays with one channel per
class. Masks and labels are ``uint8`` arrays holding 0/1.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7


@dataclass
class Prototypes:
    obj: np.ndarray  # (C, L); NaN rows where undefined
    bg: np.ndarray  # (C, L)
    obj_valid: np.ndarray  # (C,) bool
    bg_valid: np.ndarray  # (C,) bool

    @property
    def valid(self) -> np.ndarray:
        return self.obj_valid & self.bg_valid


@dataclass
class DistanceMaps:
    obj: np.ndarray  # (H, W, C); NaN for classes with a degenerate prototype
    bg: np.ndarray
    valid: np.ndarray  # (C,) bool


def gen_pseudo_labels(prob: np.ndarray, gamma: float = 0.75) -> np.ndarray:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return (np.asarray(prob) >= gamma).astype(np.uint8)


def bce_per_pixel(prob: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise binary cross-entropy and its derivative w.r.t. ``prob``.

    Probabilities are clamped to ``[eps, 1 - eps]`` first; the derivative is
    taken at the clamped value. Computed in float64.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p))
    return loss, grad


def uncertainty(passes) -> np.ndarray:
    """Population standard deviation across ``K`` stochastic probability maps."""
    maps = [np.asarray(p) for p in passes]
    if len(maps) < 2:
        raise ValueError(f"need at least 2 passes, got {len(maps)}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("all probability maps must share one shape")
    stack = np.stack(maps).astype(np.float64)
    return stack.std(axis=0)


def pixel_mask(u: np.ndarray, eta: float = 0.05) -> np.ndarray:
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return (np.asarray(u) < eta).astype(np.uint8)


def class_masks(label: np.ndarray, u: np.ndarray, eta: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Object and background masks among low-uncertainty pixels."""
    label = np.asarray(label)
    if label.shape != np.shape(u):
        raise ValueError(f"label {label.shape} and uncertainty {np.shape(u)} differ")
    certain = pixel_mask(u, eta)
    b_obj = ((label == 1) & (certain == 1)).astype(np.uint8)
    b_bg = ((label == 0) & (certain == 1)).astype(np.uint8)
    return b_obj, b_bg


def prototypes(features: np.ndarray, b_obj: np.ndarray, b_bg: np.ndarray, prob: np.ndarray) -> Prototypes:
    """Probability-weighted object/background centroids per class channel.

    ``features`` is ``(H, W, L)`` at label resolution. Object pixels weigh by
    ``p``, background pixels by ``1 - p``. A side with zero total weight is
    marked invalid and its centroid set to NaN.
    """
    e = np.asarray(features, dtype=np.float64)
    p = np.asarray(prob, dtype=np.float64)
    w_obj = b_obj * p
    w_bg = b_bg * (1.0 - p)
    mass_obj = w_obj.sum(axis=(0, 1))
    mass_bg = w_bg.sum(axis=(0, 1))
    sum_obj = np.einsum("hwl,hwc->cl", e, w_obj)
    sum_bg = np.einsum("hwl,hwc->cl", e, w_bg)
    obj_valid = mass_obj > 0
    bg_valid = mass_bg > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        z_obj = np.where(obj_valid[:, None], sum_obj / mass_obj[:, None], np.nan)
        z_bg = np.where(bg_valid[:, None], sum_bg / mass_bg[:, None], np.nan)
    return Prototypes(z_obj, z_bg, obj_valid, bg_valid)


def feature_distances(features: np.ndarray, protos: Prototypes) -> DistanceMaps:
    """Euclidean distance from every pixel feature to each class's two centroids."""
    e = np.asarray(features, dtype=np.float64)
    d_obj = np.sqrt(((e[:, :, None, :] - protos.obj[None, None]) ** 2).sum(axis=-1))
    d_bg = np.sqrt(((e[:, :, None, :] - protos.bg[None, None]) ** 2).sum(axis=-1))
    return DistanceMaps(d_obj, d_bg, protos.valid.copy())


def combined_mask(u: np.ndarray, eta: float, label: np.ndarray, dist: DistanceMaps) -> np.ndarray:
    """Keep a pseudo label when it is certain and its feature sits nearer its own side.

    Ties in distance are dropped. Classes whose distances are undefined fall
    back to the uncertainty test alone.
    """
    certain = np.asarray(u) < eta
    label = np.asarray(label)
    with np.errstate(invalid="ignore"):
        nearer_obj = dist.obj < dist.bg
        nearer_bg = dist.obj > dist.bg
    keep = certain & (((label == 1) & nearer_obj) | ((label == 0) & nearer_bg))
    valid = np.broadcast_to(np.asarray(dist.valid, dtype=bool), keep.shape)
    return np.where(valid, keep, certain).astype(np.uint8)


def masked_loss(prob: np.ndarray, label: np.ndarray, mask: np.ndarray,
                stats: Counter | None = None) -> tuple[float, np.ndarray]:
    """Mean BCE over selected entries and its gradient w.r.t. ``prob``.

    The sum over ``mask == 1`` is divided by ``max(1, count)``. An empty mask
    gives zero loss and gradient and bumps ``stats["empty_mask"]``.
    """
    if not (np.shape(prob) == np.shape(label) == np.shape(mask)):
        raise ValueError(f"shape mismatch: {np.shape(prob)}, {np.shape(label)}, {np.shape(mask)}")
    m = np.asarray(mask, dtype=np.float64)
    count = float(m.sum())
    if count == 0:
        if stats is not None:
            stats["empty_mask"] += 1
        return 0.0, np.zeros(np.shape(prob), dtype=np.float64)
    loss, grad = bce_per_pixel(prob, label)
    total = float((loss * m).sum()) / count
    return total, grad * m / count


def mean_bce(prob: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Unmasked mean BCE over every entry (supervised source training)."""
    loss, grad = bce_per_pixel(prob, label)
    n = loss.size
    return float(loss.sum()) / n, grad / n
