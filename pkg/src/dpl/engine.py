"""Source training, pseudo-label preparation and source-free adaptation."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import core
from .io_formats import ensure_dir, read_mask_pgm, save_array, load_array, write_mask_pgm
from .rng import Rng, derive_seed
from .segnet import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    bilinear_upsample,
    forward,
    init_params,
    mc_passes,
    params_hash,
    save_checkpoint,
)
from .synthgen import CLASS_NAMES, Dataset

log = logging.getLogger(__name__)

DENOISE_MODES = ("plain", "pixel", "class", "full")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 8
    epochs: int = 2
    source_epochs: int = 40
    gamma: float = 0.75
    eta: float = 0.05
    k: int = 10
    dropout: float = 0.5
    seed: int = 42
    image_size: tuple[int, int] = (64, 64)
    denoise_mode: str = "full"
    aug_prob: float = 0.5
    aug_noise_sigma: float = 0.05
    aug_contrast: tuple[float, float] = (0.8, 1.2)
    aug_erase_area: tuple[float, float] = (0.02, 0.10)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.k < 2:
            raise ValueError("K must be at least 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0 or self.source_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.denoise_mode not in DENOISE_MODES:
            raise ValueError(f"denoise_mode must be one of {DENOISE_MODES}")

    def describe(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# -- augmentation -----------------------------------------------------------


def weak_augment(rng: Rng, image: np.ndarray, config: TrainConfig | None = None) -> np.ndarray:
    """Gaussian noise, contrast change and random erasing, each with probability 0.5.

    The three coin flips are drawn first; parameters are drawn only for the
    operations that fire.
    """
    cfg = config or TrainConfig()
    use_noise = rng.next_f32() < cfg.aug_prob
    use_contrast = rng.next_f32() < cfg.aug_prob
    use_erase = rng.next_f32() < cfg.aug_prob
    if not (use_noise or use_contrast or use_erase):
        return image.copy()
    h, w, c = image.shape
    out = image.astype(np.float64)
    if use_noise:
        out = out + cfg.aug_noise_sigma * rng.normal_array(h * w * c).reshape(h, w, c)
    if use_contrast:
        f = rng.uniform(*cfg.aug_contrast)
        out = 0.5 + f * (out - 0.5)
    out = np.clip(out, 0.0, 1.0)
    if use_erase:
        y0, x0, eh, ew = erase_box(rng, h, w, cfg.aug_erase_area)
        out[y0 : y0 + eh, x0 : x0 + ew] = out.mean(axis=(0, 1))
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def erase_box(rng: Rng, h: int, w: int, area_range=(0.02, 0.10)) -> tuple[int, int, int, int]:
    """Random rectangle ``(y0, x0, height, width)`` covering the given area fraction."""
    area = rng.uniform(*area_range) * h * w
    aspect = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    eh = int(min(h, max(1, round(np.sqrt(area * aspect)))))
    ew = int(min(w, max(1, round(area / eh))))
    y0 = rng.randint(h - eh + 1)
    x0 = rng.randint(w - ew + 1)
    return y0, x0, eh, ew


# -- training loops ---------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    """Loss or parameters became non-finite; carries the last good parameters."""

    def __init__(self, message: str, last_good: ModelParams):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainLog:
    rows: list[tuple[int, int, float]] = field(default_factory=list)
    stats: Counter = field(default_factory=Counter)

    def add(self, epoch: int, batch: int, loss: float) -> None:
        self.rows.append((epoch, batch, loss))

    def to_csv(self) -> str:
        return "epoch,batch,loss\n" + "".join(f"{e},{b},{l:.9g}\n" for e, b, l in self.rows)


def _batches(order: list[int], size: int):
    for start in range(0, len(order), size):
        yield sorted(order[start : start + size])


def train_source(dataset: Dataset, config: TrainConfig, epochs: int | None = None,
                 checkpoint_dir=None) -> tuple[ModelParams, TrainLog]:
    """Supervised training on ground truth with full BCE and train-mode dropout."""
    if len(dataset) == 0 or dataset.labels is None:
        raise ValueError("source training needs a non-empty labelled dataset")
    epochs = config.source_epochs if epochs is None else epochs
    params = init_params(Rng(derive_seed(config.seed, "init")), config.dropout)
    adam = AdamState.zeros_like(params, config.beta1, config.beta2)
    tlog = TrainLog()
    labels = dataset.labels.astype(np.float32)
    for epoch in range(epochs):
        order = Rng(derive_seed(config.seed, "source-shuffle", epoch)).permutation(len(dataset))
        for b, idx in enumerate(_batches(order, config.batch_size)):
            drop_rng = Rng(derive_seed(config.seed, "source-dropout", epoch, b))
            prob, _, cache = forward(params, dataset.images[idx], "train", drop_rng)
            loss, grad = core.mean_bce(prob, labels[idx])
            params, adam = _step(params, adam, cache, grad, loss, config.lr, epoch, b)
            tlog.add(epoch, b, loss)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir), params, adam)
        log.info("source epoch %d: last batch loss %.4f", epoch, tlog.rows[-1][2] if tlog.rows else float("nan"))
    return params, tlog


def _step(params, adam, cache, grad, loss, lr, epoch, batch):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {batch}", params)
    grads = backward(cache, grad)
    try:
        return adam_step(params, grads, adam, lr)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"epoch {epoch} batch {batch}: {exc}", params) from exc


# -- pseudo labels ----------------------------------------------------------


@dataclass
class PseudoEntry:
    label: np.ndarray  # (H, W, C) uint8
    mask: np.ndarray  # (H, W, C) uint8
    uncertainty: np.ndarray  # (H, W, C) float32
    degenerate: np.ndarray  # (C,) bool, prototype test disabled for that class


@dataclass
class PseudoSet:
    stems: list[str]
    entries: list[PseudoEntry]
    mode: str
    model_hash: str
    gamma: float
    eta: float
    k: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.stack([e.label for e in self.entries])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([e.mask for e in self.entries])

    def selection_rates(self) -> np.ndarray:
        return self.masks.reshape(-1, len(CLASS_NAMES)).mean(axis=0)

    def degenerate_counts(self) -> np.ndarray:
        return np.stack([e.degenerate for e in self.entries]).sum(axis=0)


def select_mask(mode: str, label: np.ndarray, u: np.ndarray, prob: np.ndarray, features: np.ndarray,
                eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Selection mask for one image under a denoising mode.

    ``class`` runs the prototype test with the uncertainty gate always open.
    Returns ``(mask, degenerate)``.
    """
    n_cls = label.shape[-1]
    if mode == "plain":
        return np.ones_like(label, dtype=np.uint8), np.zeros(n_cls, dtype=bool)
    if mode == "pixel":
        return core.pixel_mask(u, eta), np.zeros(n_cls, dtype=bool)
    if mode not in ("class", "full"):
        raise ValueError(f"unknown denoise mode {mode!r}")
    gate = u if mode == "full" else np.zeros_like(u)
    b_obj, b_bg = core.class_masks(label, gate, eta)
    protos = core.prototypes(features, b_obj, b_bg, prob)
    dist = core.feature_distances(features, protos)
    return core.combined_mask(gate, eta, label, dist), ~dist.valid


def prepare_pseudo_labels(params: ModelParams, images: np.ndarray, stems: list[str],
                          config: TrainConfig) -> PseudoSet:
    """Label every target image once with the frozen source model."""
    if len(stems) == 0:
        raise ValueError("empty target manifest")
    if len(images) != len(stems):
        raise ValueError(f"{len(images)} images but {len(stems)} manifest entries")
    h, w = images.shape[1:3]
    entries = []
    for i, image in enumerate(images):
        prob, e_low, _ = forward(params, image, "eval")
        features = bilinear_upsample(e_low, h, w)
        label = core.gen_pseudo_labels(prob, config.gamma)
        passes = mc_passes(params, image, config.k, Rng(derive_seed(config.seed, "mc", i)))
        u = core.uncertainty(passes)
        mask, degenerate = select_mask(config.denoise_mode, label, u, prob, features, config.eta)
        entries.append(PseudoEntry(label, mask, u.astype(np.float32), degenerate))
    return PseudoSet(list(stems), entries, config.denoise_mode, params_hash(params),
                     config.gamma, config.eta, config.k)


DIAGNOSTICS = "diagnostics.txt"


def write_pseudo_set(pset: PseudoSet, out_dir) -> Path:
    out = ensure_dir(out_dir)
    for stem, e in zip(pset.stems, pset.entries):
        for c, name in enumerate(CLASS_NAMES):
            write_mask_pgm(out / f"{stem}.pl.{name}.pgm", e.label[..., c])
            write_mask_pgm(out / f"{stem}.mask.{name}.pgm", e.mask[..., c])
        save_array(out / f"{stem}.u.tns", e.uncertainty)
    rates = pset.selection_rates()
    degen = pset.degenerate_counts()
    lines = [
        f"mode = {pset.mode}",
        f"model_hash = {pset.model_hash}",
        f"gamma = {pset.gamma}",
        f"eta = {pset.eta}",
        f"k = {pset.k}",
        f"images = {len(pset)}",
        "stems = " + ",".join(pset.stems),
    ]
    for c, name in enumerate(CLASS_NAMES):
        lines.append(f"selection_rate.{name} = {rates[c]:.9f}")
        lines.append(f"degenerate.{name} = {int(degen[c])}")
    for stem, e in zip(pset.stems, pset.entries):
        flags = ",".join(name for c, name in enumerate(CLASS_NAMES) if e.degenerate[c])
        if flags:
            lines.append(f"degenerate_image.{stem} = {flags}")
    (out / DIAGNOSTICS).write_text("\n".join(lines) + "\n")
    return out


def read_pseudo_set(path) -> PseudoSet:
    path = Path(path)
    diag = path / DIAGNOSTICS
    if not diag.exists():
        raise FileNotFoundError(f"pseudo-label diagnostics missing: {diag}")
    meta = {}
    for line in diag.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    stems = meta["stems"].split(",")
    entries = []
    for stem in stems:
        label = np.stack([read_mask_pgm(path / f"{stem}.pl.{n}.pgm") > 0.5 for n in CLASS_NAMES], -1)
        mask = np.stack([read_mask_pgm(path / f"{stem}.mask.{n}.pgm") > 0.5 for n in CLASS_NAMES], -1)
        degen_names = meta.get(f"degenerate_image.{stem}", "")
        degenerate = np.array([n in degen_names.split(",") for n in CLASS_NAMES])
        entries.append(PseudoEntry(label.astype(np.uint8), mask.astype(np.uint8),
                                   load_array(path / f"{stem}.u.tns"), degenerate))
    return PseudoSet(stems, entries, meta["mode"], meta["model_hash"], float(meta["gamma"]),
                     float(meta["eta"]), int(meta["k"]))


# -- adaptation -------------------------------------------------------------


def adapt(source: ModelParams, images: np.ndarray, pseudo: PseudoSet,
          config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Self-train a copy of the source model on fixed denoised pseudo labels.

    Only target images and the pseudo-label set are consumed.
    """
    if len(pseudo) == 0:
        raise ValueError("empty pseudo-label set")
    if len(images) != len(pseudo):
        raise ValueError(f"{len(images)} target images but {len(pseudo)} pseudo labels")
    if pseudo.model_hash != params_hash(source):
        log.warning("pseudo labels were produced by model %s, adapting model %s",
                    pseudo.model_hash, params_hash(source))
    labels = pseudo.labels.astype(np.float32)
    masks = pseudo.masks
    if not masks.any():
        raise ValueError("every selection mask is empty; nothing to adapt on")
    params = source.copy()
    adam = AdamState.zeros_like(params, config.beta1, config.beta2)
    tlog = TrainLog()
    for epoch in range(config.epochs):
        order = Rng(derive_seed(config.seed, "adapt-shuffle", epoch)).permutation(len(images))
        for b, idx in enumerate(_batches(order, config.batch_size)):
            batch = np.stack([
                weak_augment(Rng(derive_seed(config.seed, "augment", epoch, i)), images[i], config) for i in idx
            ])
            drop_rng = Rng(derive_seed(config.seed, "adapt-dropout", epoch, b))
            prob, _, cache = forward(params, batch, "train", drop_rng)
            loss, grad = core.masked_loss(prob, labels[idx], masks[idx], tlog.stats)
            params, adam = _step(params, adam, cache, grad, loss, config.lr, epoch, b)
            tlog.add(epoch, b, loss)
    return params, tlog
