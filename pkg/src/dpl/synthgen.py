"""Synthetic fundus-like images with nested disc/cup ground truth.

Each sample draws its geometry first, then a background texture field and a
noise field of fixed size, so the random stream consumed per sample does not
depend on the domain parameters. Two domains with the same seed therefore
share their label maps exactly and differ only in appearance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .io_formats import ensure_dir, read_image_ppm, read_mask_pgm, write_image_ppm, write_mask_pgm
from .rng import Rng, derive_seed

CLASS_NAMES = ("disc", "cup")
MANIFEST = "manifest.txt"

TEXTURE_SMOOTHING = 2.0
# Disc and cup brighten only green and blue. Red carries a per-image offset
# with no label signal, so a source model cannot lean on red, whose base
# level moves between domains.
DISC_GAIN = (0.0, 0.3, 0.3)
CUP_GAIN = (0.0, 0.25, 0.15)
BRIGHTNESS_JITTER = (1.0, 1.0)
COLOR_JITTER = (0.15, 0.03, 0.03)
GAMMA_JITTER = 0.1


@dataclass(frozen=True)
class DomainParams:
    base_intensity: tuple[float, float, float]
    gamma: float
    channel_scale: tuple[float, float, float]
    blur_radius: float
    noise_sigma: float
    texture_amp: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")
        if any(s <= 0 for s in self.channel_scale):
            raise ValueError("channel_scale components must be positive")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: np.ndarray  # (H, W, 2) uint8, channel 0 disc, channel 1 cup


def default_source_params() -> DomainParams:
    return DomainParams((0.55, 0.35, 0.25), 1.0, (1.0, 1.0, 1.0), 0.5, 0.01, 0.05)


def default_target_params() -> DomainParams:
    return DomainParams((0.45, 0.40, 0.30), 1.4, (0.85, 1.0, 1.15), 1.5, 0.03, 0.08)


def domain_params_dict(params: DomainParams) -> dict:
    return asdict(params)


def gaussian_kernel(radius: float) -> np.ndarray:
    """Normalized 1-D Gaussian with sigma ``radius`` truncated at 3 sigma."""
    half = max(1, int(math.ceil(3.0 * radius)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * radius * radius))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian blur over the first two axes, reflect padding."""
    if radius <= 0:
        return img.copy()
    k = gaussian_kernel(radius)
    half = len(k) // 2
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (half, half)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, wgt in enumerate(k):
            acc += wgt * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def _ellipse(h: int, w: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _draw_geometry(rng: Rng, h: int, w: int):
    m = min(h, w)
    ax = rng.uniform(0.25, 0.38) * m
    ay = rng.uniform(0.25, 0.38) * m
    cx = rng.uniform(w / 3.0, 2.0 * w / 3.0)
    cy = rng.uniform(h / 3.0, 2.0 * h / 3.0)
    kx = rng.uniform(0.4, 0.7)
    ky = rng.uniform(0.4, 0.7)
    return cx, cy, ax, ay, kx, ky


def composite(label: np.ndarray, texture: np.ndarray, params: DomainParams, brightness: float = 1.0,
              color_shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Untransformed image: textured background plus brighter disc and cup."""
    disc = label[..., 0].astype(np.float64)[..., None]
    cup = label[..., 1].astype(np.float64)[..., None]
    base = np.asarray(params.base_intensity, dtype=np.float64) + np.asarray(color_shift)
    img = base + params.texture_amp * texture[..., None]
    img = img + disc * np.asarray(DISC_GAIN) + cup * np.asarray(CUP_GAIN)
    img = img * brightness
    return np.clip(img, 0.0, 1.0)


def apply_domain(img: np.ndarray, noise: np.ndarray, params: DomainParams, gamma_scale: float = 1.0) -> np.ndarray:
    out = img * np.asarray(params.channel_scale, dtype=np.float64)
    out = np.clip(out, 0.0, 1.0) ** (params.gamma * gamma_scale)
    out = gaussian_blur(out, params.blur_radius)
    out = out + params.noise_sigma * noise
    return np.clip(out, 0.0, 1.0)


def gen_sample(rng: Rng, params: DomainParams, h: int, w: int, transform: bool = True) -> Sample:
    """Draw one sample; ``transform=False`` returns the bare composite."""
    if h < 32 or w < 32:
        raise ValueError(f"image must be at least 32x32, got {h}x{w}")
    cx, cy, ax, ay, kx, ky = _draw_geometry(rng, h, w)
    disc = _ellipse(h, w, cx, cy, ax, ay)
    cup = _ellipse(h, w, cx, cy, ax * kx, ay * ky) & disc
    label = np.stack([disc, cup], axis=-1).astype(np.uint8)

    brightness = rng.uniform(*BRIGHTNESS_JITTER)
    color_shift = [rng.uniform(-a, a) for a in np.broadcast_to(COLOR_JITTER, (3,))]
    gamma_scale = math.exp(rng.uniform(-GAMMA_JITTER, GAMMA_JITTER))
    field = gaussian_blur(rng.normal_array(h * w).reshape(h, w), TEXTURE_SMOOTHING)
    field = field / (field.std() + 1e-12)
    noise = rng.normal_array(h * w * 3).reshape(h, w, 3)

    img = composite(label, field, params, brightness, color_shift)
    if transform:
        img = apply_domain(img, noise, params, gamma_scale)
    return Sample(img.astype(np.float32), label)


def gen_dataset(seed: int, params: DomainParams, n: int, h: int, w: int, out_dir) -> list[str]:
    """Write ``n`` samples plus ``manifest.txt`` to ``out_dir``; returns the stems."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = ensure_dir(out_dir)
    stems = []
    for i in range(n):
        stem = f"img_{i:04d}"
        sample = gen_sample(Rng(derive_seed(seed, i)), params, h, w)
        write_image_ppm(out / f"{stem}.ppm", sample.image)
        for c, name in enumerate(CLASS_NAMES):
            write_mask_pgm(out / f"{stem}.{name}.pgm", sample.label[..., c])
        stems.append(stem)
    (out / MANIFEST).write_text("\n".join(stems) + "\n")
    return stems


# -- dataset loading --------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    stems: list[str]
    images: np.ndarray  # (N, H, W, 3) float32
    labels: np.ndarray | None  # (N, H, W, 2) uint8 or None when not loaded

    def __len__(self) -> int:
        return len(self.stems)


def read_manifest(root) -> list[str]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"manifest missing: {path}")
    stems = [s.strip() for s in path.read_text().splitlines() if s.strip()]
    if not stems:
        raise ValueError(f"empty manifest: {path}")
    return stems


def load_dataset(root, with_labels: bool = True) -> Dataset:
    """Load images (and optionally ground truth) listed in the manifest."""
    root = Path(root)
    stems = read_manifest(root)
    images = []
    labels = []
    for stem in stems:
        img_path = root / f"{stem}.ppm"
        if not img_path.exists():
            raise FileNotFoundError(f"manifest lists {stem} but {img_path} is missing")
        images.append(read_image_ppm(img_path))
        if with_labels:
            labels.append(np.stack(
                [read_mask_pgm(root / f"{stem}.{name}.pgm") > 0.5 for name in CLASS_NAMES], axis=-1
            ).astype(np.uint8))
    if len({im.shape for im in images}) != 1:
        raise ValueError(f"{root}: images have mixed sizes")
    return Dataset(root, stems, np.stack(images), np.stack(labels) if with_labels else None)
