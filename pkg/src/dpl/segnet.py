"""Tiny fully-convolutional segmentation network with manual backprop.

Layout is channels-last throughout: images are ``(H, W, 3)`` or batched
``(N, H, W, 3)``. Architecture::

    conv1 3x3 (3->16) + ReLU -> avgpool 2x2 -> conv2 3x3 (16->32) + ReLU
    -> dropout -> conv3 3x3 (32->16) + ReLU  (= low-res feature map e_l)
    -> conv4 1x1 (16->2) + sigmoid -> bilinear x2 (align corners)

Every op keeps the dtype of its inputs, so float64 parameters and images give
a float64 pass for gradient checking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io_formats import FormatError, ensure_dir, load_array, save_array
from .rng import Rng

PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "conv1.w": (3, 3, 3, 16),
    "conv1.b": (16,),
    "conv2.w": (3, 3, 16, 32),
    "conv2.b": (32,),
    "conv3.w": (3, 3, 32, 16),
    "conv3.b": (16,),
    "conv4.w": (1, 1, 16, 2),
    "conv4.b": (2,),
}
PARAM_NAMES = tuple(PARAM_SHAPES)
FEATURE_CHANNELS = 16
NUM_CLASSES = 2
MODES = ("train", "eval", "mc")


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    dropout: float = 0.5

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.weights.items()}, self.dropout)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.weights.items()}, self.dropout)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]


@dataclass
class ForwardCache:
    x: np.ndarray
    cols1: np.ndarray
    z1: np.ndarray
    pooled: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    drop_mask: np.ndarray | None
    cols3: np.ndarray
    z3: np.ndarray
    e_low: np.ndarray
    s_low: np.ndarray
    prob: np.ndarray
    params: ModelParams
    squeeze: bool


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, beta1: float = 0.9, beta2: float = 0.99) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.weights.items()},
            v={k: np.zeros_like(v) for k, v in params.weights.items()},
            beta1=beta1,
            beta2=beta2,
        )


def init_params(rng: Rng, dropout: float = 0.5, dtype=np.float32) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    weights = {}
    for name in PARAM_NAMES:
        shape = PARAM_SHAPES[name]
        if name.endswith(".b"):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            draws = rng.normal_array(int(np.prod(shape))) * np.sqrt(2.0 / fan_in)
            weights[name] = draws.reshape(shape).astype(dtype)
    return ModelParams(weights, dropout)


# -- layers -----------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=-1)


def _col2im3(dcols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + w, :] += dcols[..., k * c : (k + 1) * c]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded 3x3 convolution; returns the output and its im2col buffer."""
    cols = _im2col3(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out, cols


def avgpool2(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_backward(d: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(d, 2, axis=1), 2, axis=2) * d.dtype.type(0.25)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Row ``i`` holds the align-corners weights of output ``i`` on the input axis."""
    if n_out < n_in:
        raise ValueError(f"cannot upsample {n_in} -> {n_out}")
    r = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        r[:, 0] = 1.0
        return r.astype(dtype)
    scale = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    for i in range(n_out):
        src = i * scale
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        r[i, i0] += 1.0 - frac
        r[i, i1] += frac
    return r.astype(dtype)


def bilinear_upsample(fmap: np.ndarray, h: int, w: int) -> np.ndarray:
    """Upsample ``(h', w', C)`` or ``(N, h', w', C)`` maps to ``h x w``."""
    squeeze = fmap.ndim == 3
    x = fmap[None] if squeeze else fmap
    hi, wi = x.shape[1], x.shape[2]
    if h < hi or w < wi:
        raise ValueError(f"target {h}x{w} smaller than source {hi}x{wi}")
    if (h, w) == (hi, wi):
        out = x.copy()
    else:
        ry = interp_matrix(h, hi, x.dtype)
        rx = interp_matrix(w, wi, x.dtype)
        out = np.einsum("Yy,nyxc,Xx->nYXc", ry, x, rx, optimize=True)
    return out[0] if squeeze else out


def bilinear_upsample_backward(grad: np.ndarray, hi: int, wi: int) -> np.ndarray:
    """Adjoint of :func:`bilinear_upsample` for a batched gradient."""
    n, h, w, c = grad.shape
    if (h, w) == (hi, wi):
        return grad.copy()
    ry = interp_matrix(h, hi, grad.dtype)
    rx = interp_matrix(w, wi, grad.dtype)
    return np.einsum("Yy,nYXc,Xx->nyxc", ry, grad, rx, optimize=True)


def sample_dropout_mask(rng: Rng, shape, rate: float, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    u = rng.uniform_array(int(np.prod(shape))).reshape(shape)
    keep = u >= rate
    return (keep * (1.0 / (1.0 - rate))).astype(dtype)


# -- network ----------------------------------------------------------------


def forward(params: ModelParams, image: np.ndarray, mode: str = "eval", rng: Rng | None = None,
            dropout_mask: np.ndarray | None = None):
    """Run the network.

    Returns ``(prob, e_low, cache)``: the full-resolution sigmoid map, the
    low-resolution feature map before the last convolution, and the values
    needed by :func:`backward`. ``mode`` is ``eval`` (no dropout), ``train`` or
    ``mc`` (dropout sampled from ``rng``). ``dropout_mask`` overrides sampling.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    squeeze = image.ndim == 3
    x = image[None] if squeeze else image
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) or (N, H, W, 3) image, got {image.shape}")
    n, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dims must be even for 2x2 pooling, got {h}x{w}")
    x = x.astype(params["conv1.w"].dtype, copy=False)
    p = params.weights

    z1, cols1 = conv3x3(x, p["conv1.w"], p["conv1.b"])
    pooled = avgpool2(np.maximum(z1, 0))
    z2, cols2 = conv3x3(pooled, p["conv2.w"], p["conv2.b"])
    a2 = np.maximum(z2, 0)
    mask = None
    if mode != "eval":
        if dropout_mask is not None:
            mask = dropout_mask.reshape(a2.shape).astype(a2.dtype)
        else:
            if rng is None:
                raise ValueError(f"mode {mode!r} samples dropout and needs an rng")
            mask = sample_dropout_mask(rng, a2.shape, params.dropout, a2.dtype)
        a2 = a2 * mask
    z3, cols3 = conv3x3(a2, p["conv3.w"], p["conv3.b"])
    e_low = np.maximum(z3, 0)
    z4 = e_low @ p["conv4.w"].reshape(FEATURE_CHANNELS, NUM_CLASSES) + p["conv4.b"]
    s_low = sigmoid(z4)
    prob = bilinear_upsample(s_low, h, w)

    cache = ForwardCache(x, cols1, z1, pooled, cols2, z2, mask, cols3, z3, e_low, s_low, prob, params, squeeze)
    if squeeze:
        return prob[0], e_low[0], cache
    return prob, e_low, cache


def backward(cache: ForwardCache, dprob: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter given dLoss/dProb."""
    dprob = dprob[None] if cache.squeeze and dprob.ndim == 3 else dprob
    if dprob.shape != cache.prob.shape:
        raise ValueError(f"gradient shape {dprob.shape} does not match output {cache.prob.shape}")
    p = cache.params.weights
    dtype = cache.prob.dtype
    dprob = dprob.astype(dtype, copy=False)
    grads: dict[str, np.ndarray] = {}

    hl, wl = cache.s_low.shape[1:3]
    ds = bilinear_upsample_backward(dprob, hl, wl)
    dz4 = ds * cache.s_low * (1 - cache.s_low)
    grads["conv4.w"] = (cache.e_low.reshape(-1, FEATURE_CHANNELS).T @ dz4.reshape(-1, NUM_CLASSES)).reshape(
        PARAM_SHAPES["conv4.w"])
    grads["conv4.b"] = dz4.sum(axis=(0, 1, 2))

    de = dz4 @ p["conv4.w"].reshape(FEATURE_CHANNELS, NUM_CLASSES).T
    dz3 = de * (cache.z3 > 0)
    da2 = _conv_backward(dz3, cache.cols3, p["conv3.w"], grads, "conv3")
    if cache.drop_mask is not None:
        da2 = da2 * cache.drop_mask
    dz2 = da2 * (cache.z2 > 0)
    dpooled = _conv_backward(dz2, cache.cols2, p["conv2.w"], grads, "conv2")
    dz1 = _avgpool2_backward(dpooled) * (cache.z1 > 0)
    _conv_backward(dz1, cache.cols1, p["conv1.w"], grads, "conv1", need_input=False)
    return {k: grads[k].astype(dtype, copy=False) for k in PARAM_NAMES}


def _conv_backward(dz, cols, w, grads, name, need_input=True):
    cout = w.shape[-1]
    cin = w.shape[2]
    dz2d = dz.reshape(-1, cout)
    grads[f"{name}.w"] = (cols.reshape(-1, cols.shape[-1]).T @ dz2d).reshape(w.shape)
    grads[f"{name}.b"] = dz2d.sum(axis=0)
    if not need_input:
        return None
    dcols = (dz2d @ w.reshape(-1, cout).T).reshape(cols.shape)
    return _col2im3(dcols, cin)


def predict(params: ModelParams, images: np.ndarray, batch: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and low-res features for a stack of images."""
    probs, feats = [], []
    for i in range(0, len(images), batch):
        pr, fe, _ = forward(params, images[i : i + batch], "eval")
        probs.append(pr)
        feats.append(fe)
    return np.concatenate(probs), np.concatenate(feats)


def mc_passes(params: ModelParams, image: np.ndarray, k: int, rng: Rng) -> list[np.ndarray]:
    """``k`` dropout-sampled probability maps of one image.

    The passes run as one batch; the batch mask is drawn in the same order as
    ``k`` sequential ``forward(..., "mc", rng)`` calls would draw it.
    """
    if k < 2:
        raise ValueError(f"need at least 2 stochastic passes, got {k}")
    batch = np.repeat(image[None], k, axis=0)
    prob, _, _ = forward(params, batch, "mc", rng)
    return list(prob)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new params and state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            bad = int(np.count_nonzero(~np.isfinite(grads[name])))
            raise FloatingPointError(f"non-finite gradient in {name} ({bad} entries) at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_w, new_m, new_v = {}, {}, {}
    for name in PARAM_NAMES:
        g = grads[name]
        w = params.weights[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_w[name] = (w - step).astype(w.dtype)
        new_m[name] = m.astype(w.dtype)
        new_v[name] = v.astype(w.dtype)
    new_params = ModelParams(new_w, params.dropout)
    for name, arr in new_w.items():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite parameter {name} after step {t}")
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


# -- checkpoints ------------------------------------------------------------

INDEX_NAME = "index.txt"


def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None) -> Path:
    """Write one ``.tns`` per tensor plus a text index; returns the directory."""
    path = ensure_dir(path)
    lines = [f"dropout {params.dropout!r}"]
    for name in PARAM_NAMES:
        arr = params.weights[name]
        save_array(path / f"{name}.tns", arr)
        lines.append(f"tensor {name} " + " ".join(str(d) for d in arr.shape))
    if adam is not None:
        lines.append(f"adam {adam.t} {adam.beta1!r} {adam.beta2!r} {adam.eps!r}")
        for name in PARAM_NAMES:
            save_array(path / f"adam.m.{name}.tns", adam.m[name])
            save_array(path / f"adam.v.{name}.tns", adam.v[name])
    (path / INDEX_NAME).write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path) -> tuple[ModelParams, AdamState | None]:
    path = Path(path)
    index = path / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"checkpoint index missing: {index}")
    dropout = None
    weights: dict[str, np.ndarray] = {}
    adam_meta = None
    for line in index.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "dropout":
            dropout = float(parts[1])
        elif parts[0] == "tensor":
            name = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            arr = load_array(path / f"{name}.tns")
            if arr.shape != shape:
                raise FormatError(f"{name}: index says {shape}, file holds {arr.shape}")
            weights[name] = arr
        elif parts[0] == "adam":
            adam_meta = (int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]))
        else:
            raise FormatError(f"{index}: unknown entry {parts[0]!r}")
    missing = [n for n in PARAM_NAMES if n not in weights]
    if missing or dropout is None:
        raise FormatError(f"{index}: incomplete checkpoint (missing {missing or 'dropout'})")
    params = ModelParams(weights, dropout)
    adam = None
    if adam_meta is not None:
        t, b1, b2, eps = adam_meta
        adam = AdamState(
            {n: load_array(path / f"adam.m.{n}.tns") for n in PARAM_NAMES},
            {n: load_array(path / f"adam.v.{n}.tns") for n in PARAM_NAMES},
            t, b1, b2, eps,
        )
    return params, adam


def params_hash(params: ModelParams) -> str:
    """Short content hash identifying a set of weights (float32 bytes)."""
    h = hashlib.sha256(f"dropout {params.dropout!r}".encode())
    for name in PARAM_NAMES:
        h.update(name.encode())
        h.update(np.asarray(params.weights[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]
