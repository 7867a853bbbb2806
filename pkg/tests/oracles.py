"""Deliberately naive reference implementations used as test oracles.

Nothing here imports the package's numerical code; every routine is a plain
loop over pixels so it can be checked by eye.
"""

import math

import numpy as np


def conv3x3_naive(x, w, b):
    """Zero-padded 3x3 convolution, x (H, W, Cin), w (3, 3, Cin, Cout)."""
    h, wd, cin = x.shape
    cout = w.shape[3]
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for o in range(cout):
                acc = b[o]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < wd:
                            for c in range(cin):
                                acc += x[ii, jj, c] * w[di, dj, c, o]
                out[i, j, o] = acc
    return out


def upsample_naive(x, h, w):
    """Align-corners bilinear resize of (h', w', C) written per output pixel."""
    hi, wi, c = x.shape
    out = np.zeros((h, w, c))
    for i in range(h):
        sy = i * (hi - 1) / (h - 1) if h > 1 else 0.0
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, hi - 1)
        fy = sy - y0
        for j in range(w):
            sx = j * (wi - 1) / (w - 1) if w > 1 else 0.0
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, wi - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                         + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
    return out


def forward_naive(weights, image):
    """Eval-mode network forward built from the naive pieces above."""
    def relu(a):
        return np.maximum(a, 0.0)

    h, w, _ = image.shape
    a1 = relu(conv3x3_naive(image, weights["conv1.w"], weights["conv1.b"]))
    pooled = np.zeros((h // 2, w // 2, a1.shape[2]))
    for i in range(h // 2):
        for j in range(w // 2):
            pooled[i, j] = (a1[2 * i, 2 * j] + a1[2 * i + 1, 2 * j] + a1[2 * i, 2 * j + 1] + a1[2 * i + 1, 2 * j + 1]) / 4
    a2 = relu(conv3x3_naive(pooled, weights["conv2.w"], weights["conv2.b"]))
    e = relu(conv3x3_naive(a2, weights["conv3.w"], weights["conv3.b"]))
    logits = np.zeros(e.shape[:2] + (2,))
    for i in range(e.shape[0]):
        for j in range(e.shape[1]):
            for o in range(2):
                logits[i, j, o] = weights["conv4.b"][o] + sum(
                    e[i, j, c] * weights["conv4.w"][0, 0, c, o] for c in range(e.shape[2]))
    s = 1.0 / (1.0 + np.exp(-logits))
    return upsample_naive(s, h, w), e


def std_naive(stack):
    """Two-pass population standard deviation along the first axis."""
    stack = [np.asarray(s, dtype=np.float64) for s in stack]
    k = len(stack)
    out = np.zeros(stack[0].shape)
    for idx in np.ndindex(out.shape):
        vals = [s[idx] for s in stack]
        mean = sum(vals) / k
        out[idx] = math.sqrt(sum((v - mean) ** 2 for v in vals) / k)
    return out


def prototypes_naive(e, b_obj, b_bg, p):
    h, w, L = e.shape
    c = p.shape[2]
    z_obj = np.full((c, L), np.nan)
    z_bg = np.full((c, L), np.nan)
    for k in range(c):
        num_o, den_o = np.zeros(L), 0.0
        num_b, den_b = np.zeros(L), 0.0
        for i in range(h):
            for j in range(w):
                wo = b_obj[i, j, k] * p[i, j, k]
                wb = b_bg[i, j, k] * (1.0 - p[i, j, k])
                num_o += e[i, j] * wo
                den_o += wo
                num_b += e[i, j] * wb
                den_b += wb
        if den_o > 0:
            z_obj[k] = num_o / den_o
        if den_b > 0:
            z_bg[k] = num_b / den_b
    return z_obj, z_bg


def distances_naive(e, z):
    h, w, _ = e.shape
    c = z.shape[0]
    d = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            for k in range(c):
                d[i, j, k] = math.sqrt(sum((e[i, j, l] - z[k, l]) ** 2 for l in range(e.shape[2])))
    return d


def dice_naive(a, b):
    na = nb = inter = 0
    for x, y in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        na += bool(x)
        nb += bool(y)
        inter += bool(x) and bool(y)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def _boundary_points(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < h and 0 <= jj < w) or not mask[ii, jj]:
                    pts.append((i, j))
                    break
    return pts


def asd_naive(a, b):
    """All-pairs symmetric average surface distance; None if a mask is empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if not a.any() or not b.any():
        return None
    pa, pb = _boundary_points(a), _boundary_points(b)

    def directed(src, dst):
        return sum(min(math.hypot(i - k, j - l) for k, l in dst) for i, j in src) / len(src)

    return (directed(pa, pb) + directed(pb, pa)) / 2.0


def eq6_literal(u, eta, y, d_obj, d_bg):
    """Selection rule written term by term as a sum of two indicator products."""
    ind = lambda cond: 1 if cond else 0  # noqa: E731
    return ind(u < eta) * ind(y == 1) * ind(d_obj < d_bg) + ind(u < eta) * ind(y == 0) * ind(d_obj > d_bg)


def fd_gradient_errors(seed=0, per_layer=50, h=1e-3, size=8):
    """Central-difference check of the network's backprop in float64.

    Returns ``{param_name: (max relative error, entries checked)}`` over
    ``per_layer`` random entries of every parameter tensor. The loss is the
    mean BCE of a train-mode forward pass with a fixed dropout mask against
    random labels. A perturbation that flips the sign of any ReLU input
    straddles a kink where the difference quotient is not a derivative
    estimate; such entries are skipped and another entry is drawn.
    """
    from dpl import core, segnet
    from dpl.rng import Rng

    rng = Rng(seed)
    params = segnet.init_params(rng, dtype=np.float64)
    for name in segnet.PARAM_NAMES:
        if name.endswith(".b"):
            params.weights[name] = rng.normal_array(params[name].size).reshape(params[name].shape) * 0.1
    x = rng.uniform_array(size * size * 3).reshape(1, size, size, 3)
    y = (rng.uniform_array(size * size * 2) > 0.5).reshape(1, size, size, 2).astype(np.uint8)
    mask = segnet.sample_dropout_mask(rng, (1, size // 2, size // 2, 32), 0.5, np.float64)

    def run(p):
        prob, _, cache = segnet.forward(p, x, "train", dropout_mask=mask)
        pattern = np.concatenate([(z > 0).ravel() for z in (cache.z1, cache.z2, cache.z3)])
        return core.mean_bce(prob, y), cache, pattern

    (_, dprob), cache, base = run(params)
    grads = segnet.backward(cache, dprob)
    errors = {}
    for name in segnet.PARAM_NAMES:
        flat = params.weights[name].reshape(-1)
        worst, checked, tries = 0.0, 0, 0
        while checked < per_layer and tries < 50 * per_layer:
            tries += 1
            idx = rng.randint(flat.size)
            old = flat[idx]
            flat[idx] = old + h
            (up, _), _, pat_up = run(params)
            flat[idx] = old - h
            (down, _), _, pat_down = run(params)
            flat[idx] = old
            if (pat_up != base).any() or (pat_down != base).any():
                continue
            checked += 1
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[idx]
            scale = max(abs(num), abs(ana))
            if scale > 0:
                worst = max(worst, abs(num - ana) / scale)
        errors[name] = (worst, checked)
    return errors
