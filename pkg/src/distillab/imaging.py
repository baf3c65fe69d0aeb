"""Image containers, filtering, resampling, and full-reference quality metrics.

An image is a float64 ndarray of shape (H, W, 3), nominal range [0, 1].
Values may transiently leave the range during diffusion; the quality
metrics clamp before comparing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

# SSIM constants for unit dynamic range (canonical choices).
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5

_PERC_LEVELS = 3
_PERC_FILTERS = 8
_PERC_SEED = 0


def as_image(arr) -> np.ndarray:
    """Validate and return a float64 (H, W, 3) image array."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    return img


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class PatchSpec:
    """A square crop: origin (row, col) and side length in pixels."""

    row: int
    col: int
    size: int

    def validate(self, height: int, width: int) -> None:
        if self.size < 1:
            raise ValueError("patch size must be >= 1")
        if self.row < 0 or self.col < 0 or self.row + self.size > height or self.col + self.size > width:
            raise ValueError(f"patch {self} does not fit in {height}x{width} image")


def crop(img: np.ndarray, patch: PatchSpec) -> np.ndarray:
    patch.validate(img.shape[0], img.shape[1])
    return img[patch.row : patch.row + patch.size, patch.col : patch.col + patch.size]


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian kernel, truncated at +-3 sigma, normalized to sum 1."""
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge boundary handling."""
    img = as_image(img)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel_1d(sigma)
    out = correlate1d(img, k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return out


def split_bands(img: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Decompose into (low, high) with low = blur(img, sigma); low + high == img."""
    low = gaussian_blur(img, sigma)
    return low, img - low


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = as_image(a), as_image(b)
    _check_same_shape(a, b)
    d = (np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)).ravel()
    # fsum gives the correctly rounded sum, so the result does not depend
    # on accumulation order
    return math.fsum(d * d) / d.size


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for unit dynamic range; +inf for identical images."""
    m = mse(a, b)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / m))


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    # Separable windowed means; cropping the filter margin leaves exactly
    # the positions where the full 11x11 window fits (valid windows).
    r = len(win) // 2

    def wmean(z):
        z = correlate1d(z, win, axis=0, mode="nearest")
        z = correlate1d(z, win, axis=1, mode="nearest")
        return z[r:-r, r:-r]

    mx = wmean(x)
    my = wmean(y)
    sxx = wmean(x * x) - mx * mx
    syy = wmean(y * y) - my * my
    sxy = wmean(x * y) - mx * my
    num = (2 * mx * my + _SSIM_C1) * (2 * sxy + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (sxx + syy + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, 11x11 Gaussian window sigma=1.5, per channel, averaged."""
    a, b = as_image(a), as_image(b)
    _check_same_shape(a, b)
    if min(a.shape[0], a.shape[1]) < _SSIM_WIN:
        raise ValueError(f"image too small for SSIM, min side {_SSIM_WIN}")
    a = np.clip(a, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    x = np.arange(_SSIM_WIN, dtype=np.float64) - (_SSIM_WIN - 1) / 2
    win = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    win /= win.sum()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win) for c in range(3)]))


def saturation_metric(img: np.ndarray) -> float:
    """Mean per-pixel channel spread (max - min) after clamping."""
    img = np.clip(as_image(img), 0.0, 1.0)
    return float(np.mean(img.max(axis=2) - img.min(axis=2)))


# ---------------------------------------------------------------------------
# Perceptual surrogate: fixed random-feature pyramid
# ---------------------------------------------------------------------------


def _perceptual_filters() -> np.ndarray:
    rng = np.random.default_rng(_PERC_SEED)
    f = rng.standard_normal((_PERC_FILTERS, 3, 3, 3))
    norms = np.sqrt((f * f).sum(axis=(1, 2, 3), keepdims=True))
    return f / norms


_FILTERS = _perceptual_filters()


def _pad_edge(img: np.ndarray) -> np.ndarray:
    return np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")


def _fold_pad_grad(gp: np.ndarray) -> np.ndarray:
    """Accumulate gradients of an edge-padded array back onto the original."""
    g = gp[1:-1, 1:-1].copy()
    g[0] += gp[0, 1:-1]
    g[-1] += gp[-1, 1:-1]
    g[:, 0] += gp[1:-1, 0]
    g[:, -1] += gp[1:-1, -1]
    g[0, 0] += gp[0, 0]
    g[0, -1] += gp[0, -1]
    g[-1, 0] += gp[-1, 0]
    g[-1, -1] += gp[-1, -1]
    return g


def _features(img: np.ndarray) -> np.ndarray:
    """(H, W, 8) pre-nonlinearity responses of the fixed 3x3 filter bank."""
    p = _pad_edge(img)
    h, w = img.shape[0], img.shape[1]
    out = np.zeros((h, w, _PERC_FILTERS))
    for dy in range(3):
        for dx in range(3):
            # (H, W, 3) x (8, 3) -> (H, W, 8)
            out += p[dy : dy + h, dx : dx + w] @ _FILTERS[:, :, dy, dx].T
    return out


def _features_grad(img_shape, gfeat: np.ndarray) -> np.ndarray:
    h, w = img_shape[0], img_shape[1]
    gp = np.zeros((h + 2, w + 2, 3))
    for dy in range(3):
        for dx in range(3):
            gp[dy : dy + h, dx : dx + w] += gfeat @ _FILTERS[:, :, dy, dx]
    return _fold_pad_grad(gp)


def _crop_even(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] & ~1, img.shape[1] & ~1
    return img[:h, :w]


def _pool2(img: np.ndarray) -> np.ndarray:
    img = _crop_even(img)
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _pool2_grad(orig_shape, g: np.ndarray) -> np.ndarray:
    out = np.zeros(orig_shape)
    gq = 0.25 * g
    h2, w2 = 2 * g.shape[0], 2 * g.shape[1]
    out[0:h2:2, 0:w2:2] = gq
    out[1:h2:2, 0:w2:2] = gq
    out[0:h2:2, 1:w2:2] = gq
    out[1:h2:2, 1:w2:2] = gq
    return out


def perceptual_dist(a: np.ndarray, b: np.ndarray) -> float:
    """Fixed random-feature pyramid distance; deterministic across runs."""
    return perceptual_dist_with_grad(a, b)[0]


def perceptual_dist_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Distance and its exact gradient with respect to the first image."""
    a, b = as_image(a), as_image(b)
    _check_same_shape(a, b)
    if min(a.shape[0], a.shape[1]) < 16:
        raise ValueError("perceptual_dist requires side >= 16")
    level_a = [a]
    level_b = [b]
    for _ in range(_PERC_LEVELS - 1):
        level_a.append(_pool2(level_a[-1]))
        level_b.append(_pool2(level_b[-1]))

    total = 0.0
    glevel: list[np.ndarray] = []
    for la, lb in zip(level_a, level_b):
        fa = _features(la)
        fb = _features(lb)
        diff = np.abs(fa) - np.abs(fb)
        total += float(np.mean(diff * diff)) / _PERC_LEVELS
        gfeat = (2.0 / (diff.size * _PERC_LEVELS)) * diff * np.sign(fa)
        glevel.append(_features_grad(la.shape, gfeat))

    # Push each level's gradient back through the pooling chain.
    grad = glevel[-1]
    for k in range(_PERC_LEVELS - 2, -1, -1):
        grad = _pool2_grad(level_a[k].shape, grad)
        grad += glevel[k]
    return total, grad


def resample(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resampling with corner-aligned coordinates."""
    img = as_image(img)
    if new_w < 1 or new_h < 1:
        raise ValueError("target size must be >= 1")
    h, w = img.shape[0], img.shape[1]
    if (new_h, new_w) == (h, w):
        return img.copy()

    def coords(n_src, n_dst):
        if n_dst == 1:
            return np.array([(n_src - 1) / 2.0])
        return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)

    ys = coords(h, new_h)
    xs = coords(w, new_w)
    y0 = np.minimum(ys.astype(int), h - 2) if h > 1 else np.zeros(new_h, int)
    x0 = np.minimum(xs.astype(int), w - 2) if w > 1 else np.zeros(new_w, int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# Binary PPM (P6) serialization
# ---------------------------------------------------------------------------


def write_ppm(img: np.ndarray, path) -> None:
    """Write binary P6, maxval 255, values clamped then rounded half-up."""
    img = as_image(img)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError("unsupported PPM variant")
    w, h = int(fields[1]), int(fields[2])
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0
