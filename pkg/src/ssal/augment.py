"""Seeded weak and strong image augmentations.

Images are float arrays shaped C×H×W (C = 1 or 3) with values in [0, 1].
Randomness comes from a ``numpy.random.Generator`` and every transform draws
its numbers in a fixed order, whether or not the transform fires, so that the
stream position after an augmentation never depends on the outcome:

weak:    flip_u, crop_dy, crop_dx
strong:  weak draws, then for each of brightness, contrast, saturation, hue:
         (apply_u, magnitude); grayscale_u; blur_u, blur_sigma; solarize_u
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_padding: int = 4
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5


DEFAULT = AugmentConfig()


def image_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for one image draw, derived from the experiment seed and
    integer keys such as (epoch, step, image id, view)."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *keys]))


# ------------------------------------------------------------ primitive transforms


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1]


def pad_crop(img: np.ndarray, dy: int, dx: int, padding: int = 4) -> np.ndarray:
    """Zero-pad by ``padding`` and crop the original size at offset (dy, dx)."""
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (padding, padding), (padding, padding)))
    return padded[:, dy : dy + h, dx : dx + w]


def grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img
    gray = np.tensordot(LUMA.astype(img.dtype), img, axes=1)
    return np.broadcast_to(gray, img.shape).copy()


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    mean = grayscale(img).mean()
    return np.clip((img - mean) * factor + mean, 0.0, 1.0)


def adjust_saturation(img, factor):
    if img.shape[0] == 1:
        return img
    gray = grayscale(img)
    return np.clip((img - gray) * factor + gray, 0.0, 1.0)


def adjust_hue(img, shift):
    if img.shape[0] == 1:
        return img
    hsv = rgb_to_hsv(np.moveaxis(img, 0, -1))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(np.moveaxis(hsv_to_rgb(hsv), -1, 0), 0.0, 1.0).astype(img.dtype)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 3-tap Gaussian."""
    k = np.exp(-(np.array([-1.0, 0.0, 1.0]) ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    # separable 3x3 kernel, edge-replicated borders keep constant images constant
    k = gaussian_kernel(sigma).astype(img.dtype)
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    rows = k[0] * p[:, :-2, :] + k[1] * p[:, 1:-1, :] + k[2] * p[:, 2:, :]
    out = k[0] * rows[:, :, :-2] + k[1] * rows[:, :, 1:-1] + k[2] * rows[:, :, 2:]
    return np.clip(out, 0.0, 1.0)


def solarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


# ------------------------------------------------------------ parameter draws


@dataclass
class AugmentParams:
    flip: bool
    dy: int
    dx: int
    # (brightness, contrast, saturation, hue); None when the op does not fire
    jitter: tuple = (None, None, None, None)
    gray: bool = False
    blur_sigma: float | None = None
    solarize: bool = False


def draw_params(rng: np.random.Generator, strong: bool, cfg: AugmentConfig = DEFAULT) -> AugmentParams:
    flip_u = rng.random()
    span = 2 * cfg.crop_padding + 1
    dy = int(rng.integers(span))
    dx = int(rng.integers(span))
    params = AugmentParams(flip_u < cfg.flip_prob, dy, dx)
    if not strong:
        return params
    ranges = (
        (1 - cfg.brightness, 1 + cfg.brightness),
        (1 - cfg.contrast, 1 + cfg.contrast),
        (1 - cfg.saturation, 1 + cfg.saturation),
        (-cfg.hue, cfg.hue),
    )
    jitter = []
    for lo, hi in ranges:
        apply_u = rng.random()
        magnitude = rng.uniform(lo, hi)
        jitter.append(magnitude if apply_u < cfg.jitter_prob else None)
    params.jitter = tuple(jitter)
    params.gray = rng.random() < cfg.grayscale_prob
    blur_u = rng.random()
    sigma = rng.uniform(*cfg.blur_sigma)
    params.blur_sigma = sigma if blur_u < cfg.blur_prob else None
    params.solarize = rng.random() < cfg.solarize_prob
    return params


# ------------------------------------------------------------ pipelines


def _apply(img: np.ndarray, p: AugmentParams, cfg: AugmentConfig) -> np.ndarray:
    out = hflip(img) if p.flip else img
    out = np.clip(pad_crop(out, p.dy, p.dx, cfg.crop_padding), 0.0, 1.0)
    for fn, magnitude in zip((adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue), p.jitter):
        if magnitude is not None:
            out = fn(out, magnitude)
    if p.gray:
        out = grayscale(out)
    if p.blur_sigma is not None:
        out = gaussian_blur(out, p.blur_sigma)
    if p.solarize:
        out = solarize(out, cfg.solarize_threshold)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def weak_augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> np.ndarray:
    """Random horizontal flip, then random crop after zero padding."""
    return _apply(img, draw_params(rng, False, cfg), cfg)


def strong_augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> np.ndarray:
    """Weak flip+crop, colour jitter, grayscale, Gaussian blur and solarize."""
    return _apply(img, draw_params(rng, True, cfg), cfg)


def _col(values, dtype) -> np.ndarray:
    return np.asarray(values, dtype=dtype).reshape(-1, 1, 1, 1)


def apply_batch(images: np.ndarray, params: list, cfg: AugmentConfig = DEFAULT) -> np.ndarray:
    """Vectorized equivalent of applying ``params[i]`` to ``images[i]``.

    Matches the per-image path to float rounding (reductions may sum in a
    different order); bit-exact against itself.
    """
    n, c, h, w = images.shape
    dt = images.dtype
    pad = cfg.crop_padding
    flips = np.array([p.flip for p in params])
    src = np.where(flips[:, None, None, None], images[:, :, :, ::-1], images)
    padded = np.pad(src, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = np.array([p.dy for p in params])
    dx = np.array([p.dx for p in params])
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    out = padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                 rows[:, None, :, None], cols[:, None, None, :]]
    out = np.clip(out, 0.0, 1.0)
    if not any(p.jitter[0] is not None or p.jitter[1] is not None or p.jitter[2] is not None
               or p.jitter[3] is not None or p.gray or p.blur_sigma is not None or p.solarize
               for p in params):
        return out.astype(dt, copy=False)

    def luma(x):
        if c == 1:
            return x
        return np.tensordot(x, LUMA.astype(dt), axes=([1], [0]))[:, None]

    def masked(sel, new, old):
        return np.where(sel[:, None, None, None], new, old)

    b = np.array([p.jitter[0] is not None for p in params])
    if b.any():
        f = _col([p.jitter[0] if p.jitter[0] is not None else 1.0 for p in params], dt)
        out = masked(b, np.clip(out * f, 0.0, 1.0), out)
    k = np.array([p.jitter[1] is not None for p in params])
    if k.any():
        f = _col([p.jitter[1] if p.jitter[1] is not None else 1.0 for p in params], dt)
        mean = luma(out).mean(axis=(1, 2, 3), keepdims=True)
        out = masked(k, np.clip((out - mean) * f + mean, 0.0, 1.0), out)
    if c == 3:
        s = np.array([p.jitter[2] is not None for p in params])
        if s.any():
            f = _col([p.jitter[2] if p.jitter[2] is not None else 1.0 for p in params], dt)
            g = luma(out)
            out = masked(s, np.clip((out - g) * f + g, 0.0, 1.0), out)
        hsel = np.array([p.jitter[3] is not None for p in params])
        if hsel.any():
            shifts = np.array([p.jitter[3] if p.jitter[3] is not None else 0.0 for p in params])
            hsv = rgb_to_hsv(np.moveaxis(out[hsel], 1, -1))
            hsv[..., 0] = (hsv[..., 0] + shifts[hsel][:, None, None]) % 1.0
            out = out.copy()
            out[hsel] = np.clip(np.moveaxis(hsv_to_rgb(hsv), -1, 1), 0.0, 1.0)
        gsel = np.array([p.gray for p in params])
        if gsel.any():
            out = masked(gsel, np.broadcast_to(luma(out), out.shape), out)
    bsel = np.array([p.blur_sigma is not None for p in params])
    if bsel.any():
        sig = np.array([p.blur_sigma if p.blur_sigma is not None else 1.0 for p in params])
        kern = np.exp(-1.0 / (2 * sig * sig))
        kern = np.stack([kern, np.ones_like(kern), kern], axis=1)
        kern = (kern / kern.sum(axis=1, keepdims=True)).astype(dt)
        k0, k1, k2 = (_col(kern[:, j], dt) for j in range(3))
        p = np.pad(out, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        r = k0 * p[:, :, :-2, :] + k1 * p[:, :, 1:-1, :] + k2 * p[:, :, 2:, :]
        blurred = k0 * r[:, :, :, :-2] + k1 * r[:, :, :, 1:-1] + k2 * r[:, :, :, 2:]
        out = masked(bsel, np.clip(blurred, 0.0, 1.0), out)
    ssel = np.array([p.solarize for p in params])
    if ssel.any():
        thr = dt.type(cfg.solarize_threshold)
        out = masked(ssel, np.where(out >= thr, 1.0 - out, out), out)
    return np.clip(out, 0.0, 1.0).astype(dt, copy=False)


def augment_batch(
    images: np.ndarray,
    ids,
    seed: int,
    keys: tuple,
    strong: bool,
    cfg: AugmentConfig = DEFAULT,
) -> np.ndarray:
    """Augment each image with its own generator ``image_rng(seed, *keys, id, view)``."""
    view = 1 if strong else 0
    params = [draw_params(image_rng(seed, *keys, int(idx), view), strong, cfg) for idx in ids]
    return apply_batch(images, params, cfg)
