"""Photometric strong augmentations and the uniform-strength sampler.

All operators take and return ``(H, W, 3)`` float images in ``[0, 1]`` and
clamp their output. Factor-style ops are written as linear blends
``factor * img + (1 - factor) * reference`` so that the identity factor
reproduces the input bit-exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


class AugOp(enum.Enum):
    CONTRAST = "contrast"
    EQUALIZE = "equalize"
    BLUR = "blur"
    BRIGHTNESS = "brightness"
    SATURATION = "saturation"
    SHARPNESS = "sharpness"
    POSTERIZE = "posterize"
    SOLARIZE = "solarize"
    HUE = "hue"
    GRAYSCALE = "grayscale"


ALL_OPS = tuple(AugOp)

# (low, high) accepted by apply_op; wider than the sampling ranges so that
# identity settings (posterize 8 bits, hue 0, grayscale 0, ...) are valid.
VALID_RANGES = {
    AugOp.CONTRAST: (0.0, 2.0),
    AugOp.EQUALIZE: None,
    AugOp.BLUR: (0.1, 3.0),
    AugOp.BRIGHTNESS: (0.0, 2.0),
    AugOp.SATURATION: (0.0, 2.0),
    AugOp.SHARPNESS: (0.0, 2.0),
    AugOp.POSTERIZE: (1, 8),
    AugOp.SOLARIZE: (0.0, 1.0),
    AugOp.HUE: (-180.0, 180.0),
    AugOp.GRAYSCALE: (0.0, 1.0),
}

# Ranges the uniform-strength sampler draws from.
SAMPLE_RANGES = {
    AugOp.CONTRAST: (0.5, 1.5),
    AugOp.EQUALIZE: None,
    AugOp.BLUR: (0.3, 1.5),
    AugOp.BRIGHTNESS: (0.5, 1.5),
    AugOp.SATURATION: (0.5, 1.5),
    AugOp.SHARPNESS: (0.0, 1.0),
    AugOp.POSTERIZE: (4, 7),
    AugOp.SOLARIZE: (0.5, 1.0),
    AugOp.HUE: (-18.0, 18.0),
    AugOp.GRAYSCALE: (0.5, 1.0),
}


@dataclass(frozen=True)
class AugRecipe:
    """Ordered ``(op, param)`` steps; replaying it reproduces the output."""

    steps: tuple
    seed: object = None

    def __len__(self):
        return len(self.steps)

    def describe(self):
        parts = []
        for op, param in self.steps:
            parts.append(op.value if param is None else f"{op.value}={param:.4g}")
        return " ".join(parts)


def luma(image):
    return image @ LUMA


def _blend(image, reference, factor):
    return factor * image + (1.0 - factor) * reference


def _gaussian_kernel3(sigma):
    side = math.exp(-0.5 / (sigma * sigma))
    k = np.array([side, 1.0, side])
    return k / k.sum()


def gaussian_blur3(image, sigma):
    """Separable 3x3 Gaussian blur with clamp-to-edge borders."""
    k = _gaussian_kernel3(sigma)
    p = np.pad(image, ((1, 1), (0, 0), (0, 0)), mode="edge")
    out = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    p = np.pad(out, ((0, 0), (1, 1), (0, 0)), mode="edge")
    return k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]


def _quantize(image):
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.int64)


def equalize_channel(values):
    """Histogram-equalize one channel of byte values.

    Cumulative-histogram mapping ``round((cdf(v) - cdf_min) * 255 / (N - cdf_min))``
    in exact integer arithmetic (halves round up), where ``cdf_min`` is the
    count of the darkest occupied level. A single-level channel is returned
    unchanged.
    """
    hist = np.bincount(values.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = hist[np.flatnonzero(hist)[0]]
    denom = int(values.size - cdf_min)
    if denom == 0:
        return values
    lut = (2 * 255 * (cdf - cdf_min) + denom) // (2 * denom)
    return np.clip(lut, 0, 255)[values]


def hue_matrix(degrees):
    """Rotation about the grey axis of RGB space.

    Exactly the identity matrix at 0 degrees.
    """
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    k = np.full(3, 1.0 / math.sqrt(3.0))
    cross = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(k, k)


def _check_param(op, param):
    rng = VALID_RANGES[op]
    if rng is None:
        if param is not None:
            raise ValueError(f"{op.value} takes no parameter")
        return
    if param is None:
        raise ValueError(f"{op.value} requires a parameter")
    lo, hi = rng
    if not (lo <= param <= hi) or not math.isfinite(param):
        raise ValueError(f"{op.value} parameter {param} outside [{lo}, {hi}]")
    if op is AugOp.POSTERIZE and int(param) != param:
        raise ValueError("posterize bits must be an integer")


def apply_op(image, op, param=None):
    """Apply one photometric operator; deterministic in ``(image, op, param)``."""
    op = AugOp(op)
    _check_param(op, param)
    img = np.asarray(image, dtype=np.float64)
    if op is AugOp.CONTRAST:
        out = _blend(img, img.mean(axis=(0, 1), keepdims=True), param)
    elif op is AugOp.BRIGHTNESS:
        out = param * img
    elif op is AugOp.SATURATION:
        out = _blend(img, luma(img)[..., None], param)
    elif op is AugOp.SHARPNESS:
        out = img + param * (img - gaussian_blur3(img, 1.0))
    elif op is AugOp.BLUR:
        out = gaussian_blur3(img, param)
    elif op is AugOp.POSTERIZE:
        keep = 0xFF & ~((1 << (8 - int(param))) - 1)
        out = (_quantize(img) & keep) / 255.0
    elif op is AugOp.SOLARIZE:
        out = np.where(img >= param, 1.0 - img, img)
    elif op is AugOp.HUE:
        out = img @ hue_matrix(param).T
    elif op is AugOp.GRAYSCALE:
        out = _blend(luma(img)[..., None], img, param)
    elif op is AugOp.EQUALIZE:
        q = _quantize(img)
        out = np.stack([equalize_channel(q[..., ch]) for ch in range(3)], axis=-1) / 255.0
    return np.clip(out, 0.0, 1.0)


def _draw_param(op, rng):
    rng_range = SAMPLE_RANGES[op]
    if rng_range is None:
        return None
    lo, hi = rng_range
    if op is AugOp.POSTERIZE:
        return int(rng.integers(lo, hi + 1))
    return float(rng.uniform(lo, hi))


def sample_recipe(k, rng_seed):
    """Draw ``k`` distinct ops in random order with uniformly drawn magnitudes.

    ``rng_seed`` may be anything accepted by ``np.random.default_rng``
    (including a Generator, which is then advanced).
    """
    if not 1 <= k <= len(ALL_OPS):
        raise ValueError(f"k must be in [1, {len(ALL_OPS)}], got {k}")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(ALL_OPS))[:k]
    steps = tuple((ALL_OPS[i], _draw_param(ALL_OPS[i], rng)) for i in order)
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    return AugRecipe(steps, seed)


def usaug(image, recipe):
    out = np.asarray(image, dtype=np.float64)
    for op, param in recipe.steps:
        out = apply_op(out, op, param)
    return np.clip(out, 0.0, 1.0)


def fixed_strong_augment(image, rng):
    """Fixed-order, fixed-type strong augmentation used by the ablation baseline.

    Colour jitter (p=0.8), random grayscale (p=0.2) and Gaussian blur
    (p=0.5), always in that order, as in the usual consistency-learning
    pipelines.
    """
    rng = np.random.default_rng(rng)
    out = np.asarray(image, dtype=np.float64)
    jitter = rng.random() < 0.8
    b, c, s = rng.uniform(0.5, 1.5, size=3)
    h = rng.uniform(-18.0, 18.0)
    gray = rng.random() < 0.2
    blur = rng.random() < 0.5
    sigma = rng.uniform(0.3, 1.5)
    if jitter:
        out = apply_op(out, AugOp.BRIGHTNESS, b)
        out = apply_op(out, AugOp.CONTRAST, c)
        out = apply_op(out, AugOp.SATURATION, s)
        out = apply_op(out, AugOp.HUE, h)
    if gray:
        out = apply_op(out, AugOp.GRAYSCALE, 1.0)
    if blur:
        out = apply_op(out, AugOp.BLUR, sigma)
    return out
