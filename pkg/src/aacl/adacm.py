"""Adaptive CutMix.

One decision (random draw ``r``, trigger probability ``alpha`` and a box
mask) is made per unlabeled image and applied to both the strong image and
the weak-branch target, so the two stay geometrically aligned.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .raster import IGNORE


class MixMode(enum.Enum):
    UNLABELED = "unlabeled"
    LABELED = "labeled"


MIN_AREA_FRACTION = 0.25
MAX_AREA_FRACTION = 0.5


@dataclass(frozen=True)
class CutMask:
    """Axis-aligned box; the mask is 0 inside (pasted) and 1 outside (kept)."""

    height: int
    width: int
    top: int
    left: int
    box_h: int
    box_w: int

    @property
    def array(self):
        m = np.ones((self.height, self.width), dtype=np.uint8)
        m[self.top : self.top + self.box_h, self.left : self.left + self.box_w] = 0
        return m

    @property
    def area_fraction(self):
        return self.box_h * self.box_w / (self.height * self.width)

    @classmethod
    def full(cls, height, width):
        """Mask that keeps everything (no paste)."""
        return cls(height, width, 0, 0, 0, 0)


@dataclass(frozen=True)
class AdaCmDecision:
    r: float
    alpha: float
    mask: CutMask
    mode: MixMode


@dataclass(frozen=True)
class SoftTarget:
    """Per-pixel target distribution for the strong branch.

    ``override`` marks pasted ground-truth pixels that bypass the entropy
    gate; ``ignore`` marks pasted pixels whose label was the ignore value.
    """

    probs: np.ndarray
    override: np.ndarray
    ignore: np.ndarray


def compute_alpha(weak_probs, normalization="classes"):
    """Trigger probability from a weak-branch probability map.

    Mean over pixels of ``max_c p * (1 - H / C)``, with ``H`` the natural-log
    entropy. ``normalization="log_classes"`` divides by ``ln C`` instead
    (experimental, off by default).
    """
    p = np.asarray(weak_probs, dtype=np.float64)
    if p.size == 0 or p.ndim < 2:
        raise ValueError("empty probability map")
    c = p.shape[-1]
    p2 = p.reshape(-1, c)
    if p2.shape[0] == 0:
        raise ValueError("empty probability map")
    plogp = np.where(p2 > 0, p2 * np.log(np.maximum(p2, 1e-300)), 0.0)
    entropy = -plogp.sum(axis=1)
    if normalization == "classes":
        denom = c
    elif normalization == "log_classes":
        denom = math.log(c)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return float(np.mean(p2.max(axis=1) * (1.0 - entropy / denom)))


def sample_mask(height, width, rng):
    """Random in-bounds box covering 25-50% of the image, uniformly placed.

    The area fraction is uniform over the band and the aspect ratio
    log-uniform over the ratios that fit; sides are rounded to integers and
    the draw repeated in the rare case rounding leaves the band. The
    position is uniform over every in-bounds offset.
    """
    if height < 4 or width < 4:
        raise ValueError(f"mask needs at least 4x4 pixels, got {height}x{width}")
    rng = np.random.default_rng(rng)
    total = height * width
    lo = math.ceil(MIN_AREA_FRACTION * total)
    hi = math.floor(MAX_AREA_FRACTION * total)
    while True:
        area = rng.uniform(MIN_AREA_FRACTION, MAX_AREA_FRACTION) * total
        log_ratio = rng.uniform(math.log(area / width**2), math.log(height**2 / area))
        bh = min(height, max(1, round(math.sqrt(area * math.exp(log_ratio)))))
        bw = min(width, max(1, round(math.sqrt(area / math.exp(log_ratio)))))
        if lo <= bh * bw <= hi:
            break
    top = int(rng.integers(0, height - bh + 1))
    left = int(rng.integers(0, width - bw + 1))
    return CutMask(height, width, top, left, bh, bw)


def decide(weak_probs, rng, alpha=None, r=None, normalization="classes"):
    """Draw ``r`` and a box; labeled mix when ``r < alpha``.

    ``alpha`` and ``r`` may be injected; otherwise alpha is computed from
    ``weak_probs`` (an ``(H, W, C)`` map, which also fixes the mask size).
    """
    rng = np.random.default_rng(rng)
    weak_probs = np.asarray(weak_probs)
    if alpha is None:
        alpha = compute_alpha(weak_probs, normalization)
    draw = float(rng.random())
    r = draw if r is None else float(r)
    mask = sample_mask(weak_probs.shape[0], weak_probs.shape[1], rng)
    mode = MixMode.LABELED if r < alpha else MixMode.UNLABELED
    return AdaCmDecision(r, float(alpha), mask, mode)


def _mask_array(mask):
    return mask.array if isinstance(mask, CutMask) else np.asarray(mask)


def mix_images(image_u, image_aux, mask):
    """Keep ``image_u`` where the mask is 1, take ``image_aux`` where it is 0."""
    image_u = np.asarray(image_u)
    image_aux = np.asarray(image_aux)
    m = _mask_array(mask)
    if image_u.shape != image_aux.shape or image_u.shape[:2] != m.shape:
        raise ValueError(
            f"shape mismatch: {image_u.shape}, {image_aux.shape}, mask {m.shape}"
        )
    return np.where(m[..., None] == 1, image_u, image_aux)


def mix_targets(weak_probs_u, aux_source, mask, mode):
    """Mixed target that mirrors :func:`mix_images` for the same mask.

    In unlabeled mode ``aux_source`` is the auxiliary image's weak
    probability map. In labeled mode it is a label mask and pasted pixels get
    the one-hot ground truth with the gate override set.
    """
    mode = MixMode(mode)
    weak = np.asarray(weak_probs_u, dtype=np.float64)
    aux = np.asarray(aux_source)
    m = _mask_array(mask)
    h, w, c = weak.shape
    if m.shape != (h, w) or aux.shape[:2] != (h, w):
        raise ValueError("target, source and mask dimensions differ")
    pasted = m == 0
    override = np.zeros((h, w), dtype=bool)
    ignore = np.zeros((h, w), dtype=bool)
    if mode is MixMode.UNLABELED:
        if aux.shape != weak.shape or not np.issubdtype(aux.dtype, np.floating):
            raise ValueError("unlabeled mix needs a probability map as aux source")
        probs = np.where(pasted[..., None], aux, weak)
    else:
        if aux.ndim != 2 or not np.issubdtype(aux.dtype, np.integer):
            raise ValueError("labeled mix needs an integer label mask as aux source")
        labels = aux.astype(np.int64)
        ign = labels == IGNORE
        if np.any((labels >= c) & ~ign):
            raise ValueError("label mask holds classes outside the probability map")
        onehot = np.zeros((h, w, c))
        safe = np.where(ign, 0, labels)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        onehot[ign] = 1.0 / c
        probs = np.where(pasted[..., None], onehot, weak)
        override = pasted & ~ign
        ignore = pasted & ign
    return SoftTarget(probs, override, ignore)


def source_map(mask, mode):
    """Per-pixel provenance tag: 0 = primary image, 1 = aux unlabeled, 2 = aux labeled."""
    m = _mask_array(mask)
    tag = 1 if MixMode(mode) is MixMode.UNLABELED else 2
    return np.where(m == 1, 0, tag).astype(np.uint8)
