"""Synthetic remote-sensing-like scenes, splits, weak augmentation, batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .raster import read_pgm, read_ppm, write_pgm, write_ppm

CLASS_NAMES = ("background", "field", "water", "building", "road")
BACKGROUND, FIELD, WATER, BUILDING, ROAD = range(5)

PALETTE = np.array([
    [0.50, 0.45, 0.38],  # background: bare soil / impervious
    [0.33, 0.50, 0.24],  # field
    [0.16, 0.26, 0.40],  # water
    [0.66, 0.38, 0.32],  # building roofs
    [0.28, 0.28, 0.31],  # road (asphalt)
])
# per-class multiplier on the texture noise
TEXTURE = np.array([1.0, 1.2, 0.4, 0.7, 0.6])

LABELED_PER_BATCH = 8
UNLABELED_PER_BATCH = 8


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    num_classes: int = 5
    noise: float = 0.05
    # strength of the per-image acquisition change (gain, colour cast, haze)
    illumination: float = 0.35
    fields: tuple = (1, 3)
    water: tuple = (0, 2)
    buildings: tuple = (2, 6)
    roads: tuple = (1, 2)

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError("the synthetic palette defines exactly 5 classes")
        if self.size < 8:
            raise ValueError("scene size must be at least 8")


# --- scene generation -----------------------------------------------------

def _paint_blob(mask, rng, cls):
    s = mask.shape[0]
    cy, cx = rng.uniform(0, s, size=2)
    ry, rx = rng.uniform(0.12 * s, 0.35 * s, size=2)
    theta = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    # wobbly boundary so blobs are not perfect ellipses
    angle = np.arctan2(v, u)
    k = rng.integers(2, 5)
    phase = rng.uniform(0, 2 * math.pi)
    radius = 1.0 + 0.15 * np.sin(k * angle + phase)
    mask[(u / rx) ** 2 + (v / ry) ** 2 <= radius**2] = cls


def _paint_rect(mask, rng, cls):
    s = mask.shape[0]
    h, w = rng.integers(max(2, s // 12), max(3, s // 4) + 1, size=2)
    top = rng.integers(0, s - h + 1)
    left = rng.integers(0, s - w + 1)
    mask[top : top + h, left : left + w] = cls


def _paint_road(mask, rng, cls):
    s = mask.shape[0]
    # quadratic bezier between two points on opposite borders
    if rng.random() < 0.5:
        p0 = np.array([0.0, rng.uniform(0, s)])
        p2 = np.array([float(s), rng.uniform(0, s)])
    else:
        p0 = np.array([rng.uniform(0, s), 0.0])
        p2 = np.array([rng.uniform(0, s), float(s)])
    p1 = rng.uniform(0, s, size=2)
    half = rng.uniform(1.5, max(2.0, s / 18))
    t = np.linspace(0, 1, 4 * s)[:, None]
    curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    d2 = np.full(pts.shape[0], np.inf)
    for chunk in np.array_split(curve, 8):
        diff = pts[:, None, :] - chunk[None, :, :]
        d2 = np.minimum(d2, (diff**2).sum(axis=-1).min(axis=1))
    mask[(d2 <= half**2).reshape(s, s)] = cls


def _illuminate(image, rng, strength):
    if strength <= 0:
        return image
    gain = 1.0 + strength * rng.uniform(-1, 1)
    cast = 1.0 + 0.5 * strength * rng.uniform(-1, 1, size=3)
    haze = 0.3 * strength * rng.uniform(0, 1)
    contrast = 1.0 + 0.8 * strength * rng.uniform(-1, 1)
    mean = image.mean(axis=(0, 1), keepdims=True)
    out = contrast * image + (1 - contrast) * mean
    out = out * gain * cast
    return out * (1 - haze) + haze


def generate_scene(spec, rng):
    """Return ``(image, mask)`` for one synthetic scene.

    Classes are painted in a fixed order (background, fields, water, roads,
    buildings) so the mask always shows the topmost class. Each class gets
    its base colour plus Gaussian texture noise; the whole image then gets
    a random illumination change and is clamped to [0, 1].
    """
    rng = np.random.default_rng(rng)
    s = spec.size
    mask = np.full((s, s), BACKGROUND, dtype=np.uint8)
    for lo_hi, cls, painter in (
        (spec.fields, FIELD, _paint_blob),
        (spec.water, WATER, _paint_blob),
        (spec.roads, ROAD, _paint_road),
        (spec.buildings, BUILDING, _paint_rect),
    ):
        for _ in range(int(rng.integers(lo_hi[0], lo_hi[1] + 1))):
            painter(mask, rng, cls)
    image = PALETTE[mask].copy()
    if spec.noise > 0:
        # smooth-ish texture: white noise plus a blurred component
        white = rng.normal(0, 1, size=(s, s, 3))
        coarse = rng.normal(0, 1, size=(s // 4 + 1, s // 4 + 1, 3))
        coarse = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)[:s, :s]
        texture = 0.7 * white + 0.7 * coarse
        image = image + spec.noise * TEXTURE[mask][..., None] * texture
    image = _illuminate(image, rng, spec.illumination)
    return np.clip(image, 0.0, 1.0), mask


# --- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    n_labeled: int
    n_unlabeled: int
    oversample_factor: int

    @property
    def labeled_stream_length(self):
        return self.n_labeled * self.oversample_factor


def make_split(total, labeled_fraction, rng):
    """Disjoint labeled/unlabeled index lists plus the oversampling plan."""
    if not 0.0 < labeled_fraction < 1.0:
        raise ValueError("labeled_fraction must be in (0, 1)")
    n_l = int(round(total * labeled_fraction))
    if n_l < 1:
        raise ValueError(f"{total} images at fraction {labeled_fraction} leave no labeled image")
    n_u = total - n_l
    if n_u < 1:
        raise ValueError("no unlabeled images left")
    rng = np.random.default_rng(rng)
    order = rng.permutation(total)
    labeled = np.sort(order[:n_l])
    unlabeled = np.sort(order[n_l:])
    plan = SplitPlan(n_l, n_u, math.ceil(n_u / n_l))
    return plan, labeled, unlabeled


# --- weak augmentation -------------------------------------------------------

def crop_flip(image, mask, top, left, size, flip):
    img = image[top : top + size, left : left + size]
    m = None if mask is None else mask[top : top + size, left : left + size]
    if flip:
        img = img[:, ::-1]
        m = None if m is None else m[:, ::-1]
    img = np.ascontiguousarray(img)
    return img, (None if m is None else np.ascontiguousarray(m))


def weak_augment(image, mask=None, rng=None, size=None):
    """Random square crop plus horizontal flip with probability 0.5.

    The mask, when given, receives exactly the same crop and flip.
    """
    rng = np.random.default_rng(rng)
    h, w = image.shape[:2]
    size = min(h, w) if size is None else size
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    flip = bool(rng.random() < 0.5)
    return crop_flip(image, mask, top, left, size, flip)


# --- batching ----------------------------------------------------------------

@dataclass
class TrainBatch:
    """One step of inputs.

    ``x_l``/``y_l`` are the weakly augmented labeled pairs and ``x_u`` the
    weakly augmented unlabeled images. Auxiliary partners are other batch
    members: labeled aid ``i`` is labeled item ``aid_index[i]`` and unlabeled
    aux ``i`` is unlabeled item ``aux_index[i]``.
    """

    x_l: np.ndarray
    y_l: np.ndarray
    x_u: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_ids: np.ndarray
    aid_index: np.ndarray
    aux_index: np.ndarray

    @property
    def x_aid(self):
        return self.x_l[self.aid_index]

    @property
    def y_aid(self):
        return self.y_l[self.aid_index]

    @property
    def x_aux(self):
        return self.x_u[self.aux_index]

    def __len__(self):
        return len(self.x_l) + len(self.x_u)


def _cycled_permutations(n, length, rng, first_copies=1):
    parts = [rng.permutation(n) for _ in range(first_copies)]
    while sum(len(p) for p in parts) < length:
        parts.append(rng.permutation(n))
    return np.concatenate(parts)[:length]


@dataclass
class TrainStreams:
    """Labeled and unlabeled index streams, deterministic per (seed, epoch)."""

    labeled_images: np.ndarray
    labeled_masks: np.ndarray
    unlabeled_images: np.ndarray
    plan: SplitPlan
    seed: int
    crop_size: int
    labeled_per_batch: int = LABELED_PER_BATCH
    unlabeled_per_batch: int = UNLABELED_PER_BATCH

    @property
    def steps_per_epoch(self):
        return math.ceil(self.plan.n_unlabeled / self.unlabeled_per_batch)

    def epoch_indices(self, epoch):
        """Labeled (oversampled) and unlabeled index orders for one epoch."""
        rng = np.random.default_rng([self.seed, 101, epoch])
        steps = self.steps_per_epoch
        unl = _cycled_permutations(self.plan.n_unlabeled, steps * self.unlabeled_per_batch, rng)
        lab = _cycled_permutations(
            self.plan.n_labeled, steps * self.labeled_per_batch, rng,
            first_copies=self.plan.oversample_factor,
        )
        return lab, unl


def next_batch(streams, epoch, step, order=None):
    """Assemble the weakly augmented batch for ``(epoch, step)``."""
    if order is None:
        order = streams.epoch_indices(epoch)
    lab_order, unl_order = order
    nl, nu = streams.labeled_per_batch, streams.unlabeled_per_batch
    lab = lab_order[step * nl : (step + 1) * nl]
    unl = unl_order[step * nu : (step + 1) * nu]
    rng = np.random.default_rng([streams.seed, 202, epoch, step])
    seeds = rng.integers(0, 2**63, size=nl + nu)
    x_l, y_l, x_u = [], [], []
    for i, idx in enumerate(lab):
        img, m = weak_augment(streams.labeled_images[idx], streams.labeled_masks[idx],
                              seeds[i], streams.crop_size)
        x_l.append(img)
        y_l.append(m)
    for i, idx in enumerate(unl):
        img, _ = weak_augment(streams.unlabeled_images[idx], None, seeds[nl + i], streams.crop_size)
        x_u.append(img)
    return TrainBatch(
        x_l=np.stack(x_l), y_l=np.stack(y_l), x_u=np.stack(x_u),
        labeled_ids=np.asarray(lab), unlabeled_ids=np.asarray(unl),
        aid_index=np.roll(np.arange(nl), -1), aux_index=np.roll(np.arange(nu), -1),
    )


# --- on-disk datasets ----------------------------------------------------------

@dataclass
class Dataset:
    ids: list
    roles: dict
    images: dict
    masks: dict

    def split_ids(self, role):
        return [i for i in self.ids if self.roles[i] == role]

    def stack(self, ids):
        return (np.stack([self.images[i] for i in ids]),
                np.stack([self.masks[i] for i in ids]))


def generate_dataset(out_dir, seed, count, test_count=20, spec=SceneSpec()):
    """Write ``count`` train and ``test_count`` test scenes plus ``split.txt``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63, size=count + test_count)
    lines = []
    for n, s in enumerate(seeds):
        image_id = f"{n:05d}"
        image, mask = generate_scene(spec, s)
        write_ppm(image, os.path.join(out_dir, "images", f"{image_id}.ppm"))
        write_pgm(mask, os.path.join(out_dir, "masks", f"{image_id}.pgm"))
        lines.append(f"{image_id} {'train' if n < count else 'test'}\n")
    with open(os.path.join(out_dir, "split.txt"), "w") as f:
        f.writelines(lines)


def load_dataset(data_dir, num_classes=None):
    ids, roles, images, masks = [], {}, {}, {}
    with open(os.path.join(data_dir, "split.txt")) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"split.txt:{lineno}: expected '<id> <role>'")
            image_id, role = parts
            ids.append(image_id)
            roles[image_id] = role
            images[image_id] = read_ppm(os.path.join(data_dir, "images", f"{image_id}.ppm"))
            masks[image_id] = read_pgm(os.path.join(data_dir, "masks", f"{image_id}.pgm"), num_classes)
    return Dataset(ids, roles, images, masks)
