"""Seeded synthetic multi-object scenes and an isolated-object category bank.

Scenes stand in for cluttered photographs: a few rendered shapes on a noisy
background.  The bank stands in for a large labelled collection of isolated
object pictures and is the only source of positive/negative examples in the
weakly supervised setting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, crop_resize, mask_bbox

CATEGORY_NAMES = ("disk", "square", "triangle", "cross", "ring")


class GenerationError(RuntimeError):
    """Placement failed after the bounded number of retries."""


class SupervisionError(PermissionError):
    """A weakly supervised scene was asked for its instance boxes."""


class PrivilegedAccessCounter:
    """Counts reads of hidden boxes; the weak pipeline must leave it at zero."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


privileged_access = PrivilegedAccessCounter()


def _shape_mask(category: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: normalised coordinates in [-1, 1] across the placement box
    if category == 0:
        return u * u + v * v <= 1.0
    if category == 1:
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if category == 2:
        return (v <= 0.9) & (np.abs(u) <= (v + 1.0) / 1.9)
    if category == 3:
        return ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)) & (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if category == 4:
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.36)
    raise KeyError(f"unknown category {category}")


def render_shape(category: int, height: int, width: int, cx: float, cy: float, side: float,
                 angle: float = 0.0) -> np.ndarray:
    """Boolean mask of one shape centred at (cx, cy) with a square extent ``side``."""
    ys, xs = np.mgrid[0:height, 0:width]
    dx = (xs + 0.5 - cx) / (side / 2.0)
    dy = (ys + 0.5 - cy) / (side / 2.0)
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return _shape_mask(category, u, v)


@dataclass(frozen=True)
class SceneSpec:
    categories: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_objects: int = 3
    min_objects: int = 1
    image_size: int = 32
    clutter: float = 0.5
    channels: int = 1
    min_side: int = 9
    max_side: int = 18
    max_overlap_iou: float = 0.2
    mode: str = "full"

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        unknown = [c for c in self.categories if c not in range(len(CATEGORY_NAMES))]
        if unknown or not self.categories:
            raise ValueError(f"categories must be a non-empty subset of the bank, got {self.categories}")
        if self.mode not in ("full", "weak"):
            raise ValueError(f"mode must be 'full' or 'weak', got {self.mode!r}")


@dataclass
class Scene:
    image: np.ndarray  # [C, H, W] in [0, 1]
    _instances: list[tuple[int, Box]]
    mode: str = "full"
    seed: int | None = None
    masks: list[np.ndarray] = field(default_factory=list, repr=False)
    label_set: tuple[int, ...] | None = None  # labels of a weak scene loaded without its boxes

    @property
    def labels(self) -> tuple[int, ...]:
        """Sorted set of categories present: the only annotation of a weak scene."""
        if self.label_set is not None:
            return tuple(sorted(set(self.label_set)))
        return tuple(sorted({c for c, _ in self._instances}))

    @property
    def instances(self) -> list[tuple[int, Box]]:
        if self.mode == "weak":
            raise SupervisionError("instance boxes are hidden in weak supervision mode")
        return list(self._instances)

    @property
    def boxes(self) -> list[Box]:
        return [b for _, b in self.instances]

    def privileged_instances(self) -> list[tuple[int, Box]]:
        """Evaluator-only access to the hidden boxes; counted when the scene is weak."""
        if self.mode == "weak":
            privileged_access.count += 1
        return list(self._instances)

    def as_weak(self) -> "Scene":
        return Scene(self.image, self._instances, "weak", self.seed, self.masks, self.label_set)

    def as_full(self) -> "Scene":
        if self.label_set is not None and not self._instances:
            raise SupervisionError("scene was loaded without boxes; no full annotation exists")
        return Scene(self.image, self._instances, "full", self.seed, self.masks)

    @property
    def size(self) -> int:
        return self.image.shape[-1]


def _iou_xywh(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    base = rng.uniform(0.0, 0.15)
    img = np.full((size, size), base)
    if clutter > 0:
        gx, gy = rng.uniform(-1, 1, size=2) * 0.15 * clutter
        ys, xs = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
        img = img + gx * xs + gy * ys
        img = img + rng.normal(0.0, 0.04 * clutter, size=(size, size))
    return img


def generate_scene(seed: int, spec: SceneSpec = SceneSpec(), max_retries: int = 200) -> Scene:
    """Render one scene; fully determined by ``(seed, spec)``."""
    rng = np.random.default_rng(seed)
    size = spec.image_size
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    pool = list(spec.categories)
    cats: list[int] = []
    while len(cats) < n:
        cats.extend(int(c) for c in rng.permutation(pool))
    cats = cats[:n]

    img = _background(rng, size, spec.clutter)
    placed: list[tuple[float, float, float, float]] = []
    instances: list[tuple[int, Box]] = []
    masks: list[np.ndarray] = []
    max_side = min(spec.max_side, size)
    for cat in cats:
        for _ in range(max_retries):
            side = float(rng.uniform(spec.min_side, max_side))
            cx = float(rng.uniform(side / 2, size - side / 2))
            cy = float(rng.uniform(side / 2, size - side / 2))
            cand = (cx - side / 2, cy - side / 2, side, side)
            if all(_iou_xywh(cand, p) <= spec.max_overlap_iou for p in placed):
                break
        else:
            raise GenerationError(f"could not place {n} objects on a {size}x{size} canvas after {max_retries} tries")
        angle = float(rng.uniform(-np.pi / 12, np.pi / 12))
        intensity = float(rng.uniform(0.6, 1.0))
        mask = render_shape(cat, size, size, cx, cy, side, angle)
        bb = mask_bbox(mask)
        if bb is None:
            raise GenerationError("rendered an empty shape")
        placed.append(cand)
        img = np.where(mask, intensity, img)
        instances.append((cat, Box(*bb, category=cat)))
        masks.append(mask)

    img = np.clip(img, 0.0, 1.0)
    image = np.repeat(img[None], spec.channels, axis=0)
    return Scene(image, instances, spec.mode, seed, masks)


def generate_dataset(seed: int, count: int, spec: SceneSpec = SceneSpec()) -> list[Scene]:
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(count)]
    return [generate_scene(s, spec) for s in seeds]


class CategoryBank:
    """Isolated, frame-filling object patches on a clean background."""

    def __init__(self, n_categories: int = len(CATEGORY_NAMES), patch_size: int = 16, channels: int = 1,
                 seed_offset: int = 0):
        if n_categories < 5:
            raise ValueError("the bank needs at least 5 categories")
        if n_categories > len(CATEGORY_NAMES):
            raise ValueError(f"only {len(CATEGORY_NAMES)} shape categories are defined")
        self.n_categories = n_categories
        self.patch_size = patch_size
        self.channels = channels
        self.seed_offset = seed_offset

    @property
    def categories(self) -> tuple[int, ...]:
        return tuple(range(self.n_categories))

    def sample(self, category: int, seed: int) -> np.ndarray:
        """One [C, P, P] patch of ``category``; deterministic in (category, seed)."""
        if category not in range(self.n_categories):
            raise KeyError(f"category {category} is not in the bank")
        rng = np.random.default_rng([self.seed_offset, category, seed])
        canvas = 2 * self.patch_size
        side = float(rng.uniform(0.7, 1.0)) * canvas * 0.8
        angle = float(rng.uniform(-np.pi / 12, np.pi / 12))
        intensity = float(rng.uniform(0.6, 1.0))
        mask = render_shape(category, canvas, canvas, canvas / 2, canvas / 2, side, angle)
        x, y, w, h = mask_bbox(mask)
        img = (mask * intensity)[None].astype(float)
        patch = crop_resize(img, Box(x, y, w, h), self.patch_size)
        return np.repeat(np.clip(patch, 0.0, 1.0), self.channels, axis=0)

    def batch(self, categories: Sequence[int], seeds: Sequence[int]) -> np.ndarray:
        return np.stack([self.sample(c, s) for c, s in zip(categories, seeds)])


def bank_sample(bank: CategoryBank, category: int, seed: int) -> np.ndarray:
    return bank.sample(category, seed)
