"""Boxes and bilinear resampling shared by the scene, discovery and metric code."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, top-left corner plus extent, in pixels."""

    x: float
    y: float
    w: float
    h: float
    score: float | None = None
    category: int | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box corner must be non-negative, got ({self.x}, {self.y})")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def inside(self, width: int, height: int) -> bool:
        return self.x2 <= width + 1e-9 and self.y2 <= height + 1e-9

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.x2 and self.y <= py < self.y2

    def with_(self, **kw) -> "Box":
        return replace(self, **kw)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def clip_box(x: float, y: float, w: float, h: float, width: int, height: int, **kw) -> Box:
    x0, y0 = max(0.0, float(x)), max(0.0, float(y))
    x1, y1 = min(float(width), float(x + w)), min(float(height), float(y + h))
    return Box(x0, y0, max(x1 - x0, 1.0), max(y1 - y0, 1.0), **kw)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight (x, y, w, h) around the True cells of a 2-D mask."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _bilinear_sample(img: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    # img (C, H, W); yy, xx broadcastable float grids; edge-clamped
    _, h, w = img.shape
    yy = np.clip(yy, 0.0, h - 1.0)
    xx = np.clip(xx, 0.0, w - 1.0)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yy - y0
    wx = xx - x0
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a [C,H,W] or [H,W] array."""
    squeeze = img.ndim == 2
    arr = img[None] if squeeze else img
    _, h, w = arr.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    out = _bilinear_sample(arr, ys[:, None], xs[None, :])
    return out[0] if squeeze else out


def crop_resize(img: np.ndarray, boxes: Sequence[Box] | Box, size: int) -> np.ndarray:
    """Bilinearly resample each box region of ``img`` [C,H,W] to ``size``x``size``.

    Returns [N, C, size, size] for a sequence of boxes, [C, size, size] for one.
    """
    single = isinstance(boxes, Box)
    blist = [boxes] if single else list(boxes)
    if not blist:
        return np.zeros((0, img.shape[0], size, size))
    arr = np.array([b.as_tuple() for b in blist], dtype=float)
    t = (np.arange(size) + 0.5) / size
    ys = arr[:, 1, None] + t[None, :] * arr[:, 3, None] - 0.5
    xs = arr[:, 0, None] + t[None, :] * arr[:, 2, None] - 0.5
    out = _bilinear_sample(img, ys[:, :, None], xs[:, None, :])  # (C, N, size, size)
    out = out.transpose(1, 0, 2, 3)
    return out[0] if single else out


@dataclass
class HeatMap:
    """Non-negative score grid over image positions."""

    scores: np.ndarray
    source: str = "cam"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim != 2:
            raise ValueError(f"heat map must be 2-D, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("heat map scores must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    def argmax(self) -> tuple[int, int]:
        """(x, y) of the highest score; first in scan order on ties."""
        iy, ix = np.unravel_index(int(np.argmax(self.scores)), self.scores.shape)
        return int(ix), int(iy)

    def normalized(self) -> "HeatMap":
        peak = self.scores.max()
        return HeatMap(self.scores / peak, self.source) if peak > 0 else HeatMap(self.scores.copy(), self.source)

    def downsample(self, res: int) -> np.ndarray:
        """Block-average to ``res`` x ``res`` (size must be a multiple of ``res``)."""
        h, w = self.scores.shape
        if h % res or w % res:
            return resize_bilinear(self.scores, res, res)
        return self.scores.reshape(res, h // res, res, w // res).mean(axis=(1, 3))
