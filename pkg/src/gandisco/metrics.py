"""Detection and image-quality metrics: IoU, AP, CorLoc, SSIM, RMSE."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Box
from .tensor import DimensionError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_tuple() for x in a], dtype=float)
    B = np.array([x.as_tuple() for x in b], dtype=float)
    ax2, ay2 = A[:, 0] + A[:, 2], A[:, 1] + A[:, 3]
    bx2, by2 = B[:, 0] + B[:, 2], B[:, 1] + B[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
    inter = iw * ih
    union = (A[:, 2] * A[:, 3])[:, None] + (B[:, 2] * B[:, 3])[None] - inter
    return inter / union


@dataclass
class APDetail:
    ap: float
    n_gt: int
    tp: int
    fp: int
    no_ground_truth: bool = False
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def _per_image(x) -> list[list[Box]]:
    if len(x) == 0:
        return []
    return [list(i) for i in x] if not isinstance(x[0], Box) else [list(x)]


def average_precision_detail(detections, gts, iou_threshold: float = 0.5) -> APDetail:
    """All-point interpolated AP with greedy score-ordered matching.

    ``detections`` and ``gts`` are per-image lists of boxes (a flat list is
    treated as one image).  A detection is a hit when IoU exceeds the
    threshold with a still unmatched ground truth.
    """
    dets = _per_image(detections)
    gt = _per_image(gts)
    if dets and gt and len(dets) != len(gt):
        raise MetricError(f"{len(dets)} detection lists but {len(gt)} ground-truth lists")
    if not gt:
        gt = [[] for _ in dets]
    if not dets:
        dets = [[] for _ in gt]
    n_gt = sum(len(g) for g in gt)
    flat = [(d.score if d.score is not None else 0.0, i, j) for i, ds in enumerate(dets) for j, d in enumerate(ds)]
    if not flat:
        return APDetail(0.0, n_gt, 0, 0)
    if n_gt == 0:
        return APDetail(0.0, 0, 0, len(flat), no_ground_truth=True)
    # stable descending sort keeps input order among equal scores
    flat.sort(key=lambda t: -t[0])
    used = [np.zeros(len(g), dtype=bool) for g in gt]
    hits = np.zeros(len(flat), dtype=bool)
    for r, (_, i, j) in enumerate(flat):
        if not gt[i]:
            continue
        ious = iou_matrix([dets[i][j]], gt[i])[0]
        best = int(np.argmax(ious))
        if ious[best] > iou_threshold and not used[i][best]:
            used[i][best] = True
            hits[r] = True
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return APDetail(ap, n_gt, int(tp[-1]), int(fp[-1]), False, precision, recall)


def average_precision(detections, gts, iou_threshold: float = 0.5) -> float:
    return average_precision_detail(detections, gts, iou_threshold).ap


def corloc(best_detections: Sequence[Box | None], gts: Sequence[Sequence[Box]], iou_threshold: float = 0.5) -> float:
    """Fraction of images whose top-scored box hits some ground truth."""
    if len(best_detections) == 0:
        raise MetricError("corloc needs at least one image")
    if len(best_detections) != len(gts):
        raise MetricError("one best detection (or None) per image is required")
    hits = 0
    for det, g in zip(best_detections, gts):
        if det is not None and any(iou(det, b) > iou_threshold for b in g):
            hits += 1
    return hits / len(best_detections)


# -- image quality -----------------------------------------------------------------

def _as_chw(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[None] if a.ndim == 2 else a


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"rmse needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(a: np.ndarray, b: np.ndarray, win: int = 7) -> float:
    """Mean SSIM over all valid ``win`` x ``win`` uniform windows (unit dynamic range).

    Window statistics use population (1/N) moments; channels are averaged.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    if min(a.shape[-2:]) < win:
        raise DimensionError(f"images smaller than the {win}x{win} SSIM window")
    wa = sliding_window_view(a, (win, win), axis=(1, 2))
    wb = sliding_window_view(b, (win, win), axis=(1, 2))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# -- aggregate ---------------------------------------------------------------------

@dataclass
class EvalResult:
    per_category_ap: dict[int, float]
    corloc: float | None = None
    mean_ssim: float | None = None
    mean_rmse: float | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    flagged: tuple[int, ...] = ()

    @property
    def map(self) -> float:
        vals = list(self.per_category_ap.values())
        return float(np.mean(vals)) if vals else 0.0

    def as_dict(self) -> dict[str, float | int | None]:
        out: dict = {f"ap.{c}": v for c, v in sorted(self.per_category_ap.items())}
        out.update({"mAP": self.map, "corloc": self.corloc, "mean_ssim": self.mean_ssim,
                    "mean_rmse": self.mean_rmse, "tp": self.tp, "fp": self.fp, "fn": self.fn})
        return out

    def to_table(self, title: str = "evaluation") -> str:
        lines = [f"# {title}", f"{'metric':<12} {'value':>10}"]
        for k, v in self.as_dict().items():
            lines.append(f"{k:<12} {_fmt(v):>10}")
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())


def _fmt(v) -> str:
    if v is None:
        return "na"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate_detections(dets_per_image: Sequence[Sequence[Box]], gts_per_image: Sequence[Sequence[Box]],
                        categories: Sequence[int], iou_threshold: float = 0.5) -> EvalResult:
    """Per-category AP and CorLoc; boxes carry their ``category``.

    CorLoc is computed per category over the images that contain it, then
    averaged over categories.
    """
    per_cat, flagged, corlocs = {}, [], []
    tp = fp = n_gt_total = 0
    for c in categories:
        d = [[b for b in ds if b.category == c] for ds in dets_per_image]
        g = [[b for b in gs if b.category == c] for gs in gts_per_image]
        det = average_precision_detail(d, g, iou_threshold)
        if det.n_gt == 0 and det.fp == 0:
            continue
        per_cat[c] = det.ap
        if det.no_ground_truth:
            flagged.append(c)
        tp += det.tp
        fp += det.fp
        n_gt_total += det.n_gt
        pos = [i for i, gs in enumerate(g) if gs]
        if pos:
            best = [max(d[i], key=lambda b: b.score or 0.0) if d[i] else None for i in pos]
            corlocs.append(corloc(best, [g[i] for i in pos], iou_threshold))
    return EvalResult(per_cat, float(np.mean(corlocs)) if corlocs else None, tp=tp, fp=fp,
                      fn=n_gt_total - tp, flagged=tuple(flagged))


def write_eval(result: EvalResult, directory: Path, stem: str = "eval") -> tuple[Path, Path]:
    from .fileio import atomic_write_text
    directory = Path(directory)
    t = atomic_write_text(directory / f"{stem}.txt", result.to_table(stem))
    k = atomic_write_text(directory / f"{stem}.kv", result.to_keyvalue())
    return t, k
