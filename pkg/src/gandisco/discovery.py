"""Localisation without boxes: proposals, template matching, component separation,
pseudo ground truth and synthetic augmentation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .geometry import Box, HeatMap, crop_resize, mask_bbox, resize_bilinear

log = logging.getLogger(__name__)

_EIGHT = np.ones((3, 3), dtype=int)


class DiscoveryError(ValueError):
    pass


@dataclass(frozen=True)
class ProposalConfig:
    windows: tuple[int, ...] = (10, 14, 18, 22)
    stride: int = 2


def grid_proposals(image_size: int, config: ProposalConfig = ProposalConfig()) -> list[Box]:
    """Square sliding windows at each configured size; ordered by size, then row, then column."""
    seen = set()
    boxes = []
    for w in config.windows:
        if w > image_size:
            continue
        for y in range(0, image_size - w + 1, config.stride):
            for x in range(0, image_size - w + 1, config.stride):
                key = (x, y, w)
                if key not in seen:
                    seen.add(key)
                    boxes.append(Box(x, y, w, w))
    if not boxes:
        raise DiscoveryError(f"no proposal window fits a {image_size}px image")
    return boxes


def box_mean_scores(scores: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    """Mean of ``scores`` inside each integer-aligned box, via an integral image."""
    ii = np.pad(scores, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    arr = np.array([b.as_tuple() for b in boxes], dtype=float).round().astype(int)
    x0, y0, w, h = arr.T
    x1, y1 = x0 + w, y0 + h
    sums = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
    return sums / (w * h)


def top_k_boxes(heatmap: HeatMap, proposals: Sequence[Box], k: int = 5) -> list[Box]:
    """The ``k`` proposals with the highest mean heat, best first.

    Ties go to the smaller box, then to the earlier proposal.
    """
    if not proposals:
        raise DiscoveryError("top_k_boxes needs at least one proposal")
    if not 1 <= k <= len(proposals):
        raise DiscoveryError(f"k must be in [1, {len(proposals)}], got {k}")
    means = box_mean_scores(heatmap.scores, proposals)
    areas = np.array([b.area for b in proposals])
    order = np.lexsort((np.arange(len(proposals)), areas, -means))[:k]
    return [proposals[i].with_(score=float(means[i])) for i in order]


# -- template matching -------------------------------------------------------------

@dataclass
class MatchResult:
    heatmap: HeatMap
    scale_index: np.ndarray  # per cell, index into ``sizes`` of the winning scale, -1 if none
    sizes: list[tuple[int, int]]

    def best_box(self) -> Box:
        """Window of the overall best match (first in scan order on ties)."""
        cx, cy = self.heatmap.argmax()
        si = int(self.scale_index[cy, cx])
        if si < 0:
            si = 0
        h, w = self.sizes[si]
        x, y = cx - w // 2, cy - h // 2
        return Box(max(x, 0), max(y, 0), w, h, score=float(self.heatmap.scores[cy, cx]))


def ncc_map(image: np.ndarray, template: np.ndarray, var_eps: float = 1e-10) -> np.ndarray:
    """Normalised cross-correlation of ``template`` at every valid top-left offset.

    Both arrays are [C, H, W] (or [H, W]); windows with (near) zero variance
    score 0.
    """
    img = image[None] if image.ndim == 2 else image
    tpl = template[None] if template.ndim == 2 else template
    c, th, tw = tpl.shape
    t = tpl - tpl.mean()
    tnorm = np.sqrt((t * t).sum())
    win = sliding_window_view(img, (th, tw), axis=(1, 2))  # (C, H', W', th, tw)
    n = c * th * tw
    wsum = win.sum(axis=(0, 3, 4))
    wsq = (win * win).sum(axis=(0, 3, 4))
    wvar = wsq - wsum * wsum / n
    cross = np.einsum("cijhw,chw->ij", win, t)
    denom = np.sqrt(np.maximum(wvar, 0.0)) * tnorm
    out = np.zeros_like(cross)
    ok = (wvar > var_eps * n) & (tnorm > 0)
    out[ok] = cross[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def template_match_detail(image: np.ndarray, template: np.ndarray,
                          scales: Sequence[float] = (0.75, 1.0, 1.25)) -> MatchResult:
    img = image[None] if image.ndim == 2 else image
    tpl = template[None] if template.ndim == 2 else template
    _, H, W = img.shape
    _, th, tw = tpl.shape
    heat = np.zeros((H, W))
    which = np.full((H, W), -1, dtype=int)
    sizes: list[tuple[int, int]] = []
    for s in scales:
        h, w = max(1, int(round(th * s))), max(1, int(round(tw * s)))
        if h > H or w > W:
            warnings.warn(f"template scale {s} ({h}x{w}) exceeds the {H}x{W} image; skipped", stacklevel=2)
            continue
        scaled = resize_bilinear(tpl, h, w) if (h, w) != (th, tw) else tpl
        score = np.maximum(ncc_map(img, scaled), 0.0)
        si = len(sizes)
        sizes.append((h, w))
        # place each window's score at its centre cell
        region = heat[h // 2:h // 2 + score.shape[0], w // 2:w // 2 + score.shape[1]]
        better = score > region
        region[better] = score[better]
        which[h // 2:h // 2 + score.shape[0], w // 2:w // 2 + score.shape[1]][better] = si
    if not sizes:
        raise DiscoveryError("template is larger than the image at every requested scale")
    return MatchResult(HeatMap(heat, "template-match"), which, sizes)


def template_match(image: np.ndarray, template: np.ndarray,
                   scales: Sequence[float] = (0.75, 1.0, 1.25)) -> HeatMap:
    """Max-over-scales rectified NCC, indexed by window centre."""
    return template_match_detail(image, template, scales).heatmap


# -- connected components ----------------------------------------------------------

@dataclass
class Component:
    mask: np.ndarray
    box: Box


def connected_components(heatmap: HeatMap, threshold_fraction: float = 0.5) -> list[Component]:
    """8-connected regions above ``threshold_fraction * max``, strongest peak first."""
    if not 0.0 < threshold_fraction <= 1.0:
        raise DiscoveryError(f"threshold_fraction must be in (0, 1], got {threshold_fraction}")
    scores = heatmap.scores
    peak = scores.max() if scores.size else 0.0
    if peak <= 0:
        return []
    binary = scores >= threshold_fraction * peak
    labels, n = ndimage.label(binary, structure=_EIGHT)
    comps = []
    for lab in range(1, n + 1):
        mask = labels == lab
        x, y, w, h = mask_bbox(mask)
        comps.append(Component(mask, Box(x, y, w, h, score=float(scores[mask].max()))))
    comps.sort(key=lambda c: -c.box.score)
    return comps


# -- pseudo ground truth -------------------------------------------------------------

@dataclass(frozen=True)
class DiscoveryConfig:
    component_threshold: float = 0.5
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    max_instances: int = 3
    min_component_area: int = 4
    search_margin: int = 4  # template centres may sit this far outside the component box


@dataclass
class PseudoSample:
    """One discovered (or synthesised) instance usable as detector ground truth."""
    scene_index: int
    image: np.ndarray
    category: int
    box: Box
    cond: np.ndarray | None = field(default=None, repr=False)
    synthetic: bool = False


@dataclass
class PseudoGT:
    samples: list[PseudoSample] = field(default_factory=list)
    # keyed (scene, category, component)
    heatmaps: dict[tuple[int, int, int], HeatMap] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def extend(self, other: "PseudoGT") -> "PseudoGT":
        self.samples.extend(other.samples)
        self.heatmaps.update(other.heatmaps)
        return self

    def per_scene(self) -> dict[int, list[tuple[int, Box]]]:
        out: dict[int, list[tuple[int, Box]]] = {}
        for s in self.samples:
            if not s.synthetic:
                out.setdefault(s.scene_index, []).append((s.category, s.box))
        return out


def _search_mask(box: Box, margin: int, shape: tuple[int, int]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    x0, y0 = max(0, int(box.x) - margin), max(0, int(box.y) - margin)
    x1, y1 = int(np.ceil(box.x2)) + margin, int(np.ceil(box.y2)) + margin
    m[y0:y1, x0:x1] = True
    return m


def extract_pseudo_gt(scene, nets, config: DiscoveryConfig = DiscoveryConfig(), scene_index: int = 0) -> PseudoGT:
    """Boxes for every labelled category of a weak scene, found with synthesised templates.

    Per category: CAM, split into instances by connected components, one
    generator template per instance conditioned on that component, then
    multi-scale matching restricted to the component's neighbourhood.  Only
    ``scene.image`` and ``scene.labels`` are read.
    """
    from .networks import cam_from_maps, condition_map, synthesize
    from .tensor import no_grad

    enc = nets.encoder
    n_cat = enc.cfg.n_categories
    labels = scene.labels
    bad = [c for c in labels if not 0 <= c < n_cat]
    if bad:
        raise DiscoveryError(f"scene labelled with categories {bad} unknown to the category bank")
    image = np.asarray(scene.image, dtype=float)
    size = image.shape[-1]
    out = PseudoGT()
    with no_grad():
        raw = enc.cam_maps(image[None])[0]
        for cat in labels:
            cam = cam_from_maps(raw[cat], size)
            comps = [c for c in connected_components(HeatMap(cam, "cam"), config.component_threshold)
                     if c.mask.sum() >= config.min_component_area][:config.max_instances]
            if not comps:
                log.info("scene %d: no CAM component above threshold for category %d", scene_index, cat)
                continue
            conds = np.stack([condition_map(cam, c.mask, nets.cfg.heat_res) for c in comps])
            templates, _ = synthesize(nets, np.repeat(image[None], len(comps), axis=0), conds)
            for j, (comp, cond, tpl) in enumerate(zip(comps, conds, templates.data)):
                bw, bh = max(2, int(round(comp.box.w))), max(2, int(round(comp.box.h)))
                sized = resize_bilinear(tpl, bh, bw)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    match = template_match_detail(image, sized, config.scales)
                allowed = _search_mask(comp.box, config.search_margin, match.heatmap.scores.shape)
                heat = HeatMap(match.heatmap.scores * allowed, "template-match")
                out.heatmaps[(scene_index, cat, j)] = heat
                if heat.scores.max() <= 0:
                    box = comp.box
                else:
                    box = MatchResult(heat, match.scale_index, match.sizes).best_box()
                box = _clip_to(box, size)
                out.samples.append(PseudoSample(scene_index, image, cat, box.with_(category=cat), cond))
    return out


def _clip_to(box: Box, size: int) -> Box:
    x, y = min(max(box.x, 0.0), size - 1.0), min(max(box.y, 0.0), size - 1.0)
    w, h = min(box.w, size - x), min(box.h, size - y)
    return box.with_(x=x, y=y, w=w, h=h)


def discover_dataset(scenes, nets, config: DiscoveryConfig = DiscoveryConfig()) -> PseudoGT:
    out = PseudoGT()
    for i, s in enumerate(scenes):
        out.extend(extract_pseudo_gt(s, nets, config, scene_index=i))
    return out


def paste(image: np.ndarray, patch: np.ndarray, box: Box) -> np.ndarray:
    """Copy of ``image`` with ``patch`` resized into the integer-aligned ``box``."""
    out = np.array(image, dtype=float, copy=True)
    x0, y0 = int(round(box.x)), int(round(box.y))
    x1 = min(out.shape[-1], max(x0 + 1, int(round(box.x2))))
    y1 = min(out.shape[-2], max(y0 + 1, int(round(box.y2))))
    out[:, y0:y1, x0:x1] = resize_bilinear(patch, y1 - y0, x1 - x0)
    return out


def augment_with_synth(pseudo: PseudoGT, nets) -> PseudoGT:
    """Originals plus one synthetic copy per instance: the generator's output
    for that instance pasted over it in a copy of the scene."""
    from .networks import synthesize
    from .tensor import no_grad

    originals = [s for s in pseudo.samples if not s.synthetic]
    out = PseudoGT(list(originals), dict(pseudo.heatmaps))
    if not originals:
        return out
    r = nets.cfg.heat_res
    conds = np.stack([s.cond if s.cond is not None else np.ones((r, r)) / (r * r) for s in originals])
    with no_grad():
        synth, _ = synthesize(nets, np.stack([s.image for s in originals]), conds)
    for s, patch in zip(originals, synth.data):
        out.samples.append(PseudoSample(s.scene_index, paste(s.image, patch, s.box), s.category, s.box,
                                        s.cond, synthetic=True))
    return out
