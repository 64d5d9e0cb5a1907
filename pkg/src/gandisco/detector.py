"""Proposal-scoring detector trained on (pseudo) ground truth.

Every grid proposal is cropped, resized to the patch size and classified into
one of the categories or background by a small CNN; per-category
non-maximum suppression turns the scored proposals into detections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .discovery import ProposalConfig, PseudoGT, grid_proposals
from .geometry import Box, crop_resize
from .metrics import iou_matrix
from .nn import Conv2d, Linear, Module
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, no_grad


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    channels: tuple[int, int] = (8, 16)
    hidden: int = 32
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    background_fraction: float = 0.5
    nms_iou: float = 0.3
    score_threshold: float = 0.5
    seed: int = 0


class ProposalClassifier(Module):
    def __init__(self, n_categories: int, channels: int, patch: int, cfg: DetectorConfig,
                 rng: np.random.Generator):
        c1, c2 = cfg.channels
        self.conv1 = Conv2d(channels, c1, 3, rng, pad=1)
        self.conv2 = Conv2d(c1, c2, 3, rng, pad=1)
        self.fc1 = Linear(c2 * (patch // 4) ** 2, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, n_categories + 1, rng)  # last column is background

    def __call__(self, x: Tensor) -> Tensor:
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.fc1(h.reshape(h.shape[0], -1)))
        return self.fc2(h)


@dataclass
class Detector:
    model: ProposalClassifier
    cfg: DetectorConfig
    proposals: list[Box]
    n_categories: int
    patch_size: int


def nms(boxes: list[Box], iou_threshold: float = 0.3) -> list[Box]:
    """Greedy suppression in descending score order (stable on ties)."""
    if not boxes:
        return []
    order = sorted(range(len(boxes)), key=lambda i: -(boxes[i].score or 0.0))
    ious = iou_matrix(boxes, boxes)
    keep, dead = [], np.zeros(len(boxes), dtype=bool)
    for i in order:
        if dead[i]:
            continue
        keep.append(boxes[i])
        dead |= ious[i] > iou_threshold
        dead[i] = True
    return keep


def _training_set(pseudo: PseudoGT, proposals: list[Box], cfg: DetectorConfig, n_categories: int):
    """(image index, proposal index, label) triples; label ``n_categories`` is background."""
    images: list[np.ndarray] = []
    pos, neg = [], []
    groups: dict[tuple[int, bool], list] = {}
    for s in pseudo.samples:
        groups.setdefault((s.scene_index, s.synthetic), []).append(s)
    for (_, _), samples in sorted(groups.items(), key=lambda kv: kv[0]):
        img_idx = len(images)
        images.append(samples[0].image)
        boxes = [s.box for s in samples]
        ov = iou_matrix(proposals, boxes)  # [P, B]
        best = ov.max(axis=1)
        arg = ov.argmax(axis=1)
        for p in np.nonzero(best > cfg.pos_iou)[0]:
            pos.append((img_idx, int(p), samples[arg[p]].category))
        for p in np.nonzero(best < cfg.neg_iou)[0]:
            neg.append((img_idx, int(p), n_categories))
    return images, pos, neg


def train_detector(pseudo: PseudoGT, n_categories: int, patch_size: int = 16, channels: int = 1,
                   image_size: int = 32, cfg: DetectorConfig = DetectorConfig(),
                   proposals: ProposalConfig = ProposalConfig()) -> Detector:
    """Fit the proposal classifier on the boxes in ``pseudo`` (boxes are never read from scenes)."""
    if len(pseudo) == 0:
        raise DetectorError("cannot train a detector on an empty pseudo ground-truth set")
    props = grid_proposals(image_size, proposals)
    images, pos, neg = _training_set(pseudo, props, cfg, n_categories)
    if not pos:
        raise DetectorError("no proposal overlaps any pseudo ground-truth box above pos_iou")
    rng = np.random.default_rng([cfg.seed, 31])
    model = ProposalClassifier(n_categories, channels, patch_size, cfg, rng)
    state = AdamState(cfg.lr, 0.9, 0.999)
    n_bg = int(round(cfg.batch_size * cfg.background_fraction)) if neg else 0
    n_fg = cfg.batch_size - n_bg
    for _ in range(cfg.steps):
        picks = [pos[i] for i in rng.integers(len(pos), size=n_fg)]
        if n_bg:
            picks += [neg[i] for i in rng.integers(len(neg), size=n_bg)]
        crops = np.stack([crop_resize(images[i], props[p], patch_size) for i, p, _ in picks])
        labels = np.array([c for _, _, c in picks])
        logp = F.log_softmax(model(Tensor(crops)), axis=-1)
        loss = -(logp * Tensor(np.eye(n_categories + 1)[labels])).sum() * (1.0 / len(picks))
        model.zero_grad()
        backward(loss)
        params = model.parameters()
        adam_step(params, {k: v.grad for k, v in params.items()}, state)
    model.zero_grad()
    model.eval()
    return Detector(model, cfg, props, n_categories, patch_size)


def score_proposals(det: Detector, image: np.ndarray) -> np.ndarray:
    """[P, n_categories] class probabilities for every proposal."""
    crops = crop_resize(np.asarray(image, dtype=float), det.proposals, det.patch_size)
    with no_grad():
        probs = F.softmax(det.model(Tensor(crops)), axis=-1).data
    return probs[:, :det.n_categories]


def detect(det: Detector, image: np.ndarray, score_threshold: float | None = None) -> list[Box]:
    """Scored, category-tagged boxes after per-category NMS, best first."""
    thr = det.cfg.score_threshold if score_threshold is None else score_threshold
    probs = score_proposals(det, image)
    out = []
    for c in range(det.n_categories):
        keep = np.nonzero(probs[:, c] >= thr)[0]
        cand = [det.proposals[i].with_(score=float(probs[i, c]), category=c) for i in keep]
        out.extend(nms(cand, det.cfg.nms_iou))
    out.sort(key=lambda b: -b.score)
    return out
