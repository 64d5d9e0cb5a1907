"""Reference benchmark configuration, loss ablation grids and evaluation runs.

The supervised grid measures synthesis quality (SSIM/RMSE against the true
patch); the weak grid runs discovery and trains the proposal detector, then
reports detection mAP on held-out scenes.  Privileged boxes are read only by
the evaluation helpers here, never by training, discovery or detector fitting.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import PipelineConfig, parse_config
from .detector import Detector, detect, train_detector
from .discovery import PseudoGT, augment_with_synth, discover_dataset, extract_pseudo_gt
from .geometry import Box
from .metrics import EvalResult, corloc, evaluate_detections, iou, rmse, ssim
from .networks import GanNetworks, cam_from_maps, condition_map, synthesize
from .scenegen import CategoryBank, Scene, SceneSpec, generate_dataset
from .tensor import no_grad
from .training import TrainConfig, TrainState, make_state, pretrain_encoder, select_pairs, train

log = logging.getLogger(__name__)

# name -> (use_rank, use_recon, use_adv); the full model comes first
SUPERVISED_GRID = {
    "adv+img+rank": (True, True, True),
    "adv+img": (False, True, True),
    "adv+rank": (True, False, True),
    "img+rank": (True, True, False),
}
WEAK_GRID = {
    "adv+feat+rank": (True, True, True),
    "adv+rank": (True, False, True),
    "adv+feat": (False, True, True),
    "feat+rank": (True, True, False),
}


# Overrides on top of the defaults that define the desk-scale benchmark.
REFERENCE_CFG = """\
[network]
enc_channels = 16, 32, 64

[training]
steps = 2000
batch_size = 8
n_train_scenes = 1000
margin = 0.3

[losses]
alpha_img = 5.0

[discovery]
search_margin = 0

[detector]
steps = 4000
"""

# Weak mode has no pixel target, so the frozen classifier's features carry the
# shape signal: an always-active ranking hinge acts as a perceptual loss.
WEAK_REFERENCE_CFG = """\
[training]
steps = 1500
freeze_encoder = true
margin = 2.0

[losses]
alpha_rank = 50.0
alpha_feat = 0.001
"""


def reference_config(mode: str = "supervised", seed: int = 0) -> PipelineConfig:
    """The desk-scale benchmark: the defaults with the benchmark loss profile and schedule."""
    cfg = parse_config(REFERENCE_CFG)
    if mode == "weak":
        cfg = parse_config(WEAK_REFERENCE_CFG, cfg)
    cfg = replace(cfg, train=replace(cfg.train, mode=mode))
    return cfg.with_seed(seed)


def with_terms(cfg: TrainConfig, terms: tuple[bool, bool, bool]) -> TrainConfig:
    use_rank, use_recon, use_adv = terms
    return replace(cfg, use_rank=use_rank, use_recon=use_recon, use_adv=use_adv)


def pretrained_state(cfg: TrainConfig) -> TrainState:
    state = make_state(cfg)
    pretrain_encoder(state)
    return state


def fork_state(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Fresh optimisers and step counter over a deep copy of ``state``'s networks and data."""
    nets = copy.deepcopy(state.nets)
    out = make_state(cfg, nets=nets, scenes=state.scenes)
    out.pretrain_step = state.pretrain_step
    return out


# -- supervised synthesis quality ------------------------------------------------------

@dataclass
class SynthesisScore:
    ssim: float
    rmse: float
    pos_over_neg: float  # fraction with SSIM(S, x+) > SSIM(S, x-)


def evaluate_synthesis(nets: GanNetworks, scenes: list[Scene], seed: int = 0) -> SynthesisScore:
    """Synthesise one labelled instance per held-out (full-mode) scene and compare to its true patch."""
    bank = CategoryBank(nets.cfg.n_categories, nets.cfg.patch_size, nets.cfg.channels)
    was = nets.encoder.training
    nets.eval()
    imgs, conds, pos, neg = [], [], [], []
    size = nets.cfg.scene_size
    with no_grad():
        raw = nets.encoder.cam_maps(np.stack([s.image for s in scenes]))
        for i, s in enumerate(scenes):
            rng = np.random.default_rng([seed, 97, i])
            c = int(rng.choice(s.labels))
            cam = cam_from_maps(raw[i, c], size)
            pr = select_pairs(s, c, "supervised", rng, bank)
            imgs.append(s.image)
            conds.append(condition_map(cam, pr.region, nets.cfg.heat_res))
            pos.append(pr.positive)
            neg.append(pr.negative)
        S, _ = synthesize(nets, np.stack(imgs), np.stack(conds))
    nets.train(was)
    ss = np.array([ssim(a, b) for a, b in zip(S.data, pos)])
    so = np.array([ssim(a, b) for a, b in zip(S.data, neg)])
    rm = np.array([rmse(a, b) for a, b in zip(S.data, pos)])
    return SynthesisScore(float(ss.mean()), float(rm.mean()), float(np.mean(ss > so)))


def held_out_scenes(cfg: PipelineConfig, spec: SceneSpec | None = None, count: int | None = None) -> list[Scene]:
    spec = replace(cfg.train.scene, mode="full") if spec is None else spec
    n = cfg.evaluation.n_test_scenes if count is None else count
    return generate_dataset(cfg.evaluation.test_seed_offset + cfg.seed, n, spec)


def supervised_ablation(cfg: PipelineConfig, grid: dict = SUPERVISED_GRID,
                        base: TrainState | None = None) -> dict[str, SynthesisScore]:
    """Train every loss combination from one shared pre-trained encoder; score on held-out scenes."""
    tcfg = replace(cfg.train, mode="supervised")
    base = pretrained_state(tcfg) if base is None else base
    held_out = held_out_scenes(cfg)
    out = {}
    for name, terms in grid.items():
        run_cfg = with_terms(tcfg, terms)
        st = train(run_cfg, fork_state(base, run_cfg))
        out[name] = evaluate_synthesis(st.nets, held_out, cfg.seed)
        log.info("supervised %s seed %d: ssim %.4f rmse %.4f", name, cfg.seed, out[name].ssim, out[name].rmse)
    return out


# -- weak pipeline ---------------------------------------------------------------------

@dataclass
class WeakResult:
    eval: EvalResult
    pseudo: PseudoGT = field(repr=False)
    detector: Detector = field(repr=False)

    @property
    def map(self) -> float:
        return self.eval.map


def fit_detector(nets: GanNetworks, scenes: list[Scene], cfg: PipelineConfig, augment: bool = False
                 ) -> tuple[Detector, PseudoGT]:
    pseudo = discover_dataset(scenes, nets, cfg.discovery)
    if augment:
        pseudo = augment_with_synth(pseudo, nets)
    net = nets.cfg
    det = train_detector(pseudo, net.n_categories, net.patch_size, net.channels, net.scene_size,
                         cfg.detector, cfg.train.proposals)
    return det, pseudo


def evaluate_detector(det: Detector, scenes: list[Scene], cfg: PipelineConfig) -> EvalResult:
    """Detection AP and CorLoc on full-mode held-out scenes (evaluator side)."""
    dets = [detect(det, s.image) for s in scenes]
    gts = [[b.with_(category=c) for c, b in s.privileged_instances()] for s in scenes]
    return evaluate_detections(dets, gts, range(det.n_categories), cfg.evaluation.iou_threshold)


def weak_pipeline(nets: GanNetworks, train_scenes: list[Scene], cfg: PipelineConfig,
                  held_out: list[Scene] | None = None, augment: bool | None = None) -> WeakResult:
    augment = cfg.evaluation.augment if augment is None else augment
    det, pseudo = fit_detector(nets, train_scenes, cfg, augment)
    held_out = held_out_scenes(cfg) if held_out is None else held_out
    return WeakResult(evaluate_detector(det, held_out, cfg), pseudo, det)


def weak_ablation(cfg: PipelineConfig, grid: dict = WEAK_GRID, base: TrainState | None = None
                  ) -> dict[str, tuple[WeakResult, TrainState]]:
    tcfg = replace(cfg.train, mode="weak")
    base = pretrained_state(tcfg) if base is None else base
    held_out = held_out_scenes(cfg)
    out = {}
    for name, terms in grid.items():
        run_cfg = with_terms(tcfg, terms)
        st = train(run_cfg, fork_state(base, run_cfg))
        res = weak_pipeline(st.nets, st.scenes, cfg, held_out)
        out[name] = (res, st)
        log.info("weak %s seed %d: mAP %.4f", name, cfg.seed, res.map)
    return out


def pseudo_gt_hit_rate(nets: GanNetworks, scenes: list[Scene], cfg: PipelineConfig) -> float:
    """Fraction of scenes whose first emitted box overlaps a true box of its category at IoU > 0.5.

    Discovery runs on weak copies; the true boxes are read afterwards by the evaluator.
    """
    hits = 0
    for i, s in enumerate(scenes):
        found = extract_pseudo_gt(s.as_weak(), nets, cfg.discovery, i)
        truth = s.privileged_instances()
        if found.samples:
            b = found.samples[0]
            hits += any(c == b.category and iou(b.box, t) > 0.5 for c, t in truth)
    return hits / len(scenes)


def random_box_corloc(scenes: list[Scene], cfg: PipelineConfig, seed: int = 0) -> float:
    """CorLoc of one uniformly random proposal-sized box per image."""
    rng = np.random.default_rng([seed, 211])
    size = cfg.train.net.scene_size
    lo, hi = min(cfg.train.proposals.windows), max(cfg.train.proposals.windows)
    best = []
    for _ in scenes:
        w, h = (int(v) for v in rng.integers(lo, hi + 1, 2))
        best.append(Box(int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1)), w, h))
    return corloc(best, [[b for _, b in s.privileged_instances()] for s in scenes], cfg.evaluation.iou_threshold)


def table2_ordering(values: dict[str, float]) -> bool:
    """Full model at least as good as every two-loss model; img+rank (no adversarial term) worst."""
    full, last = "adv+img+rank", "img+rank"
    others = [k for k in values if k != full]
    return all(values[full] >= values[k] for k in others) and all(values[last] <= values[k] for k in values)


def table3_ordering(values: dict[str, float]) -> bool:
    """full >= adv+rank >= adv+feat, and feat+rank (no adversarial term) worst."""
    chain = ["adv+feat+rank", "adv+rank", "adv+feat"]
    ok = all(values[a] >= values[b] for a, b in zip(chain, chain[1:]))
    return ok and all(values["feat+rank"] <= values[k] for k in values)
