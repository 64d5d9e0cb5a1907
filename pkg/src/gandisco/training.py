"""Pair selection, encoder pre-training and alternating adversarial training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from . import losses as L
from .discovery import ProposalConfig, connected_components, grid_proposals, top_k_boxes
from .geometry import Box, HeatMap, crop_resize, resize_bilinear
from .networks import GanNetworks, NetConfig, cam_from_maps, condition_map, synthesize
from .optim import AdamState, adam_step
from .scenegen import CategoryBank, Scene, SceneSpec, SupervisionError, generate_dataset
from .tensor import Tensor, backward, concat, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    d_steps: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    weights: L.LossWeights = L.LossWeights()
    use_rank: bool = True
    use_recon: bool = True
    use_adv: bool = True
    margin: float = 0.0
    k: int = 5
    n_train_scenes: int = 200
    pretrain_steps: int = 1000
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 16
    freeze_encoder: bool = False
    detach_reference: bool = True
    component_threshold: float = 0.5
    net: NetConfig = NetConfig()
    scene: SceneSpec = SceneSpec()
    proposals: ProposalConfig = ProposalConfig()
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in ("supervised", "weak"):
            raise ValueError(f"mode must be 'supervised' or 'weak', got {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.steps < 0 or self.batch_size < 1 or self.d_steps < 1:
            raise ValueError("steps must be >= 0, batch_size and d_steps >= 1")

    @property
    def terms(self) -> tuple[str, ...]:
        return L.active_terms(self.mode, self.use_rank, self.use_recon, self.use_adv)

    def lr_at(self, step: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (step // self.lr_decay_every)


@dataclass
class TrainingPair:
    scene_index: int
    category: int
    region: np.ndarray  # boolean mask over the scene marking the target
    positive: np.ndarray  # [C, P, P]
    negative: np.ndarray
    negative_category: int
    target_box: Box | None = None


# -- heat maps ---------------------------------------------------------------------

def box_mask(box: Box, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    x0, y0 = int(round(box.x)), int(round(box.y))
    m[y0:int(round(box.y2)), x0:int(round(box.x2))] = True
    return m


# -- pair selection ----------------------------------------------------------------

def _other_category(rng: np.random.Generator, category: int, n_categories: int) -> int:
    others = [c for c in range(n_categories) if c != category]
    return int(rng.choice(others))


def select_pairs(scene: Scene, category: int, mode: str, rng: np.random.Generator, bank: CategoryBank,
                 cam: np.ndarray | None = None, threshold: float = 0.5, scene_index: int = -1) -> TrainingPair:
    """Positive/negative patches for synthesising ``category`` out of ``scene``.

    Supervised: the positive is the crop of a ground-truth instance of
    ``category`` and the negative the crop of an instance of another category
    (bank fallback when there is none).  Weak: both come from the bank and the
    target region is the strongest CAM component; scene boxes are never read.
    """
    p = bank.patch_size
    size = scene.size
    if mode == "supervised":
        inst = scene.instances
        mine = [b for c, b in inst if c == category]
        if not mine:
            raise TrainingError(f"scene has no instance of category {category}")
        target = mine[int(rng.integers(len(mine)))]
        pos = crop_resize(scene.image, target, p)
        others = [(c, b) for c, b in inst if c != category]
        if others:
            nc, nb = others[int(rng.integers(len(others)))]
            neg = crop_resize(scene.image, nb, p)
        else:
            nc = _other_category(rng, category, bank.n_categories)
            neg = bank.sample(nc, int(rng.integers(2**31)))
        return TrainingPair(scene_index, category, box_mask(target, size), pos, neg, nc, target)
    if mode != "weak":
        raise ValueError(f"unknown mode {mode!r}")
    if category not in scene.labels:
        raise TrainingError(f"scene is not labelled with category {category}")
    pos = bank.sample(category, int(rng.integers(2**31)))
    nc = _other_category(rng, category, bank.n_categories)
    neg = bank.sample(nc, int(rng.integers(2**31)))
    if cam is None:
        region = np.ones((size, size), dtype=bool)
    else:
        comps = connected_components(HeatMap(cam), threshold)
        region = comps[0].mask if comps else np.ones((size, size), dtype=bool)
    return TrainingPair(scene_index, category, region, pos, neg, nc)


# -- optimiser bookkeeping ----------------------------------------------------------

@dataclass
class TrainState:
    nets: GanNetworks
    cfg: TrainConfig
    scenes: list[Scene]
    bank: CategoryBank
    opt_g: AdamState
    opt_d: AdamState
    step: int = 0
    pretrain_step: int = 0
    opt_pre: AdamState | None = None
    reports: list[L.LossReport] = field(default_factory=list)


def g_side_params(nets: GanNetworks, freeze_encoder: bool = False) -> dict[str, Tensor]:
    params = {}
    for name in ("encoder", "loc_encoder", "generator"):
        if name == "encoder" and freeze_encoder:
            continue
        params.update({f"{name}.{k}": v for k, v in getattr(nets, name).parameters().items()})
    # the classifier head only serves CAMs; GAN losses never reach it
    return {k: v for k, v in params.items() if not k.startswith("encoder.cls.")}


def d_params(nets: GanNetworks) -> dict[str, Tensor]:
    return {f"discriminator.{k}": v for k, v in nets.discriminator.parameters().items()}


def _zero_all(nets: GanNetworks) -> None:
    for m in nets.modules().values():
        m.zero_grad()


def make_state(cfg: TrainConfig, nets: GanNetworks | None = None, scenes: list[Scene] | None = None) -> TrainState:
    if nets is None:
        nets = GanNetworks(cfg.net, seed=cfg.seed)
    if scenes is None:
        spec = replace(cfg.scene, mode="full" if cfg.mode == "supervised" else "weak")
        scenes = generate_dataset(cfg.seed, cfg.n_train_scenes, spec)
    bank = CategoryBank(cfg.net.n_categories, cfg.net.patch_size, cfg.net.channels)
    return TrainState(nets, cfg, scenes, bank,
                      AdamState(cfg.lr, cfg.beta1, cfg.beta2), AdamState(cfg.lr, cfg.beta1, cfg.beta2))


# -- encoder pre-training ----------------------------------------------------------

def _bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    # log(1 + e^z) - t z, written stably as softplus
    z = logits
    sp = F.relu(z) + _log1p_exp_neg_abs(z)
    return (sp - z * Tensor(targets)).sum() * (1.0 / targets.shape[0])


def _log1p_exp_neg_abs(z: Tensor) -> Tensor:
    from .tensor import exp, log
    a = z.data
    sign = np.sign(a)
    # |z| as a differentiable expression
    absz = z * Tensor(sign)
    return log(1.0 + exp(-absz))


def pretrain_step(state: TrainState) -> float:
    """One multi-label GAP-classification step on weak scene labels plus bank patches."""
    cfg, nets = state.cfg, state.nets
    if state.opt_pre is None:
        state.opt_pre = AdamState(cfg.pretrain_lr, cfg.beta1, 0.999)
    rng = np.random.default_rng([cfg.seed, 7, state.pretrain_step])
    enc = nets.encoder
    enc.train()
    nb = cfg.pretrain_batch
    idx = rng.integers(len(state.scenes), size=nb)
    imgs = np.stack([state.scenes[i].image for i in idx])
    targets = np.zeros((nb, cfg.net.n_categories))
    for r, i in enumerate(idx):
        targets[r, list(state.scenes[i].labels)] = 1.0
    cats = rng.integers(cfg.net.n_categories, size=nb)
    patches = state.bank.batch(cats, rng.integers(2**31, size=nb))
    ptargets = np.eye(cfg.net.n_categories)[cats]
    loss = _bce_with_logits(enc.logits(Tensor(imgs)), targets) + \
        _bce_with_logits(enc.logits(Tensor(patches)), ptargets)
    enc.zero_grad()
    backward(loss)
    params = {f"encoder.{k}": v for k, v in enc.parameters().items() if not k.startswith("fc.")}
    adam_step(params, {k: v.grad for k, v in params.items()}, state.opt_pre)
    state.pretrain_step += 1
    return float(loss.data)


def pretrain_encoder(state: TrainState, steps: int | None = None) -> list[float]:
    steps = state.cfg.pretrain_steps if steps is None else steps
    return [pretrain_step(state) for _ in range(steps)]


# -- GAN step ------------------------------------------------------------------------

@dataclass
class Batch:
    scenes: np.ndarray
    cond: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    box_patches: np.ndarray | None
    pairs: list[TrainingPair]
    scene_fmap: Tensor | None = None  # encoder conv map of the scenes, graph attached


def prepare_batch(state: TrainState, rng: np.random.Generator) -> Batch:
    """Sample scenes and targets, then build conditions and pairs from one encoder pass."""
    cfg, nets = state.cfg, state.nets
    size = cfg.net.scene_size
    idx = rng.integers(len(state.scenes), size=cfg.batch_size)
    scenes = [state.scenes[i] for i in idx]
    cats = [int(rng.choice(s.labels)) for s in scenes]
    images = np.stack([s.image for s in scenes])
    fmap = nets.encoder.conv_map(Tensor(images))
    raw = np.einsum("nkhw,kc->nchw", fmap.data, nets.encoder.cls.weight.data)
    cams = [cam_from_maps(raw[i, c], size) for i, c in enumerate(cats)]


    pairs = [select_pairs(s, c, cfg.mode, rng, state.bank, cam=cam, threshold=cfg.component_threshold,
                          scene_index=int(i))
             for s, c, cam, i in zip(scenes, cats, cams, idx)]
    cond = np.stack([condition_map(cam, pr.region, cfg.net.heat_res) for cam, pr in zip(cams, pairs)])
    box_patches = None
    if cfg.mode == "weak":
        props = grid_proposals(size, cfg.proposals)
        crops = []
        for s, cam, pr in zip(scenes, cams, pairs):
            top = top_k_boxes(HeatMap(cam * pr.region), props, cfg.k)
            crops.append(crop_resize(s.image, top, cfg.net.patch_size))
        box_patches = np.stack(crops)  # [B, K, C, P, P]
    return Batch(images, cond, np.stack([p.positive for p in pairs]), np.stack([p.negative for p in pairs]),
                 box_patches, pairs, fmap)


def _check_finite(values: dict) -> None:
    for k, v in values.items():
        val = float(v.data) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite loss term {k!r} ({val})")


def train_step(state: TrainState) -> L.LossReport:
    """Discriminator update(s) on l_disc, then one encoder+generator update on l_total."""
    cfg, nets = state.cfg, state.nets
    rng = np.random.default_rng([cfg.seed, 11, state.step])
    lr = cfg.lr_at(state.step)
    state.opt_g.lr = lr
    state.opt_d.lr = lr
    nets.train()
    batch = prepare_batch(state, rng)
    n = cfg.batch_size
    disc = nets.discriminator
    cond_kw = {}

    # D phase
    S, z = synthesize(nets, batch.scenes, batch.cond, batch.scene_fmap)
    S_fixed = Tensor(S.data)
    disc_val = 0.0
    for _ in range(cfg.d_steps):
        if cfg.net.conditional_disc:
            cond_kw = {"condition": Tensor(np.concatenate([z.data, z.data]))}
        logits = disc.probs_logits(Tensor(np.concatenate([batch.pos, S_fixed.data])), rng, **cond_kw)
        logp = F.log_softmax(logits, axis=-1)
        l_disc = L.discriminator_loss_logp(logp[:n], logp[n:])
        real_right = logp.data[:n, 1] > np.log(0.5)
        fake_right = logp.data[n:, 1] < np.log(0.5)
        d_acc = float(np.concatenate([real_right, fake_right]).mean())
        _check_finite({"disc": l_disc})
        _zero_all(nets)
        backward(l_disc)
        dp = d_params(nets)
        adam_step(dp, {k: v.grad for k, v in dp.items()}, state.opt_d)
        disc_val = float(l_disc.data)

    # G phase
    terms = cfg.terms
    values: dict = {"disc": disc_val}
    # adv is always evaluated so ablations still report it
    if cfg.net.conditional_disc:
        cond_kw = {"condition": Tensor(z.data)}  # G may not move z to fool D
    logp_fake = F.log_softmax(disc.probs_logits(S, rng, **cond_kw), axis=-1)
    values["adv"] = L.adversarial_loss_logp(logp_fake)
    d_fake = np.exp(logp_fake.data[:, 1])
    enc = nets.encoder
    if "rank" in terms or "feat" in terms:
        if cfg.detach_reference:
            f_s = enc.features(S)
            with no_grad():
                f_pos = enc.features(Tensor(batch.pos))
                f_neg = enc.features(Tensor(batch.neg))
        else:
            f_all = enc.features(concat([S, Tensor(batch.pos), Tensor(batch.neg)], axis=0))
            f_s, f_pos, f_neg = f_all[:n], f_all[n:2 * n], f_all[2 * n:]
        values["rank"] = L.ranking_loss(f_s, f_pos, f_neg, cfg.margin)
        if cfg.mode == "weak":
            k = batch.box_patches.shape[1]
            flat = batch.box_patches.reshape((n * k,) + batch.box_patches.shape[2:])
            if cfg.detach_reference:
                with no_grad():
                    fb = enc.features(Tensor(flat))
            else:
                fb = enc.features(Tensor(flat))
            values["feat"] = L.feature_loss(f_s, fb.reshape(n, k, -1))
    if cfg.mode == "supervised":
        values["img"] = L.image_loss(S, Tensor(batch.pos))
    _check_finite(values)
    total, report = L.total_loss(values, cfg.mode, cfg.weights, terms)
    _zero_all(nets)
    gp = g_side_params(nets, cfg.freeze_encoder)
    if isinstance(total, Tensor) and total.requires_grad:
        backward(total)
    adam_step(gp, {k: v.grad for k, v in gp.items()}, state.opt_g)
    _zero_all(nets)

    report.step = state.step
    report.extras = {"d_acc": d_acc, "d_fake": float(d_fake.mean()), "lr": lr}
    state.step += 1
    return report


def append_log(path: Path, report: L.LossReport) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(report.as_record(), sort_keys=False) + "\n")


def train(cfg: TrainConfig, state: TrainState | None = None, log_path: Path | None = None,
          callback: Callable[[TrainState, L.LossReport], None] | None = None) -> TrainState:
    """Run ``cfg.steps`` adversarial steps (pre-training the encoder first on a fresh state)."""
    if state is None:
        state = make_state(cfg)
        pretrain_encoder(state)
    state.cfg = cfg
    target = state.step + cfg.steps
    while state.step < target:
        report = train_step(state)
        if cfg.log_every and report.step % cfg.log_every == 0:
            state.reports.append(report)
            if log_path is not None:
                append_log(log_path, report)
        if callback is not None:
            callback(state, report)
    return state
