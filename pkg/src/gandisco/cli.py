"""Command-line entry points.

Every subcommand writes into a private staging directory and moves the
finished files into ``--out`` only on success, so a failed run leaves no
partial outputs behind.  Existing files are never replaced without
``--force``.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import experiments as ex
from . import fileio as io
from .config import ConfigError, PipelineConfig, format_config, load_config, pipeline_from_dict, to_dict
from .detector import DetectorError, train_detector
from .discovery import DiscoveryError, PseudoGT, PseudoSample, augment_with_synth, discover_dataset
from .losses import LossConfigError
from .metrics import rmse, ssim, write_eval
from .networks import GanNetworks, cam_from_maps, condition_map, synthesize
from .scenegen import CategoryBank, GenerationError, SupervisionError, generate_dataset
from .tensor import no_grad
from .training import TrainingError, make_state, pretrain_encoder, select_pairs, train

OUT_ENV = "GANDISCO_OUT"
log = logging.getLogger("gandisco")


class CliError(Exception):
    """Bad flags or unusable inputs; reported as one line with exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# -- shared helpers --------------------------------------------------------------------

def _pipeline(args, mode: str | None = None) -> PipelineConfig:
    base = ex.reference_config(mode or "supervised") if args.reference else PipelineConfig()
    cfg = load_config(args.config, base)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_gan(path: Path) -> tuple[GanNetworks, ck.Checkpoint]:
    c = ck.load_checkpoint(path)
    if c.meta.get("kind") == "detector":
        raise CliError(f"{path} holds a detector, not the generative networks")
    cfg = pipeline_from_dict(c.config) if c.config else PipelineConfig()
    nets = ck.restore_networks(c, GanNetworks(cfg.train.net, seed=c.seed))
    return nets.eval(), c


def _save_gan(path: Path, state, cfg: PipelineConfig) -> None:
    opts = {"generator": state.opt_g, "discriminator": state.opt_d, "pretrain": state.opt_pre}
    c = ck.from_networks(state.nets, opts, to_dict(cfg), cfg.seed, state.step, state.pretrain_step,
                         meta={"kind": "gan", "mode": state.cfg.mode})
    ck.save_checkpoint(path, c)


def _restore_state(c: ck.Checkpoint, state) -> None:
    ck.restore_networks(c, state.nets)
    state.step, state.pretrain_step = c.step, c.pretrain_step
    for name, attr in (("generator", "opt_g"), ("discriminator", "opt_d"), ("pretrain", "opt_pre")):
        if name in c.optimizers:
            setattr(state, attr, c.optimizers[name])


def _scenes(args, cfg: PipelineConfig, mode: str):
    if args.data is not None:
        return io.load_dataset(args.data, mode)
    spec = replace(cfg.train.scene, mode="full" if mode == "full" else "weak")
    return generate_dataset(cfg.seed, cfg.train.n_train_scenes, spec)


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(args, out: Path) -> None:
    cfg = _pipeline(args)
    spec = replace(cfg.train.scene, mode=args.mode)
    count = cfg.train.n_train_scenes if args.count is None else args.count
    scenes = generate_dataset(cfg.seed, count, spec)
    io.save_dataset(out, scenes, {"seed": cfg.seed, "image_size": spec.image_size, "channels": spec.channels})


def cmd_pretrain(args, out: Path) -> None:
    cfg = _pipeline(args)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, pretrain_steps=args.steps))
    state = make_state(cfg.train, scenes=_scenes(args, cfg, "weak"))
    losses = pretrain_encoder(state)
    io.atomic_write_text(out / "pretrain_loss.txt", "".join(f"{v:.9e}\n" for v in losses))
    _save_gan(out / "pretrain.ckpt", state, cfg)


def cmd_train(args, out: Path) -> None:
    cfg = _pipeline(args, args.mode)
    tcfg = cfg.train
    if args.mode is not None:
        tcfg = replace(tcfg, mode=args.mode)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    cfg = replace(cfg, train=tcfg)
    state = make_state(tcfg, scenes=_scenes(args, cfg, "full" if tcfg.mode == "supervised" else "weak"))
    if args.init is not None:
        _restore_state(ck.load_checkpoint(args.init), state)
    elif tcfg.steps > 0:
        pretrain_encoder(state)
    log_path = out / "losses.jsonl"
    log_path.write_text("")
    train(tcfg, state, log_path=log_path)
    _save_gan(out / "model.ckpt", state, cfg)
    io.atomic_write_text(out / "config.cfg", format_config(cfg))


def cmd_synth(args, out: Path) -> None:
    nets, c = _load_gan(args.ckpt)
    scenes = io.load_dataset(args.data, "full")
    if not 0 <= args.scene < len(scenes):
        raise CliError(f"scene index {args.scene} outside [0, {len(scenes)})")
    scene = scenes[args.scene]
    if args.category not in scene.labels:
        raise CliError(f"scene {args.scene} has no instance of category {args.category}")
    rng = np.random.default_rng([c.seed, 5, args.scene])
    with no_grad():
        raw = nets.encoder.cam_maps(scene.image[None])[0, args.category]
        cam = cam_from_maps(raw, nets.cfg.scene_size)
        bank = CategoryBank(nets.cfg.n_categories, nets.cfg.patch_size, nets.cfg.channels)
        pair = select_pairs(scene, args.category, "supervised", rng, bank)
        cond = condition_map(cam, pair.region, nets.cfg.heat_res)
        S, _ = synthesize(nets, scene.image[None], cond[None])
    patch = S.data[0]
    io.write_image(out / "synth.pgm" if patch.shape[0] == 1 else out / "synth.ppm", patch)
    io.write_image(out / "true.pgm" if patch.shape[0] == 1 else out / "true.ppm", pair.positive)
    io.atomic_write_text(out / "synth.kv", io.format_keyvalue({
        "scene": args.scene, "category": args.category,
        "ssim": f"{ssim(patch, pair.positive):.6f}", "rmse": f"{rmse(patch, pair.positive):.6f}"}))


def cmd_discover(args, out: Path) -> None:
    nets, c = _load_gan(args.ckpt)
    cfg = pipeline_from_dict(c.config) if c.config else PipelineConfig()
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    scenes = io.load_dataset(args.data, "weak")
    pseudo = discover_dataset(scenes, nets, cfg.discovery)
    per_scene = pseudo.per_scene()
    for i in range(len(scenes)):
        io.write_annotations(out / "pseudo" / f"scene_{i:05d}.txt", per_scene.get(i, []))
    for (i, cat, j), heat in sorted(pseudo.heatmaps.items()):
        io.write_heatmap(out / "heatmaps" / f"scene_{i:05d}_c{cat}_{j}", heat)
    io.atomic_write_text(out / "discover.kv", io.format_keyvalue({
        "scenes": len(scenes), "boxes": len(pseudo),
        "scenes_with_boxes": len(per_scene)}))


def cmd_train_detector(args, out: Path) -> None:
    nets, c = _load_gan(args.ckpt) if args.ckpt is not None else (None, None)
    cfg = pipeline_from_dict(c.config) if c is not None and c.config else PipelineConfig()
    cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.privileged:
        scenes = io.load_dataset(args.data, "full")
        pseudo = PseudoGT([PseudoSample(i, s.image, cat, b.with_(category=cat))
                           for i, s in enumerate(scenes) for cat, b in s.instances])
    else:
        if nets is None:
            raise CliError("--ckpt is required unless --privileged is given")
        pseudo = discover_dataset(io.load_dataset(args.data, "weak"), nets, cfg.discovery)
    if args.augment:
        if nets is None:
            raise CliError("--augment needs --ckpt for the generator")
        pseudo = augment_with_synth(pseudo, nets)
    net = cfg.train.net
    det = train_detector(pseudo, net.n_categories, net.patch_size, net.channels, net.scene_size,
                         cfg.detector, cfg.train.proposals)
    ck.save_checkpoint(out / "detector.ckpt", ck.detector_checkpoint(det, cfg.seed))
    io.atomic_write_text(out / "train_detector.kv", io.format_keyvalue({
        "samples": len(pseudo), "privileged": str(args.privileged).lower(),
        "augment": str(args.augment).lower()}))


def cmd_eval(args, out: Path) -> None:
    det = ck.restore_detector(ck.load_checkpoint(args.detector))
    cfg = load_config(args.config, PipelineConfig())
    scenes = io.load_dataset(args.data, "full")
    result = ex.evaluate_detector(det, scenes, cfg)
    write_eval(result, out, args.name)


def cmd_ablate(args, out: Path) -> None:
    args.reference = True
    cfg = _pipeline(args, args.mode)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    rows = []
    if args.mode == "supervised":
        scores = ex.supervised_ablation(cfg)
        header = f"{'losses':<16} {'SSIM':>8} {'RMSE':>8}"
        for name, s in scores.items():
            rows.append((name, f"{name:<16} {s.ssim:>8.4f} {s.rmse:>8.4f}",
                         {f"{name}.ssim": f"{s.ssim:.6f}", f"{name}.rmse": f"{s.rmse:.6f}"}))
    else:
        results = ex.weak_ablation(cfg)
        header = f"{'losses':<16} {'mAP':>8} {'CorLoc':>8}"
        for name, (res, _) in results.items():
            cl = res.eval.corloc if res.eval.corloc is not None else 0.0
            rows.append((name, f"{name:<16} {res.map:>8.4f} {cl:>8.4f}",
                         {f"{name}.map": f"{res.map:.6f}", f"{name}.corloc": f"{cl:.6f}"}))
    title = f"# {args.mode} loss ablation, seed {cfg.seed}, {cfg.train.steps} steps"
    io.atomic_write_text(out / "ablation.txt", "\n".join([title, header] + [r[1] for r in rows]) + "\n")
    kv = {}
    for r in rows:
        kv.update(r[2])
    io.atomic_write_text(out / "ablation.kv", io.format_keyvalue(kv))


# -- parser and runner ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--force", action="store_true", help="replace existing output files")
    common.add_argument("--reference", action="store_true", help="start from the benchmark profile")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gandisco", description="GAN-based object discovery at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a seeded scene dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--mode", choices=("full", "weak"), default="full")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain-encoder", parents=[common], help="GAP classification pre-training")
    s.add_argument("--data", type=Path)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="adversarial training")
    s.add_argument("--mode", choices=("supervised", "weak"))
    s.add_argument("--steps", type=int)
    s.add_argument("--data", type=Path)
    s.add_argument("--init", type=Path, help="checkpoint to resume from (skips pre-training)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", parents=[common], help="synthesise one instance and score it")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--scene", type=int, required=True)
    s.add_argument("--category", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("discover", parents=[common], help="pseudo ground truth and heat maps")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.set_defaults(func=cmd_discover)

    s = sub.add_parser("train-detector", parents=[common], help="fit the proposal detector")
    s.add_argument("--ckpt", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--privileged", action="store_true", help="train on the dataset's true boxes")
    s.add_argument("--augment", action="store_true", help="add one synthesised copy per instance")
    s.set_defaults(func=cmd_train_detector)

    s = sub.add_parser("eval", parents=[common], help="detection AP and CorLoc on a full dataset")
    s.add_argument("--detector", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--name", default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="loss-combination grid")
    s.add_argument("--mode", choices=("supervised", "weak"), default="supervised")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_ablate)
    return p


def _resolve_out(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs"))


def _commit(staging: Path, out: Path, force: bool) -> None:
    files = sorted(p for p in staging.rglob("*") if p.is_file())
    clashes = [f for f in files if (out / f.relative_to(staging)).exists()]
    if clashes and not force:
        raise CliError(f"{out / clashes[0].relative_to(staging)} exists; use --force to overwrite")
    for f in files:
        dest = out / f.relative_to(staging)
        dest.parent.mkdir(parents=True, exist_ok=True)
        os.replace(f, dest)


_EXPECTED = (CliError, ConfigError, LossConfigError, io.FormatError, ck.CheckpointError, DiscoveryError,
             DetectorError, TrainingError, SupervisionError, GenerationError, OSError, ValueError, KeyError)


def main(argv: list[str] | None = None) -> int:
    staging = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        out = _resolve_out(args)
        if out.exists() and not out.is_dir():
            raise CliError(f"output path {out} is not a directory")
        if out.is_dir() and any(out.iterdir()) and not args.force:
            raise CliError(f"output directory {out} is not empty; use --force to overwrite")
        out.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
        args.func(args, staging)
        _commit(staging, out, args.force)
        return 0
    except _EXPECTED as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, KeyError):
            msg = f"missing key {msg}"
        print(f"gandisco: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, (CliError, ConfigError)) else 1
    except Exception as exc:  # keep the one-line contract even for bugs
        print(f"gandisco: error: internal {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return 1
    finally:
        if staging is not None and staging.exists():
            shutil.rmtree(staging, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
