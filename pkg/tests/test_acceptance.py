"""End-to-end acceptance checks.

Each test records a one-line verdict that is printed in the terminal summary
under "acceptance criteria".  The trained-model criteria share one weak
ablation per seed through module-level caches, so criteria 5 to 8 pay for
training only once.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from gandisco import experiments as ex
from gandisco import functional as F
from gandisco import losses as L
from gandisco.cli import main
from gandisco.discovery import connected_components
from gandisco.geometry import HeatMap
from gandisco.metrics import average_precision, rmse, ssim
from gandisco.networks import GanNetworks, NetConfig, synthesize
from gandisco.scenegen import privileged_access
from gandisco.tensor import Tensor, backward

from conftest import ACCEPTANCE, max_rel_error, numeric_grad
from oracles import brute_force_ap, flood_fill_count, naive_conv2d, naive_rmse, naive_ssim
from test_metrics import _random_problem

SEEDS = (0, 1, 2)
TINY = NetConfig(enc_channels=(2, 2, 3), gen_channels=(3, 2, 2), disc_channels=(2, 2, 2), d_vis=4, d_loc=2,
                 disc_hidden=3, loc_channels=2, patch_size=8, scene_size=16, heat_res=4, dropout=0.0)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


# -- 1. gradients ----------------------------------------------------------------------

def _sampled_check(build, tensors, rng, per_tensor=6, h=1e-5) -> float:
    """Relative error of backward() against central differences on random coordinates."""
    loss = build()
    for t in tensors:
        t.grad = None
    backward(loss)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = float(build().data)
            flat[i] = old - h
            fm = float(build().data)
            flat[i] = old
            num, ana = (fp - fm) / (2 * h), t.grad.reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-6))
    return worst


KINDS = ("relu", "sigmoid", "softmax", "max_pool", "global_avg_pool", "fully_connected", "dropout", "l2_norm",
         "conv2d", "transposed_conv2d")


def _layer_error(kind: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)) + 0.05, requires_grad=True)
    extra = []
    if kind == "conv2d":
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        op, extra = (lambda: F.conv2d(x, k, stride=2, pad=1)), [k]
    elif kind == "transposed_conv2d":
        k = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        op, extra = (lambda: F.transposed_conv2d(x, k, stride=2, pad=1)), [k]
    elif kind == "fully_connected":
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        op, extra = (lambda: F.layer_op(x, kind, weight=w)), [w]
    elif kind == "dropout":
        op = lambda: F.layer_op(x, kind, p=0.3, rng=np.random.default_rng(seed + 11))
    else:
        op = lambda: F.layer_op(x, kind)

    def build():
        out = op()
        return (out * Tensor(np.cos(np.arange(out.size)).reshape(out.shape))).sum()

    loss = build()
    for t in [x] + extra:
        t.grad = None
    backward(loss)
    return max(max_rel_error(t.grad, numeric_grad(lambda: float(build().data), t.data, 1e-5))
               for t in [x] + extra)


def _composed_error(seed: int) -> float:
    n = GanNetworks(TINY, seed=seed)
    rng = np.random.default_rng(seed)
    img = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
    cond = Tensor(rng.random((1, 4, 4)), requires_grad=True)
    w = rng.normal(size=(1, 1, 8, 8))
    params = [n.encoder.conv1.weight, n.encoder.fc.weight, n.loc_encoder.conv.weight,
              n.generator.fc1.weight, n.generator.up3.weight]

    def build():
        s, _ = synthesize(n, img, cond)
        return (s * Tensor(w)).sum()

    return _sampled_check(build, [img, cond] + params, rng)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {k: max(_layer_error(k, s) for s in range(20)) for k in KINDS}
    worst["encoder->generator"] = max(_composed_error(s) for s in range(20))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    record(1, not bad and elapsed < 60,
           f"{len(worst)} checks x 20 seeds, worst rel err {max(worst.values()):.1e}, {elapsed:.1f}s"
           + (f", failing {sorted(bad)}" if bad else ""))


# -- 2. loss identities ----------------------------------------------------------------

def _v(t) -> float:
    return float(np.asarray(t.data))


def test_criterion_2_loss_identities():
    t0 = time.perf_counter()
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    checks = {
        "cos same": _v(L.cosine_distance(e1, e1)) == 0.0,
        "cos orthogonal": _v(L.cosine_distance(e1, e2)) == 1.0,
        "cos opposite": _v(L.cosine_distance(e1, -e1)) == 2.0,
        "cos parallel scaled": _v(L.cosine_distance(3 * e1, e1)) == 0.0,
        "rank satisfied": _v(L.ranking_loss(e1, e1, e2)) == 0.0,
        "rank violated": _v(L.ranking_loss(e2, e1, e2)) == 1.0,
        "rank tie": _v(L.ranking_loss(e1, e2, e2)) == 0.0,
        "disc balanced": math.isclose(_v(L.discriminator_loss([0.5], [0.5])), 2 * math.log(2), abs_tol=1e-12),
        "disc optimum": 0 < _v(L.discriminator_loss([1 - 1e-9], [1e-9])) < 1e-8,
        "adv half": math.isclose(_v(L.adversarial_loss([0.5])), math.log(2), abs_tol=1e-12),
        "adv e^-1": math.isclose(_v(L.adversarial_loss([math.exp(-1)])), 1.0, abs_tol=1e-12),
        "img zero": _v(L.image_loss(np.ones((1, 4, 4)), np.ones((1, 4, 4)))) == 0.0,
        "feat mean": _v(L.feature_loss(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0]]))) == 0.5,
        "total zero": L.total_loss({"rank": 0.0, "img": 0.0, "adv": 0.0}, "supervised")[0] == 0.0,
        "total unit": math.isclose(L.total_loss({"rank": 1.0, "img": 1.0, "adv": 1.0}, "supervised")[0],
                                   100.050001, abs_tol=1e-12),
    }
    y = np.zeros((1, 4, 4))
    y[0, 1, 2] = 0.5
    checks["img single pixel"] = math.isclose(_v(L.image_loss(y, np.zeros((1, 4, 4)))), 0.25, abs_tol=1e-15)

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        fs, fp, fn = rng.normal(size=(3, 16))
        base = _v(L.ranking_loss(fs, fp, fn))
        for c in rng.uniform(1e-3, 1e3, size=3):
            for args in ((c * fs, fp, fn), (fs, c * fp, fn), (fs, fp, c * fn)):
                worst = max(worst, abs(_v(L.ranking_loss(*args)) - base))
    checks["scale invariance"] = worst <= 1e-10
    elapsed = time.perf_counter() - t0
    failed = [k for k, ok in checks.items() if not ok]
    record(2, not failed and elapsed < 10,
           f"{len(checks)} identities, scale-invariance worst {worst:.1e} over 100 triples, {elapsed:.2f}s"
           + (f", failing {failed}" if failed else ""))


# -- 3. oracles ------------------------------------------------------------------------

def test_criterion_3_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    conv_err = 0.0
    for _ in range(100):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(5, 9)), int(rng.integers(5, 9))))
        k = rng.normal(size=(int(rng.integers(1, 4)), x.shape[0], int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        conv_err = max(conv_err, float(np.max(np.abs(F.conv2d(Tensor(x), Tensor(k), stride, pad).data
                                                     - naive_conv2d(x, k, stride, pad)))))
    cc_bad = 0
    for _ in range(100):
        binary = rng.random((16, 16)) < rng.uniform(0.2, 0.6)
        cc_bad += len(connected_components(HeatMap(binary.astype(float)), 1.0)) != flood_fill_count(binary)
    ap_err = 0.0
    for _ in range(100):
        dets, gts = _random_problem(rng)
        flat = [(d.score, i, d.as_tuple()) for i, ds in enumerate(dets) for d in ds]
        ref = brute_force_ap(flat, [[g.as_tuple() for g in gs] for gs in gts]) if flat else 0.0
        ap_err = max(ap_err, abs(average_precision(dets, gts) - ref))
    ss_err = rm_err = 0.0
    for _ in range(100):
        shape = (int(rng.choice([1, 3])), int(rng.integers(7, 14)), int(rng.integers(7, 14)))
        a, b = rng.random(shape), rng.random(shape)
        ss_err = max(ss_err, abs(ssim(a, b) - naive_ssim(a, b)))
        rm_err = max(rm_err, abs(rmse(a, b) - naive_rmse(a, b)))
    elapsed = time.perf_counter() - t0
    ok = conv_err <= 1e-10 and cc_bad == 0 and ap_err <= 1e-12 and ss_err <= 1e-9 and rm_err <= 1e-12
    record(3, ok and elapsed < 60,
           f"conv {conv_err:.1e}, components {cc_bad} mismatches, AP {ap_err:.1e}, SSIM {ss_err:.1e}, "
           f"RMSE {rm_err:.1e} (100 each), {elapsed:.1f}s")


# -- trained-model criteria ------------------------------------------------------------

_weak_cache: dict[int, dict] = {}
_weak_time: dict[int, float] = {}


def weak_runs(seed: int) -> dict:
    if seed not in _weak_cache:
        if seed == 0:
            privileged_access.reset()
        t0 = time.perf_counter()
        _weak_cache[seed] = ex.weak_ablation(ex.reference_config("weak", seed))
        _weak_time[seed] = time.perf_counter() - t0
    return _weak_cache[seed]


def test_criterion_4_supervised_ordering():
    t0 = time.perf_counter()
    rows, wins = [], 0
    for seed in SEEDS:
        scores = ex.supervised_ablation(ex.reference_config("supervised", seed))
        vals = {k: s.ssim for k, s in scores.items()}
        ok = ex.table2_ordering(vals)
        wins += ok
        rows.append(f"s{seed}[{' '.join(f'{k}={v:.3f}' for k, v in vals.items())}]{'+' if ok else '-'}")
    elapsed = time.perf_counter() - t0
    record(4, wins >= 2 and elapsed < 30 * 60,
           f"ordering held on {wins}/3 seeds, {elapsed / 60:.1f} min; " + "; ".join(rows))


def test_criterion_5_weak_ordering():
    rows, wins = [], 0
    for seed in SEEDS:
        vals = {k: r.map for k, (r, _) in weak_runs(seed).items()}
        ok = ex.table3_ordering(vals)
        wins += ok
        rows.append(f"s{seed}[{' '.join(f'{k}={v:.3f}' for k, v in vals.items())}]{'+' if ok else '-'}")
    elapsed = sum(_weak_time[s] for s in SEEDS)
    record(5, wins >= 2 and elapsed < 45 * 60,
           f"ordering held on {wins}/3 seeds, {elapsed / 60:.1f} min; " + "; ".join(rows))


def test_criterion_6_firewall():
    runs = weak_runs(0)
    after_ablation = privileged_access.count
    # fresh discovery and detector fit from the trained full model, counted separately
    privileged_access.reset()
    cfg = ex.reference_config("weak", 0)
    _, st = runs["adv+feat+rank"]
    ex.fit_detector(st.nets, st.scenes, cfg, augment=True)
    after_fit = privileged_access.count
    record(6, after_ablation == 0 and after_fit == 0,
           f"privileged reads: {after_ablation} over weak training/discovery/detector (4 models), "
           f"{after_fit} over an augmented refit")


def test_criterion_7_augmentation():
    cfg = ex.reference_config("weak", 0)
    base, st = weak_runs(0)["adv+feat+rank"]
    aug = ex.weak_pipeline(st.nets, st.scenes, cfg, augment=True)
    record(7, aug.map >= base.map - 0.005,
           f"seed 0 mAP augmented {100 * aug.map:.2f} vs plain {100 * base.map:.2f} (bound -0.5 points)")


def test_criterion_8_single_object_sanity():
    cfg = ex.reference_config("weak", 0)
    res, st = weak_runs(0)["adv+feat+rank"]
    spec = replace(cfg.train.scene, mode="full", min_objects=1, max_objects=1)
    single = ex.held_out_scenes(cfg, spec, count=200)
    cl = ex.evaluate_detector(res.detector, single, cfg).corloc
    hit = ex.pseudo_gt_hit_rate(st.nets, single, cfg)
    rand = ex.random_box_corloc(single, cfg, seed=0)
    ok = cl >= 0.6 and hit >= 0.6 and cl >= 3 * rand
    record(8, ok, f"CorLoc {cl:.3f} (>=0.6), pseudo-GT IoU>0.5 rate {hit:.3f} (>=0.6), "
                  f"random-box CorLoc {rand:.3f} (need <= {cl / 3:.3f})")


# -- 9. determinism --------------------------------------------------------------------

def test_criterion_9_byte_identical_reruns(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[training]\nsteps = 20\nbatch_size = 4\nn_train_scenes = 24\npretrain_steps = 80\n"
                   "[detector]\nsteps = 40\n[evaluation]\nn_test_scenes = 10\n")
    flows = {
        "data": ["gen-data", "--count", 24],
        "wdata": ["gen-data", "--count", 24, "--mode", "weak"],
        "test": ["gen-data", "--count", 10, "--seed", 9],
        "pre": ["pretrain-encoder", "--data", "{}/wdata"],
        "sup": ["train", "--data", "{}/data"],
        "weak": ["train", "--mode", "weak", "--data", "{}/wdata"],
        "syn": ["synth", "--ckpt", "{}/sup/model.ckpt", "--data", "{}/test", "--scene", 0, "--category", None],
        "disc": ["discover", "--ckpt", "{}/weak/model.ckpt", "--data", "{}/wdata"],
        "det": ["train-detector", "--ckpt", "{}/weak/model.ckpt", "--data", "{}/wdata", "--augment"],
        "ev": ["eval", "--detector", "{}/det/detector.ckpt", "--data", "{}/test"],
    }
    for run in ("a", "b"):
        root = tmp_path / run
        for name, argv in flows.items():
            args = []
            for a in argv:
                if a is None:
                    a = (root / "test/scene_00000.labels").read_text().split()[0]
                args.append(str(a).format(root))
            assert main(args + ["--config", str(cfg), "--out", str(root / name)]) == 0, name
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    listed_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    kinds = {f.suffix for f in files}
    ok = all(same) and files == listed_b and {".ckpt", ".jsonl", ".txt"} <= kinds
    record(9, ok, f"{sum(same)}/{len(files)} files byte-identical across two full CLI runs "
                  f"(checkpoints, logs, eval tables)")
