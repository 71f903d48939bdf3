"""Acceptance criteria, one test per criterion, each at its stated tolerance.

Every test reports a single PASS/FAIL line through the ``criterion`` fixture;
the lines are repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest
import torch

import oracles as O
from conftest import randomize_bn, seeded
from damnet import metrics as M
from damnet.backbone import CTCA, TACE
from damnet.config import LossConfig, ModelConfig, SynthConfig, TileScheme, TrainConfig
from damnet.data import MultiTemporalPair, synth_arrays
from damnet.data.dataset import arrays_to_tensors, synth_generate
from damnet.data.labeling import label_pair
from damnet.data.synth import synth_pair
from damnet.fusion_head import contrastive_loss, dice_loss, total_loss
from damnet.gradcheck import gradcheck, group_of
from damnet.inference import area_stats, map_large_scene, padded_length, weight_field
from damnet.model import build, save_checkpoint, set_deterministic
from damnet.training import evaluate_model, train
from test_data import _tree_digest
from test_fusion_head import features, head

pytestmark = pytest.mark.slow


def test_01_shape_ladder_at_full_widths(criterion):
    cfg = ModelConfig()
    m = build(cfg, seed=0).eval()
    x = torch.rand(1, 1, 256, 256, generator=torch.Generator().manual_seed(0))
    y = torch.rand(1, 1, 256, 256, generator=torch.Generator().manual_seed(1))
    seen = {}
    m.backbone.register_forward_hook(lambda mod, inp, out: seen.setdefault("out", out))
    t0 = time.perf_counter()
    with torch.no_grad():
        probs = m(x, y)
    dt = time.perf_counter() - t0
    fp, fq, t_sem = seen["out"]
    want = [(1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16), (1, 512, 8, 8)]
    got = [tuple(f.shape) for f in fp]
    ok = (got == want and [tuple(f.shape) for f in fq] == want and tuple(t_sem.shape) == (1, 512)
          and tuple(probs.shape) == (1, 1, 256, 256) and dt < 10.0)
    criterion(1, "shape ladder", ok, f"stages={got} t_sem={tuple(t_sem.shape)} forward={dt:.2f}s")


def test_02_siamese_zero_differential(criterion):
    t0 = time.perf_counter()
    set_deterministic(0)
    m = build(ModelConfig.tiny(), seed=0).eval()
    worst_feat, worst_fused = 0.0, 0.0
    with torch.no_grad():
        for i in range(20):
            x = torch.rand(1, 1, 64, 64, generator=torch.Generator().manual_seed(i))
            fp, fq, _ = m.backbone(x, x.clone())
            worst_feat = max(worst_feat, *((a - b).abs().max().item() for a, b in zip(fp, fq)))
            worst_fused = max(worst_fused, m.head.fuse(fp, fq).abs().max().item())
    dt = time.perf_counter() - t0
    ok = worst_feat == 0.0 and worst_fused == 0.0 and dt < 60
    criterion(2, "siamese zero differential", ok,
              f"max|F_pre-F_post|={worst_feat} max|fused|={worst_fused} time={dt:.1f}s")


def test_03_gradient_check(criterion):
    t0 = time.perf_counter()
    cfg = ModelConfig.tiny()
    rep = gradcheck(cfg, size=32, samples=200)
    dt = time.perf_counter() - t0
    sizes = {}
    for name, p in build(cfg).named_parameters():
        sizes[group_of(name)] = sizes.get(group_of(name), 0) + p.numel()
    # groups smaller than 200 (the class token) are checked exhaustively
    counts_ok = all(n >= min(200, sizes[g]) for g, (n, _) in rep.per_group.items())
    ok = rep.max_rel_error <= 1e-3 and counts_ok and dt < 300
    criterion(3, "gradient check", ok,
              f"max_rel_err={rep.max_rel_error:.2e} groups={len(rep.per_group)} skipped={rep.skipped} time={dt:.0f}s")


def _ctca_instance(seed):
    torch.manual_seed(seed)
    d, n = 4 + 2 * (seed % 3), 3 + seed % 4
    m = CTCA(d).double()
    return m, seeded((1, n, d), 100 + seed) - 0.5, seeded((1, n, d), 200 + seed) - 0.5


def _tace_instance(seed):
    torch.manual_seed(seed)
    d, heads = (4, 2) if seed % 2 else (6, 3)
    m = TACE(d, heads).double().eval()
    randomize_bn(m, seed)
    grid = (2, 2) if seed % 3 else (2, 3)
    n = grid[0] * grid[1]
    return m, seeded((1, n, d), 300 + seed), seeded((1, n, d), 400 + seed), grid, seeded((1, 1, d), 500 + seed)


def test_04_scalar_oracles(criterion):
    t0 = time.perf_counter()
    errs = {"ctca": 0.0, "tace": 0.0, "tdf": 0.0}
    for seed in range(10):
        m, a, b = _ctca_instance(seed)
        with torch.no_grad():
            out = m(a, b)[0].numpy()
        want, _ = O.ctca(a[0].tolist(), b[0].tolist(), m)
        errs["ctca"] = max(errs["ctca"], np.abs(out - np.array(want)).max())

        m, r, f, grid, cls = _tace_instance(seed)
        with torch.no_grad():
            enh, tok = m(r, f, grid, cls)
        want_enh, want_tok = O.tace(r[0].tolist(), f[0].tolist(), grid, m, cls[0, 0].tolist())
        errs["tace"] = max(errs["tace"], np.abs(enh[0].numpy() - want_enh).max(),
                           np.abs(tok[0].numpy() - np.array(want_tok)).max())

        h = head(seed=seed)
        fp, fq = features(h.cfg, seed=10 + seed), features(h.cfg, seed=20 + seed)
        t = seeded((1, h.cfg.dims[3]), 30 + seed)
        with torch.no_grad():
            probs, fused = h(fp, fq, t), h.fuse(fp, fq)
        want_p, want_f = O.tdf([O.W(x[0]) for x in fp], [O.W(x[0]) for x in fq], O.W(t[0]), h)
        errs["tdf"] = max(errs["tdf"], np.abs(O.W(probs[0]) - want_p).max(), np.abs(O.W(fused[0]) - want_f).max())
    dt = time.perf_counter() - t0
    ok = all(e <= 1e-6 for e in errs.values()) and dt < 60
    criterion(4, "scalar oracles", ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f" time={dt:.1f}s")


def test_05_metrics_oracle(criterion):
    t0 = time.perf_counter()
    mismatches, worst_identity = 0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        density = rng.uniform(0.0, 1.0)
        pred = (rng.random((64, 64)) < density).astype(np.uint8)
        lab = (rng.random((64, 64)) < rng.uniform(0.0, 1.0)).astype(np.uint8)
        c = M.confusion(pred, lab)
        counts = O.confusion_loop(pred, lab)
        r = M.compute(c)
        mismatches += (c.tp, c.tn, c.fp, c.fn) != counts
        mismatches += (r.precision, r.recall, r.f1, r.oa, r.iou) != O.scores_loop(*counts)
        if r.f1 is not None and r.iou is not None:
            worst_identity = max(worst_identity, abs(r.f1 - 2 * r.iou / (1 + r.iou)))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and worst_identity <= 1e-12 and dt < 60
    criterion(5, "metrics oracle", ok, f"mismatches={mismatches} max|F1-2IoU/(1+IoU)|={worst_identity:.1e}")


def _composite_pair():
    # two pixels, labels (1, 0): solve for contrastive 0.245 and dice 0.25 at once
    b = (0.72 + math.sqrt(0.72 ** 2 + 4 * 1.36 * 0.62)) / (2 * 1.36)
    a = 0.6 * b + 0.4
    return torch.tensor([a, b], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64)


def test_06_loss_fixed_points(criterion):
    worst_dice = 0.0
    for seed in range(10):
        lab = (seeded((64, 64), seed) < 0.3).double()
        assert lab.sum() >= 100
        worst_dice = max(worst_dice, dice_loss(lab, lab).item())
    z, o = torch.zeros(16, 16), torch.ones(16, 16)
    con = (contrastive_loss(z, z).item(), contrastive_loss(o, o).item())
    p, y = _composite_pair()
    cfg = LossConfig(lam=0.4, margin=1.0)
    parts = contrastive_loss(p, y, cfg).item(), dice_loss(p, y).item()
    composite = total_loss(p, y, cfg).item()
    ok = (worst_dice <= 1e-3 and con == (0.0, 0.0) and abs(parts[0] - 0.245) <= 1e-9
          and abs(parts[1] - 0.25) <= 1e-9 and abs(composite - 0.345) <= 1e-9)
    criterion(6, "loss fixed points", ok,
              f"dice(y,y)<={worst_dice:.1e} contrastive={con} L_con={parts[0]:.12f} "
              f"L_dice={parts[1]:.12f} total={composite:.12f}")


def test_07_labeling_self_consistency(criterion):
    t0 = time.perf_counter()
    worst = {}
    for looks in (0, 4):
        ious = []
        for seed in range(20):
            p = synth_pair(SynthConfig(seed=seed, speckle_looks=looks), 0)
            flood, _ = label_pair(p["pre"], p["post"])
            r = M.evaluate(flood, p["label"])
            ious.append(1.0 if r.iou is None else r.iou)
        worst[looks] = min(ious)
    dt = time.perf_counter() - t0
    ok = worst[0] >= 0.99 and worst[4] >= 0.90 and dt < 120
    criterion(7, "labeling self-consistency", ok,
              f"min IoU noise-free={worst[0]:.4f} 4-look={worst[4]:.4f} time={dt:.1f}s")


def test_08_overfit_smoke(criterion):
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    data = arrays_to_tensors(*synth_arrays(SynthConfig(seed=1, n_pairs=16, size=64)))
    cfg = TrainConfig(lr=1e-3, epochs=100, batch_size=8, decay_epochs=(), max_steps=200, seed=0)
    m = build(ModelConfig.tiny(), seed=0)
    state, hist = train(m, data, None, cfg)
    m.load_state_dict(state)
    f1 = evaluate_model(m, *data).f1 or 0.0
    dt = time.perf_counter() - t0
    ok = f1 >= 0.95 and dt <= 600
    criterion(8, "overfit smoke", ok, f"train F1={f1:.4f} epochs={len(hist.records)} time={dt:.0f}s")


def _held_out_f1(seed, use_ctca_tace, epochs):
    train_data = arrays_to_tensors(*synth_arrays(SynthConfig(seed=100 + seed, n_pairs=64, size=64)))
    test_data = arrays_to_tensors(*synth_arrays(SynthConfig(seed=200 + seed, n_pairs=16, size=64)))
    cfg = TrainConfig(lr=1e-3, epochs=epochs, batch_size=8, decay_epochs=(), seed=seed)
    m = build(ModelConfig.tiny(use_ctca_tace=use_ctca_tace), seed=seed)
    state, _ = train(m, train_data, None, cfg)
    m.load_state_dict(state)
    return evaluate_model(m, *test_data).f1 or 0.0


GEN_EPOCHS = 25


def test_09_generalization_and_ablation(criterion):
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    full = [_held_out_f1(s, True, GEN_EPOCHS) for s in range(3)]
    base = [_held_out_f1(s, False, GEN_EPOCHS) for s in range(3)]
    dt = time.perf_counter() - t0
    direction = all(f >= b - 0.02 for f, b in zip(full, base))
    ok = min(full) >= 0.80 and direction
    criterion(9, "generalization + ablation direction", ok,
              f"held-out F1 full={[round(f, 4) for f in full]} no-ctca/tace={[round(b, 4) for b in base]} "
              f"time={dt:.0f}s")


def test_10_mapping_round_trip(criterion):
    m = build(ModelConfig.tiny(), seed=1)
    rng = np.random.default_rng(0)
    scene = MultiTemporalPair(rng.random((64, 64)).astype(np.float32), rng.random((64, 64)).astype(np.float32))
    mosaic = map_large_scene(m, scene, TileScheme(64, 0))
    direct = m.predict(*scene.tensors())[0, 0].numpy()
    exact = np.array_equal(mosaic, direct)
    worst = 0.0
    for h, w, tile, overlap in [(1, 1, 32, 0), (300, 517, 256, 32), (97, 33, 32, 31), (640, 640, 256, 64),
                                (1000, 77, 64, 16)]:
        shape = (padded_length(h, tile, overlap), padded_length(w, tile, overlap))
        worst = max(worst, np.abs(weight_field(shape, TileScheme(tile, overlap, "feather")) - 1).max())
    km2 = area_stats(np.ones(10_000, np.uint8), 100.0).flooded_km2
    ok = exact and worst <= 1e-6 and km2 == 1.0
    criterion(10, "mapping round trip", ok, f"bit-exact={exact} max|sum w-1|={worst:.1e} area={km2} km2")


def _run_once(tmp, tag):
    set_deterministic(7)
    root = tmp / f"data_{tag}"
    synth_generate(SynthConfig(seed=7, n_pairs=4, size=32), root)
    data = arrays_to_tensors(*synth_arrays(SynthConfig(seed=7, n_pairs=4, size=32)))
    m = build(ModelConfig.tiny(), seed=7)
    state, hist = train(m, data, data, TrainConfig(lr=1e-3, epochs=3, batch_size=2, decay_epochs=(), seed=7))
    m.load_state_dict(state)
    save_checkpoint(tmp / f"{tag}.ckpt", m, {"seed": 7})
    return _tree_digest(root), [r["train_loss"] for r in hist.records], (tmp / f"{tag}.ckpt").read_bytes()


def test_11_determinism(criterion, tmp_path):
    a, b = _run_once(tmp_path, "a"), _run_once(tmp_path, "b")
    same = [x == y for x, y in zip(a, b)]
    criterion(11, "determinism", all(same), f"data={same[0]} trajectory={same[1]} checkpoint={same[2]}")
