import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import oracles as O
from conftest import randomize_bn, seeded
from damnet.config import ConfigError, LossConfig, ModelConfig
from damnet.fusion_head import (TDFHead, ZeroPreservingBatchNorm, binarize, contrastive_loss, dice_loss,
                                total_loss)


def features(cfg, size=32, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = []
    for i, d in enumerate(cfg.dims):
        s = size // 2 ** (i + 2)
        out.append(torch.randn(batch, d, s, s, generator=g, dtype=torch.float64))
    return out


def head(cfg=None, seed=0):
    torch.manual_seed(seed)
    m = TDFHead(cfg or ModelConfig.tiny()).double().eval()
    randomize_bn(m, seed)
    return m


# -- fusion --------------------------------------------------------------------

def test_identical_features_give_zero_fused_and_constant_map():
    m = head()
    fp = features(m.cfg)
    t = seeded((1, 64), 1)
    fused = m.fuse(fp, [f.clone() for f in fp])
    assert torch.count_nonzero(fused) == 0
    probs = m(fp, [f.clone() for f in fp], t)
    assert torch.all(probs == probs.flatten()[0])
    assert torch.allclose(probs, torch.sigmoid(m.up2.bias).expand_as(probs))


def test_zero_collapse_holds_in_train_mode_too():
    m = head().train()
    fp = features(m.cfg, batch=2)
    probs = m(fp, fp, seeded((2, 64), 2))
    assert torch.all(probs == probs.flatten()[0])


def test_swap_invariance_with_fixed_token():
    m = head()
    fp, fq = features(m.cfg, seed=1), features(m.cfg, seed=2)
    t = seeded((1, 64), 3)
    assert torch.equal(m(fp, fq, t), m(fq, fp, t))


@pytest.mark.parametrize("seed", range(3))
def test_tdf_matches_scalar_oracle(seed):
    m = head(seed=seed)
    fp, fq = features(m.cfg, seed=10 + seed), features(m.cfg, seed=20 + seed)
    t = seeded((1, 64), 30 + seed)
    probs = m(fp, fq, t)
    fused = m.fuse(fp, fq)
    want_p, want_f = O.tdf([O.W(f[0]) for f in fp], [O.W(f[0]) for f in fq], O.W(t[0]), m)
    assert np.abs(O.W(fused[0]) - want_f).max() < 1e-6
    assert np.abs(O.W(probs[0]) - want_p).max() < 1e-6


def test_probabilities_in_unit_interval_and_full_resolution():
    m = head()
    probs = m(features(m.cfg, size=64, batch=2), features(m.cfg, size=64, batch=2, seed=5), seeded((2, 64)))
    assert probs.shape == (2, 1, 64, 64)
    assert probs.min() >= 0 and probs.max() <= 1


def test_gate_channel_mismatch_is_config_error():
    m = head()
    m.token_mlp[2] = torch.nn.Linear(64, 10).double()
    with pytest.raises(ConfigError, match="10 channels"):
        m.gate(seeded((1, 64)))


def test_head_without_token_needs_none():
    m = head(ModelConfig.tiny(use_semantic_token=False))
    assert m.token_mlp is None
    assert m(features(m.cfg), features(m.cfg, seed=1)).shape == (1, 1, 32, 32)
    with pytest.raises(ValueError, match="semantic token"):
        head()(features(ModelConfig.tiny()), features(ModelConfig.tiny()))


def test_zero_preserving_norm_tracks_second_moment():
    bn = ZeroPreservingBatchNorm(3, momentum=1.0)
    x = torch.randn(4, 3, 5, 5)
    y = bn(x)
    assert torch.allclose(bn.running_sq, x.pow(2).mean((0, 2, 3)))
    assert torch.allclose(y.pow(2).mean((0, 2, 3)), torch.ones(3), atol=1e-4)
    assert torch.count_nonzero(bn(torch.zeros(2, 3, 4, 4))) == 0


# -- losses --------------------------------------------------------------------

def t(vals):
    return torch.tensor(vals, dtype=torch.float64)


def test_contrastive_zero_on_perfect_predictions():
    assert contrastive_loss(torch.zeros(8, 8), torch.zeros(8, 8)).item() == 0.0
    assert contrastive_loss(torch.ones(8, 8), torch.ones(8, 8)).item() == 0.0


def test_contrastive_single_pixel_values():
    assert contrastive_loss(t([0.3]), t([1.0])).item() == pytest.approx(0.245, abs=1e-15)
    assert contrastive_loss(t([0.3]), t([0.0])).item() == pytest.approx(0.045, abs=1e-15)


def test_literal_change_term_vanishes_for_unit_margin():
    cfg = LossConfig(contrastive_form="paper_literal")
    p = seeded((16,), 4)
    assert contrastive_loss(p, torch.ones(16, dtype=torch.float64), cfg).item() == 0.0
    assert contrastive_loss(t([0.3]), t([0.0]), cfg).item() == pytest.approx(0.045)


def test_dice_identity_and_total_mismatch():
    lab = torch.zeros(64, 64, dtype=torch.float64)
    lab[10:30, 10:30] = 1
    assert dice_loss(lab, lab).item() <= 1e-3
    half = torch.zeros(64, 64, dtype=torch.float64)
    half[:, :32] = 1
    assert dice_loss(1 - half, half).item() == pytest.approx(1.0, abs=1e-3)


def test_dice_four_pixel_example():
    assert dice_loss(t([1, 1, 0, 0]), t([1, 0, 0, 0])).item() == pytest.approx(0.25, abs=1e-15)


def test_dice_empty_label_and_prediction_is_zero():
    z = torch.zeros(5, 5)
    assert dice_loss(z, z).item() == 0.0


def test_total_loss_composite_and_lambda_zero():
    assert (total_loss(t([0.3]), t([1.0])).item()
            == pytest.approx(0.245 + 0.4 * dice_loss(t([0.3]), t([1.0])).item(), abs=1e-15))
    assert 0.245 + 0.4 * 0.25 == pytest.approx(0.345, abs=1e-12)
    p, y = seeded((6, 6), 5), (seeded((6, 6), 6) > 0.5).double()
    assert total_loss(p, y, LossConfig(lam=0.0)).item() == contrastive_loss(p, y).item()
    z = torch.zeros(3, 3)
    assert total_loss(z, z).item() == 0.0


def test_losses_reject_bad_labels_and_shapes():
    with pytest.raises(ValueError, match="0/1"):
        contrastive_loss(torch.zeros(3), t([0, 0.5, 1]))
    with pytest.raises(ValueError, match="0/1"):
        dice_loss(torch.zeros(3), t([2, 0, 1]))
    with pytest.raises(ValueError, match="shape"):
        total_loss(torch.zeros(3), torch.zeros(4))


def test_loss_config_validation():
    for kw in (dict(lam=-1), dict(margin=0), dict(binarize_threshold=1.0), dict(contrastive_form="x")):
        with pytest.raises(ConfigError):
            LossConfig(**kw)


@given(st.integers(0, 10_000))
def test_total_loss_non_negative(seed):
    p = seeded((5, 5), seed)
    y = (seeded((5, 5), seed + 1) > 0.5).double()
    assert total_loss(p, y).item() >= 0


@given(st.integers(0, 10_000))
def test_dice_invariant_under_joint_permutation(seed):
    p = seeded((36,), seed)
    y = (seeded((36,), seed + 7) > 0.4).double()
    perm = torch.randperm(36, generator=torch.Generator().manual_seed(seed))
    assert dice_loss(p[perm], y[perm]).item() == pytest.approx(dice_loss(p, y).item(), abs=1e-14)


def test_total_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        # keep p away from the hinge kink at p = m = 1
        p = torch.tensor(rng.uniform(0.01, 0.99, (4, 4)), requires_grad=True)
        y = torch.tensor((rng.random((4, 4)) > 0.5).astype(float))
        total_loss(p, y).backward()
        i, j = rng.integers(0, 4, 2)
        with torch.no_grad():
            q = p.detach().clone()
            q[i, j] += h
            up = total_loss(q, y).item()
            q[i, j] -= 2 * h
            down = total_loss(q, y).item()
        num = (up - down) / (2 * h)
        ana = p.grad[i, j].item()
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    assert worst <= 1e-3


# -- binarize ------------------------------------------------------------------

def test_binarize_conventions():
    assert torch.all(binarize(torch.full((4, 4), 0.9)) == 1)
    assert torch.all(binarize(torch.full((4, 4), 0.5), 0.5) == 1)
    assert binarize(np.array([0.2, 0.7]), 0.5).tolist() == [0, 1]
    with pytest.raises(ValueError):
        binarize(torch.zeros(2), 1.0)


def test_binarize_count_matches_pixel_scan():
    p = seeded((37, 41), 9)
    count = sum(1 for v in p.flatten().tolist() if v >= 0.5)
    assert int(binarize(p, 0.5).sum()) == count
