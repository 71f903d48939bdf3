"""Finite-difference verification of backprop through the whole network.

Runs in float64 with the model in eval mode (batch-norm layers use running
statistics), so the loss is a fixed function of the parameters that is smooth
except at the ``|pre - post|`` and ReLU kinks of the fusion head.  A sample
whose +/- step flips the sign of any kink argument is not a differentiable
point; it is redrawn and counted in ``skipped``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import LossConfig, ModelConfig
from .fusion_head import total_loss
from .model import DAMNet

GROUP_PREFIXES = tuple(
    [f"backbone.stages.{i}.{part}" for i in range(4) for part in ("twfe", "refine", "ctca", "tace", "token")]
    + ["backbone.class_token", "head.diff_convs", "head.adjust", "head.token_mlp", "head.up"])


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict = field(default_factory=dict)
    n_checked: int = 0
    skipped: int = 0
    seconds: float = 0.0
    tolerance: float = 1e-3
    kink_margin: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_text(self) -> str:
        lines = [f"{g:<28} n={n:<4d} max_rel_err={e:.3e}" for g, (n, e) in self.per_group.items()]
        lines.append(f"overall max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:g} "
                     f"checked={self.n_checked} skipped_at_kinks={self.skipped} "
                     f"kink_margin={self.kink_margin:.1e} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def group_of(name: str) -> str:
    for p in GROUP_PREFIXES:
        if name.startswith(p):
            return p
    return name.rsplit(".", 1)[0]


def rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(cfg: ModelConfig | None = None, size: int = 32, batch: int = 2, samples: int = 200,
              step: float = 1e-6, floor: float = 1e-6, tolerance: float = 1e-3, seed: int = 0,
              loss_cfg: LossConfig | None = None, candidates: int = 16) -> GradCheckReport:
    """Compare autograd gradients of ``total_loss`` with central differences.

    ``samples`` parameters are drawn per group (all of them when a group is
    smaller).  The relative error denominator is floored at ``floor`` so
    gradients that are numerically zero are compared absolutely.  Of
    ``candidates`` random input draws the one whose kink arguments stay
    furthest from zero is used, which keeps redrawn samples rare.
    """
    t0 = time.perf_counter()
    cfg = cfg or ModelConfig.tiny()
    torch.manual_seed(seed)
    model = DAMNet(cfg).double().eval()
    _randomize_norm_stats(model, seed)
    g = torch.Generator().manual_seed(seed + 1)
    best = -1.0
    for _ in range(max(1, candidates)):
        a = torch.rand(batch, cfg.in_channels, size, size, generator=g, dtype=torch.float64)
        b = torch.rand(batch, cfg.in_channels, size, size, generator=g, dtype=torch.float64)
        with torch.no_grad():
            margin = kink_args(model.head, *model.backbone(a, b)).abs().min().item()
        if margin > best:
            best, pre, post = margin, a, b
    label = (torch.rand(batch, 1, size, size, generator=g, dtype=torch.float64) > 0.6).double()
    loss_cfg = loss_cfg or LossConfig()

    def loss_fn():
        return total_loss(model(pre, post), label, loss_cfg)

    def loss_and_kinks():
        fp, fq, t_sem = model.backbone(pre, post)
        probs = model.head(fp, fq, t_sem)
        return total_loss(probs, label, loss_cfg).item(), kink_args(model.head, fp, fq, t_sem).sign()

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    grads = {k: p.grad.detach().clone() for k, p in params.items() if p.grad is not None}

    groups: dict[str, list] = {}
    for name, p in params.items():
        if name in grads:
            groups.setdefault(group_of(name), []).extend((name, i) for i in range(p.numel()))

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tolerance=tolerance, kink_margin=best)
    with torch.no_grad():
        for gname, members in groups.items():
            want = min(samples, len(members))
            order = rng.permutation(len(members))
            worst, done = 0.0, 0
            for k in order:
                if done == want:
                    break
                name, i = members[k]
                flat = params[name].view(-1)
                orig = flat[i].item()
                flat[i] = orig + step
                up, s_up = loss_and_kinks()
                flat[i] = orig - step
                down, s_down = loss_and_kinks()
                flat[i] = orig
                if not torch.equal(s_up, s_down):
                    report.skipped += 1
                    continue
                numeric = (up - down) / (2 * step)
                analytic = grads[name].view(-1)[i].item()
                worst = max(worst, rel_error(analytic, numeric, floor))
                done += 1
            report.per_group[gname] = (done, worst)
            report.n_checked += done
            report.max_rel_error = max(report.max_rel_error, worst)
    report.seconds = time.perf_counter() - t0
    return report


def kink_args(head, feats_pre, feats_post, t_sem) -> torch.Tensor:
    """Every value that passes through ``abs`` or ``relu`` in the head, flattened."""
    parts = []
    for conv, a, b in zip(head.diff_convs, feats_pre, feats_post):
        d = a - b
        parts += [d.flatten(), conv.norm(conv.conv(d.abs())).flatten()]
    fused = head.fuse(feats_pre, feats_post)
    enhanced = head.adjust(fused)
    if head.token_mlp is not None:
        enhanced = enhanced * head.gate(t_sem)[:, :, None, None]
    parts.append(head.up1(enhanced).flatten())
    return torch.cat(parts)


def _randomize_norm_stats(model, seed):
    """Give batch-norm buffers non-trivial values so they are exercised."""
    g = torch.Generator().manual_seed(seed + 2)
    for name, buf in model.named_buffers():
        if name.endswith(("running_mean",)):
            buf.copy_(0.1 * torch.randn(buf.shape, generator=g, dtype=buf.dtype))
        elif name.endswith(("running_var", "running_sq")):
            buf.copy_(0.5 + torch.rand(buf.shape, generator=g, dtype=buf.dtype))
