"""Temporal-differential fusion, prediction head and training losses."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, LossConfig, ModelConfig


class ZeroPreservingBatchNorm(nn.Module):
    """Batch norm without centring: ``y = gamma * x / sqrt(E[x^2] + eps)``.

    Unlike :class:`torch.nn.BatchNorm2d` it maps an all-zero input to zero in
    both train and eval mode, so identical branches yield an all-zero fused map.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.register_buffer("running_sq", torch.ones(channels))

    def forward(self, x):
        if self.training:
            sq = x.pow(2).mean(dim=(0, 2, 3))
            with torch.no_grad():
                self.running_sq.mul_(1 - self.momentum).add_(self.momentum * sq.detach())
        else:
            sq = self.running_sq
        scale = self.weight / torch.sqrt(sq + self.eps)
        return x * scale.view(1, -1, 1, 1)


class DiffConv(nn.Module):
    """Per-stage Conv_i: 3x3 conv (no bias), zero-preserving norm, ReLU."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, 3, 1, 1, bias=False)
        self.norm = ZeroPreservingBatchNorm(out_dim)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class TDFHead(nn.Module):
    """Fuse absolute branch differences, gate by the semantic token, predict.

    ``forward`` returns the per-pixel flood probability ``[B, 1, H, W]``;
    :meth:`fuse` exposes the intermediate ``F_fused`` map.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        fused = 4 * cfg.fuse_dim
        self.diff_convs = nn.ModuleList(DiffConv(d, cfg.fuse_dim) for d in cfg.dims)
        self.adjust = nn.Conv2d(fused, fused, 1, bias=False)
        if cfg.use_semantic_token:
            self.token_mlp = nn.Sequential(
                nn.Linear(cfg.dims[3], cfg.dims[3]), nn.GELU(), nn.Linear(cfg.dims[3], fused))
        else:
            self.token_mlp = None
        # hidden deconv carries no bias so a zero map stays zero until the last layer
        self.up1 = nn.ConvTranspose2d(fused, cfg.head_dim, 2, 2, bias=False)
        self.up2 = nn.ConvTranspose2d(cfg.head_dim, 1, 2, 2)

    def fuse(self, feats_pre, feats_post):
        size = feats_pre[0].shape[-2:]
        parts = []
        for conv, a, b in zip(self.diff_convs, feats_pre, feats_post):
            d = conv(torch.abs(a - b))
            if d.shape[-2:] != size:
                d = F.interpolate(d, size=size, mode="bilinear", align_corners=False)
            parts.append(d)
        return torch.cat(parts, dim=1)

    def gate(self, t_sem):
        g = torch.sigmoid(self.token_mlp(t_sem))
        if g.shape[-1] != self.adjust.out_channels:
            raise ConfigError(
                f"token gate has {g.shape[-1]} channels, Conv1x1 gives {self.adjust.out_channels}")
        return g

    def forward(self, feats_pre, feats_post, t_sem=None):
        enhanced = self.adjust(self.fuse(feats_pre, feats_post))
        if self.token_mlp is not None:
            if t_sem is None:
                raise ValueError("semantic token required by this head")
            enhanced = enhanced * self.gate(t_sem)[:, :, None, None]
        logits = self.up2(F.relu(self.up1(enhanced)))
        return torch.sigmoid(logits)


def _check_labels(label: torch.Tensor):
    bad = ~((label == 0) | (label == 1))
    if bool(bad.any()):
        raise ValueError(f"labels must be 0/1, found {int(bad.sum())} other values")


def contrastive_loss(probs, label, cfg: LossConfig | None = None):
    """Per-pixel margin loss, averaged over pixels.

    ``standard_hinge``: ``0.5 * [(1-y) p^2 + y max(m-p, 0)^2]``.
    ``paper_literal`` keeps the printed ``max(p-m, 0)`` change term, which is
    identically zero for ``m = 1`` and probabilities in [0, 1].
    """
    cfg = cfg or LossConfig()
    if probs.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(label.shape)}")
    _check_labels(label)
    y = label.to(probs.dtype)
    if cfg.contrastive_form == "paper_literal":
        pos = torch.clamp(probs - cfg.margin, min=0) ** 2
    else:
        pos = torch.clamp(cfg.margin - probs, min=0) ** 2
    return (0.5 * ((1 - y) * probs ** 2 + y * pos)).mean()


def dice_loss(probs, label, smooth: float = 1.0):
    """Soft Dice loss ``1 - (2 sum(p y) + s) / (sum p + sum y + s)``."""
    if probs.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(label.shape)}")
    _check_labels(label)
    y = label.to(probs.dtype)
    inter = (probs * y).sum()
    return 1 - (2 * inter + smooth) / (probs.sum() + y.sum() + smooth)


def total_loss(probs, label, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    return contrastive_loss(probs, label, cfg) + cfg.lam * dice_loss(probs, label, cfg.dice_smooth)


def binarize(probs, threshold: float = 0.5):
    """Flood mask: 1 where ``probs >= threshold``; works on tensors and arrays."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    out = probs >= threshold
    return out.to(torch.uint8) if isinstance(out, torch.Tensor) else out.astype("uint8")
