"""Siamese four-stage backbone: TWFE, CTCA and TACE blocks.

Feature maps are NCHW tensors; token sequences are ``[B, N, D]`` with
``N = h * w`` in row-major grid order.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig, StageConfig


def i2t(x: torch.Tensor) -> torch.Tensor:
    """Image2Tokens: ``[B, C, h, w] -> [B, h*w, C]``."""
    return x.flatten(2).transpose(1, 2)


def t2i(tokens: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Tokens2Image, the exact inverse of :func:`i2t`."""
    b, n, d = tokens.shape
    h, w = grid
    if n != h * w:
        raise ValueError(f"{n} tokens do not fill a {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(b, d, h, w)


def conv_out(size: int, kernel: int, stride: int, pad: int, dilation: int = 1) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


class OverlapEmbed(nn.Module):
    """Overlapping embedding layer (strided convolution with k > s).

    With ``use_oel=False`` this degrades to a non-overlapping patch split of
    the same stride, which is the ablation baseline.
    """

    def __init__(self, cfg: StageConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.use_oel:
            k, s, p = cfg.oel_kernel, cfg.oel_stride, cfg.oel_pad
        else:
            k, s, p = cfg.oel_stride, cfg.oel_stride, 0
        self.kernel, self.stride, self.pad = k, s, p
        self.proj = nn.Conv2d(cfg.in_dim, cfg.dim, k, s, p)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"stage {self.cfg.index}: {h}x{w} input is not aligned to stride {self.stride}")
        return self.proj(x)


class PyramidReduction(nn.Module):
    """Parallel dilated 3x3 convolutions, concatenated and projected back to ``dim``."""

    def __init__(self, dim: int, rates=(1, 2, 3, 4), stride: int = 1):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(dim, dim, 3, stride, padding=r, dilation=r) for r in rates)
        self.fuse = nn.Conv2d(dim * len(rates), dim, 1)
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.fuse(torch.cat([b(x) for b in self.branches], dim=1)))


class MultiHeadAttention(nn.Module):
    """Pre-norm multi-head scaled dot-product attention.

    ``forward(q)`` is self-attention; ``forward(q, kv)`` takes queries and
    keys/values from different token sequences.
    """

    def __init__(self, dim: int, heads: int, keep_attn: bool = False):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.keep_attn = keep_attn
        self.attn = None

    def forward(self, q, kv=None):
        b, nq, d = q.shape
        kv = q if kv is None else kv
        nk = kv.shape[1]
        qh = self.q(self.norm_q(q)).view(b, nq, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(self.norm_kv(kv)).split(d, dim=-1)
        k = k.view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        attn = F.softmax((qh @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.keep_attn:
            self.attn = attn.detach()
        y = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(y)


class ParallelConv(nn.Module):
    """PCM: conv-BN-SiLU-conv-BN-SiLU-conv, 3x3 kernels."""

    def __init__(self, in_dim: int, dim: int, strides=(1, 1, 1)):
        super().__init__()
        s1, s2, s3 = strides
        self.strides = tuple(strides)
        self.body = nn.Sequential(
            nn.Conv2d(in_dim, dim, 3, s1, 1), nn.BatchNorm2d(dim), nn.SiLU(),
            nn.Conv2d(dim, dim, 3, s2, 1), nn.BatchNorm2d(dim), nn.SiLU(),
            nn.Conv2d(dim, dim, 3, s3, 1),
        )

    def forward(self, x):
        return self.body(x)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.net = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class TWFE(nn.Module):
    """Temporal-wise feature extraction for one stage of one branch.

    Stage 1 halves the raw image twice (OEL then a stride-2 PRM), later
    stages halve once in the OEL and keep the PRM at stride 1, so every
    stage lands on ``1/S_i`` of the image.  The PCM strides follow the same
    budget so both paths meet on one grid.
    """

    def __init__(self, cfg: StageConfig, prm_rates=(1, 2, 3, 4)):
        super().__init__()
        self.cfg = cfg
        first = cfg.index == 1
        self.oel = OverlapEmbed(cfg)
        self.prm = PyramidReduction(cfg.dim, prm_rates, stride=2 if first else 1)
        self.mha = MultiHeadAttention(cfg.dim, cfg.heads)
        self.pcm = ParallelConv(cfg.in_dim, cfg.dim, (2, 2, 1) if first else (2, 1, 1))
        self.ffn = FeedForward(cfg.dim, cfg.ffn_ratio)

    def forward(self, inp):
        f_ms = self.prm(self.oel(inp))
        local = self.pcm(inp)
        if f_ms.shape[-2:] != local.shape[-2:]:
            raise ConfigError(
                f"stage {self.cfg.index}: PCM grid {tuple(local.shape[-2:])} "
                f"!= PRM grid {tuple(f_ms.shape[-2:])}")
        tokens = i2t(f_ms)
        t = self.mha(tokens) + i2t(local) + tokens
        r = self.ffn(t) + t
        return r, tuple(f_ms.shape[-2:])


class CTCA(nn.Module):
    """Cross-temporal change attention with subtraction and cosine logits.

    ``CA = Q - softmax(Q K^T / (|Q| |K|)) V`` with per-token L2 norms, then
    ``MLP(CA) + CA``.  One instance serves both directions.
    """

    def __init__(self, dim: int, ffn_ratio: float = 4.0, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        hidden = int(round(dim * ffn_ratio))
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def attention(self, r_q, r_kv):
        """Return ``(CA, softmax weights)`` before the MLP."""
        q, k, v = self.w_q(r_q), self.w_k(r_kv), self.w_v(r_kv)
        qn = q.norm(dim=-1, keepdim=True) + self.eps
        kn = k.norm(dim=-1, keepdim=True) + self.eps
        logits = (q @ k.transpose(-2, -1)) / (qn @ kn.transpose(-2, -1))
        attn = F.softmax(logits, dim=-1)
        return q - attn @ v, attn

    def forward(self, r_q, r_kv):
        if r_q.shape != r_kv.shape:
            raise ValueError(f"CTCA needs equal shapes, got {tuple(r_q.shape)} and {tuple(r_kv.shape)}")
        ca, _ = self.attention(r_q, r_kv)
        return self.mlp(ca) + ca


class TACE(nn.Module):
    """Temporal-aware change enhancement.

    Queries come from the branch representation ``r`` (optionally with a class
    token prepended), keys and values from its change feature ``f``.  Also used
    with ``f = r`` as a plain refinement block when ``blocks_per_stage > 1``.
    """

    def __init__(self, dim: int, heads: int, ffn_ratio: float = 4.0):
        super().__init__()
        self.mha = MultiHeadAttention(dim, heads)
        self.pcm = ParallelConv(dim, dim, (1, 1, 1))
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, r, f, grid, class_token=None):
        local = i2t(self.pcm(t2i(r, grid)))
        t = self.mha(r, f) + local + r
        out = t2i(self.ffn(t) + t, grid)
        if class_token is None:
            return out, None
        # the token row is its own query, so it runs separately; prepending it to
        # ``r`` gives the same values but changes matmul shapes and rounding
        cls = class_token.expand(r.shape[0], -1, -1)
        tc = self.mha(cls, f) + cls
        return out, (self.ffn(tc) + tc)[:, 0]


class Stage(nn.Module):
    def __init__(self, cfg: StageConfig, model_cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.twfe = TWFE(cfg, model_cfg.prm_rates)
        self.refine = nn.ModuleList(
            TACE(cfg.dim, cfg.heads, cfg.ffn_ratio) for _ in range(model_cfg.blocks_per_stage - 1))
        self.use_ctca_tace = model_cfg.use_ctca_tace
        if self.use_ctca_tace:
            self.ctca = CTCA(cfg.dim, cfg.ffn_ratio, model_cfg.ctca_eps)
            self.tace = TACE(cfg.dim, cfg.heads, cfg.ffn_ratio)
        if cfg.index == 4 and model_cfg.use_semantic_token and not self.use_ctca_tace:
            # class-attention block so the token still reads the stage-4 representation
            self.token_attn = MultiHeadAttention(cfg.dim, cfg.heads)
            self.token_ffn = FeedForward(cfg.dim, cfg.ffn_ratio)

    def represent(self, inp):
        r, grid = self.twfe(inp)
        for block in self.refine:
            fm, _ = block(r, r, grid)
            r = i2t(fm)
        return r, grid

    def forward(self, inp_pre, inp_post, class_token=None):
        if class_token is not None and self.cfg.index != 4:
            raise ValueError(f"class token given to stage {self.cfg.index}; only stage 4 (pre) takes it")
        r_pre, grid = self.represent(inp_pre)
        r_post, _ = self.represent(inp_post)
        if not self.use_ctca_tace:
            t_sem = None
            if class_token is not None:
                cls = class_token.expand(r_pre.shape[0], -1, -1)
                t = self.token_attn(cls, r_pre) + cls
                t_sem = (self.token_ffn(t) + t)[:, 0]
            return t2i(r_pre, grid), t2i(r_post, grid), t_sem
        f_pre = self.ctca(r_pre, r_post)
        f_post = self.ctca(r_post, r_pre)
        e_pre, t_sem = self.tace(r_pre, f_pre, grid, class_token)
        e_post, _ = self.tace(r_post, f_post, grid)
        return e_pre, e_post, t_sem


class Backbone(nn.Module):
    """Weight-sharing Siamese backbone.

    Returns per-stage enhanced change features for both branches and the
    semantic token (``None`` when the token is ablated).  Each branch feeds its
    own previous-stage output into the next stage.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList(Stage(sc, cfg) for sc in cfg.stages())
        if cfg.use_semantic_token:
            self.class_token = nn.Parameter(torch.zeros(1, 1, cfg.dims[3]))
            nn.init.normal_(self.class_token, std=cfg.cls_init_std)
        else:
            self.register_parameter("class_token", None)

    def forward(self, pre, post):
        if pre.shape != post.shape:
            raise ValueError(f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ")
        h, w = pre.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} is not divisible by 32")
        feats_pre, feats_post = [], []
        t_sem = None
        x_pre, x_post = pre, post
        for i, stage in enumerate(self.stages):
            cls = self.class_token if i == 3 else None
            try:
                x_pre, x_post, tok = stage(x_pre, x_post, cls)
            except (ValueError, RuntimeError) as exc:
                if str(exc).startswith(f"stage {i + 1}:"):
                    raise
                raise type(exc)(f"stage {i + 1}: {exc}") from exc
            feats_pre.append(x_pre)
            feats_post.append(x_post)
            if tok is not None:
                t_sem = tok
        return feats_pre, feats_post, t_sem


def token_grid(h: int, w: int, stage: int) -> tuple[int, int]:
    s = 2 ** (stage + 1)
    return h // s, w // s


def expected_shapes(h: int, w: int, cfg: ModelConfig) -> list[tuple[int, int, int]]:
    return [(d, *token_grid(h, w, i + 1)) for i, d in enumerate(cfg.dims)]


__all__ = [
    "i2t", "t2i", "conv_out", "OverlapEmbed", "PyramidReduction", "MultiHeadAttention",
    "ParallelConv", "FeedForward", "TWFE", "CTCA", "TACE", "Stage", "Backbone",
    "expected_shapes",
]
