"""Bi-temporal sample container, tiling/mosaicking and geometric augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .labeling import DataError


@dataclass
class MultiTemporalPair:
    """Co-registered pre/post rasters ``[H, W, C]`` and an optional ``[H, W]`` label."""

    pre: np.ndarray
    post: np.ndarray
    label: np.ndarray | None = None

    def __post_init__(self):
        self.pre = _hwc(self.pre)
        self.post = _hwc(self.post)
        if self.pre.shape != self.post.shape:
            raise DataError(f"pre {self.pre.shape} and post {self.post.shape} are not co-registered")
        if self.label is not None:
            self.label = np.asarray(self.label)
            if self.label.shape != self.pre.shape[:2]:
                raise DataError(f"label {self.label.shape} does not match image {self.pre.shape[:2]}")
            if not np.isin(self.label, (0, 1)).all():
                raise DataError("label values must be 0/1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pre.shape[:2]

    def check_divisible(self, n: int = 32):
        h, w = self.shape
        if h % n or w % n:
            raise DataError(f"pair {h}x{w} is not divisible by {n}")

    def tensors(self, dtype=torch.float32):
        """``(pre, post)`` as ``[1, C, H, W]`` tensors."""
        f = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).to(dtype)[None]
        return f(self.pre), f(self.post)


def _hwc(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise DataError(f"expected [H, W] or [H, W, C], got shape {a.shape}")
    return a


def minmax_scale(pre: np.ndarray, post: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple[float, float]]:
    """Joint per-scene min-max scaling to [0, 1]; returns the (min, max) used."""
    pre = np.asarray(pre, np.float64)
    post = np.asarray(post, np.float64)
    lo = float(min(pre.min(), post.min()))
    hi = float(max(pre.max(), post.max()))
    span = hi - lo if hi > lo else 1.0
    return ((pre - lo) / span).astype(np.float32), ((post - lo) / span).astype(np.float32), (lo, hi)


# -- tiling --------------------------------------------------------------------

def tile_origins(h: int, w: int, size: int) -> list[tuple[int, int]]:
    if h < size or w < size:
        raise DataError(f"scene {h}x{w} is smaller than one {size}x{size} tile")
    return [(r, c) for r in range(0, h - size + 1, size) for c in range(0, w - size + 1, size)]


def tile(pair: MultiTemporalPair, size: int = 256):
    """Non-overlapping tiles, dropping right/bottom remainders.

    Returns ``[(patch, (row, col)), ...]`` in row-major order.
    """
    out = []
    for r, c in tile_origins(*pair.shape, size):
        sl = np.s_[r:r + size, c:c + size]
        out.append((MultiTemporalPair(pair.pre[sl], pair.post[sl],
                                      None if pair.label is None else pair.label[sl]), (r, c)))
    return out


def mosaic(patches, shape: tuple[int, int]) -> MultiTemporalPair:
    """Inverse of :func:`tile` for scenes that tile exactly."""
    first = patches[0][0]
    c = first.pre.shape[2]
    pre = np.zeros((*shape, c), first.pre.dtype)
    post = np.zeros_like(pre)
    label = None if first.label is None else np.zeros(shape, first.label.dtype)
    for p, (r, col) in patches:
        h, w = p.shape
        pre[r:r + h, col:col + w] = p.pre
        post[r:r + h, col:col + w] = p.post
        if label is not None:
            label[r:r + h, col:col + w] = p.label
    return MultiTemporalPair(pre, post, label)


# -- augmentation --------------------------------------------------------------

TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")


def apply_transform(a, name: str, axes=(0, 1)):
    """Apply one geometric transform over ``axes`` of a numpy array or tensor."""
    if isinstance(a, torch.Tensor):
        rot, flip = torch.rot90, lambda x, ax: torch.flip(x, (ax,))
    else:
        rot, flip = np.rot90, lambda x, ax: np.flip(x, ax)
    if name == "identity":
        return a
    if name.startswith("rot"):
        return rot(a, int(name[3:]) // 90, axes)
    if name == "hflip":
        return flip(a, axes[1])
    if name == "vflip":
        return flip(a, axes[0])
    raise ValueError(f"unknown transform {name!r}")


def draw_transform(seed) -> str:
    return TRANSFORMS[int(np.random.default_rng(seed).integers(len(TRANSFORMS)))]


def augment(sample: MultiTemporalPair, seed, name: str | None = None) -> MultiTemporalPair:
    """Apply one random (or named) transform identically to pre, post and label."""
    h, w = sample.shape
    if h != w:
        raise DataError("augmentation expects square patches")
    name = name or draw_transform(seed)
    f = lambda a: None if a is None else np.ascontiguousarray(apply_transform(a, name))
    return MultiTemporalPair(f(sample.pre), f(sample.post), f(sample.label))
