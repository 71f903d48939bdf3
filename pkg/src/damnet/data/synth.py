"""Synthetic SAR-like flood pairs for desk-scale experiments.

Each pair shares one smooth land texture (in dB).  Permanent water is dark in
both dates, injected flood blobs are dark only in the post image, and every
image gets its own gamma-distributed multi-look speckle.  The label is the
injected flood region minus permanent water, exactly.  Water regions are
opened with a disk of ``smooth_radius`` so no feature is thinner than that disk.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..config import SynthConfig
from .labeling import db_to_linear, disk, linear_to_db


def _ellipse(size: int, rng: np.random.Generator, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0, size, 2)
    a = radius * rng.uniform(0.6, 1.4)
    b = radius * rng.uniform(0.6, 1.4)
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _texture(size: int, rng: np.random.Generator, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def speckle(db: np.ndarray, looks: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative intensity speckle ~ Gamma(looks, 1/looks); ``looks=0`` is a no-op."""
    if looks <= 0:
        return db
    noise = rng.gamma(shape=looks, scale=1.0 / looks, size=db.shape)
    return linear_to_db(db_to_linear(db) * noise)


def synth_pair(cfg: SynthConfig, index: int = 0) -> dict:
    """Generate one pair; returns dB images, flood label, permanent-water mask and clean images."""
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.size
    land = cfg.land_db + cfg.land_texture_db * np.clip(_texture(n, rng, n / 16), -3, 3)
    water = cfg.water_db + 0.5 * np.clip(_texture(n, rng, n / 32), -3, 3)

    permanent = np.zeros((n, n), bool)
    if cfg.permanent_water_fraction > 0:
        r = np.sqrt(cfg.permanent_water_fraction * n * n / np.pi)
        permanent = _ellipse(n, rng, r)
    flood = np.zeros((n, n), bool)
    for _ in range(cfg.n_blobs):
        flood |= _ellipse(n, rng, cfg.blob_scale * n)

    if cfg.smooth_radius > 0:
        se = disk(cfg.smooth_radius)
        permanent = ndimage.binary_opening(permanent, structure=se)
        flood = ndimage.binary_opening(flood, structure=se)

    pre_clean = np.where(permanent, water, land)
    post_clean = np.where(permanent | flood, water, land)
    pre = speckle(pre_clean, cfg.speckle_looks, rng)
    post = speckle(post_clean, cfg.speckle_looks, rng)
    return {
        "pre": pre.astype(np.float32),
        "post": post.astype(np.float32),
        "label": (flood & ~permanent).astype(np.uint8),
        "permanent": permanent.astype(np.uint8),
        "pre_clean": pre_clean.astype(np.float32),
        "post_clean": post_clean.astype(np.float32),
    }


def synth_arrays(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All pairs in memory as ``(pre, post, label)`` stacks ``[N, H, W]`` (dB, dB, 0/1)."""
    pairs = [synth_pair(cfg, i) for i in range(cfg.n_pairs)]
    if not pairs:
        z = np.zeros((0, cfg.size, cfg.size), np.float32)
        return z, z.copy(), z.astype(np.uint8)
    return tuple(np.stack([p[k] for p in pairs]) for k in ("pre", "post", "label"))
