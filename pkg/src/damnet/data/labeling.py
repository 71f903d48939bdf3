"""Semi-automatic flood labels: dB threshold, morphology, pre/post differencing."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..config import LabelingConfig


class DataError(ValueError):
    """Malformed input rasters (non-finite pixels, shape mismatches, ...)."""


def linear_to_db(power: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(power, floor))


def db_to_linear(db: np.ndarray) -> np.ndarray:
    return np.power(10.0, np.asarray(db) / 10.0)


def threshold_water_mask(sar_db: np.ndarray, cfg: LabelingConfig | None = None) -> np.ndarray:
    """Water where backscatter is below the threshold.  Multi-band input uses band 0."""
    cfg = cfg or LabelingConfig()
    sar_db = np.asarray(sar_db)
    if sar_db.ndim == 3:
        sar_db = sar_db[..., 0]
    bad = ~np.isfinite(sar_db)
    if bad.any():
        raise DataError(f"{int(bad.sum())} non-finite pixels in SAR input")
    return (sar_db < cfg.threshold_db).astype(np.uint8)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def morphological_refine(mask: np.ndarray, cfg: LabelingConfig | None = None) -> np.ndarray:
    cfg = cfg or LabelingConfig()
    se = disk(cfg.morph_radius)
    out = np.asarray(mask).astype(bool)
    for op in cfg.morph_ops:
        if op == "erode":
            out = ndimage.binary_erosion(out, structure=se)
        else:
            out = ndimage.binary_dilation(out, structure=se)
    return out.astype(np.uint8)


def diff_flood_label(mask_pre: np.ndarray, mask_post: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(flood, permanent_water)``: new water, and water in both dates."""
    a = np.asarray(mask_pre).astype(bool)
    b = np.asarray(mask_post).astype(bool)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return (b & ~a).astype(np.uint8), (a & b).astype(np.uint8)


def label_pair(pre_db, post_db, cfg: LabelingConfig | None = None):
    """Full labeling chain on one co-registered dB pair; returns ``(flood, permanent)``."""
    cfg = cfg or LabelingConfig()
    if np.shape(pre_db) != np.shape(post_db):
        raise DataError(f"pre {np.shape(pre_db)} and post {np.shape(post_db)} differ")
    w_pre = morphological_refine(threshold_water_mask(pre_db, cfg), cfg)
    w_post = morphological_refine(threshold_water_mask(post_db, cfg), cfg)
    return diff_flood_label(w_pre, w_post)
