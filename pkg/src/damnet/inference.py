"""Sliding-window prediction over large scenes and flooded-area statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .config import TileScheme
from .data.labeling import DataError
from .data.pairs import MultiTemporalPair, minmax_scale


def tile_starts(length: int, tile: int, step: int) -> list[int]:
    """Window origins along one axis of an already padded extent."""
    return list(range(0, length - tile + 1, step))


def padded_length(length: int, tile: int, overlap: int) -> int:
    """Smallest extent >= ``length`` covered exactly by windows of ``tile`` at stride ``tile - overlap``."""
    step = tile - overlap
    if length <= tile:
        return tile
    return tile + -(-(length - tile) // step) * step


def _ramp(tile: int, overlap: int, lead: bool, trail: bool) -> np.ndarray:
    """1-D raised-cosine weights; ramps only on edges shared with a neighbour."""
    w = np.ones(tile)
    if overlap:
        t = (np.arange(overlap) + 0.5) / overlap
        up = 0.5 - 0.5 * np.cos(np.pi * t)
        if lead:
            w[:overlap] = up
        if trail:
            w[tile - overlap:] = up[::-1]
    return w


def _crop_window(tile: int, overlap: int, lead: bool, trail: bool) -> np.ndarray:
    """1-D 0/1 weights keeping the part of the tile nearest its own centre."""
    w = np.ones(tile)
    if lead:
        w[:overlap // 2] = 0
    if trail:
        w[tile - (overlap - overlap // 2):] = 0
    return w


def tile_weights(shape: tuple[int, int], scheme: TileScheme) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Unnormalised per-tile weight arrays over a padded extent ``shape``.

    Only meaningful for the ``feather`` and ``center-crop`` blends.
    """
    step = scheme.tile - scheme.overlap
    rows = tile_starts(shape[0], scheme.tile, step)
    cols = tile_starts(shape[1], scheme.tile, step)
    one_d = _ramp if scheme.blend == "feather" else _crop_window
    out = []
    for i, r in enumerate(rows):
        wy = one_d(scheme.tile, scheme.overlap, i > 0, i < len(rows) - 1)
        for j, c in enumerate(cols):
            wx = one_d(scheme.tile, scheme.overlap, j > 0, j < len(cols) - 1)
            out.append(((r, c), np.outer(wy, wx)))
    return out


def weight_field(shape: tuple[int, int], scheme: TileScheme) -> np.ndarray:
    """Sum of the normalised blend weights at every pixel (should be 1 everywhere)."""
    total = np.zeros(shape)
    for (r, c), w in tile_weights(shape, scheme):
        total[r:r + scheme.tile, c:c + scheme.tile] += w
    field = np.zeros(shape)
    for (r, c), w in tile_weights(shape, scheme):
        field[r:r + scheme.tile, c:c + scheme.tile] += w / total[r:r + scheme.tile, c:c + scheme.tile]
    return field


def _predict(model, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
    if hasattr(model, "predict"):
        return model.predict(pre, post)
    with torch.no_grad():
        return model(pre, post)


def map_large_scene(model, scene: MultiTemporalPair, scheme: TileScheme | None = None,
                    batch_size: int = 1) -> np.ndarray:
    """Probability map ``[H, W]`` for a scene of any size.

    The scene is reflection-padded so the windows tile it exactly, every
    window is predicted independently, the results are blended in a fixed
    order and the output is cropped back to the scene extent.  Inputs are
    passed to the model as given, so scale them first (see :func:`prepare_scene`).
    """
    scheme = scheme or TileScheme()
    h, w = scene.shape
    hp = padded_length(h, scheme.tile, scheme.overlap)
    wp = padded_length(w, scheme.tile, scheme.overlap)
    pad = ((0, hp - h), (0, wp - w), (0, 0))
    pre = np.pad(scene.pre, pad, mode="reflect" if min(h, w) > 1 else "edge")
    post = np.pad(scene.post, pad, mode="reflect" if min(h, w) > 1 else "edge")

    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).to(dtype)
    if scheme.blend == "max":
        step = scheme.tile - scheme.overlap
        windows = [((r, c), None) for r in tile_starts(hp, scheme.tile, step)
                   for c in tile_starts(wp, scheme.tile, step)]
    else:
        windows = tile_weights((hp, wp), scheme)

    t = scheme.tile
    acc = np.zeros((hp, wp))
    norm = np.zeros((hp, wp))
    if scheme.blend == "max":
        acc[:] = -np.inf
    for b in range(0, len(windows), max(1, batch_size)):
        chunk = windows[b:b + batch_size]
        x1 = torch.stack([to_t(pre[r:r + t, c:c + t]) for (r, c), _ in chunk])
        x2 = torch.stack([to_t(post[r:r + t, c:c + t]) for (r, c), _ in chunk])
        probs = _predict(model, x1, x2)[:, 0].double().numpy()
        for ((r, c), wgt), p in zip(chunk, probs):
            sl = np.s_[r:r + t, c:c + t]
            if wgt is None:
                np.maximum(acc[sl], p, out=acc[sl])
            else:
                acc[sl] += wgt * p
                norm[sl] += wgt
    out = acc if scheme.blend == "max" else acc / norm
    return out[:h, :w].astype(np.float32)


def prepare_scene(pre_db, post_db) -> tuple[MultiTemporalPair, tuple[float, float]]:
    """Joint min-max scaling of a dB scene to the network's [0, 1] input range."""
    pre_db, post_db = np.asarray(pre_db), np.asarray(post_db)
    if pre_db.shape != post_db.shape:
        raise DataError(f"pre {pre_db.shape} and post {post_db.shape} are not co-registered")
    for name, a in (("pre", pre_db), ("post", post_db)):
        bad = ~np.isfinite(a)
        if bad.any():
            raise DataError(f"{int(bad.sum())} non-finite pixels in {name} scene")
    a, b, scale = minmax_scale(pre_db, post_db)
    return MultiTemporalPair(a, b), scale


@dataclass
class AreaReport:
    flooded_pixels: int
    pixel_area_m2: float
    flooded_km2: float

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"


def area_stats(mask, pixel_area_m2: float = 100.0) -> AreaReport:
    n = int(np.count_nonzero(np.asarray(mask)))
    return AreaReport(n, float(pixel_area_m2), n * float(pixel_area_m2) / 1e6)
