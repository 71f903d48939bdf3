"""On-disk dataset layout, manifest and in-memory loading.

Layout::

    <root>/A/<split>/<event>_<row>_<col>.tif      pre-event, dB, float32
    <root>/B/<split>/<event>_<row>_<col>.tif      post-event
    <root>/label/<split>/<event>_<row>_<col>.png   flood label, 0/255
    <root>/manifest.json
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import config as C
from .labeling import DataError, label_pair
from .pairs import MultiTemporalPair, minmax_scale, tile
from .raster import read_mask, read_raster, write_mask, write_raster
from .synth import synth_pair

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"


@dataclass
class Entry:
    pre: str
    post: str
    label: str
    split: str
    event_id: str
    scale: tuple = (0.0, 1.0)


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    patch_size: int = 256
    config: dict = field(default_factory=dict)

    def split_sizes(self) -> dict:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def validate(self):
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r}")
            for p in (e.pre, e.post, e.label):
                if seen.setdefault(p, e.split) != e.split:
                    raise DataError(f"{p} appears in splits {seen[p]} and {e.split}")

    def to_json(self) -> str:
        self.validate()
        doc = {
            "patch_size": self.patch_size,
            "split_sizes": self.split_sizes(),
            "config": self.config,
            "entries": [dict(vars(e), scale=list(e.scale)) for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        entries = [Entry(**dict(e, scale=tuple(e["scale"]))) for e in doc["entries"]]
        m = cls(entries, doc.get("patch_size", 256), doc.get("config", {}))
        m.validate()
        return m

    def save(self, root: str | os.PathLike):
        Path(root).mkdir(parents=True, exist_ok=True)
        (Path(root) / MANIFEST).write_text(self.to_json())

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        path = Path(root) / MANIFEST
        if not path.exists():
            raise DataError(f"no {MANIFEST} under {root}")
        return cls.from_json(path.read_text())


def _names(split: str, event: str, row: int, col: int) -> tuple[str, str, str]:
    stem = f"{event}_{row}_{col}"
    return (f"A/{split}/{stem}.tif", f"B/{split}/{stem}.tif", f"label/{split}/{stem}.png")


def write_pair(root, split, event, row, col, pre, post, label, geo=None) -> Entry:
    pre_p, post_p, lab_p = _names(split, event, row, col)
    root = Path(root)
    write_raster(root / pre_p, np.asarray(pre, np.float32), geo)
    write_raster(root / post_p, np.asarray(post, np.float32), geo)
    write_mask(root / lab_p, label)
    _, _, scale = minmax_scale(np.asarray(pre), np.asarray(post))
    return Entry(pre_p, post_p, lab_p, split, event, scale)


def synth_generate(cfg: C.SynthConfig, root, split: str = "train") -> DatasetManifest:
    """Write ``cfg.n_pairs`` synthetic pairs under ``root`` as ``split``.

    Entries of other splits already in the manifest are kept; the split's own
    entries are replaced.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    try:
        old = DatasetManifest.load(root)
    except DataError:
        old = DatasetManifest(patch_size=cfg.size)
    entries = [e for e in old.entries if e.split != split]
    for i in range(cfg.n_pairs):
        p = synth_pair(cfg, i)
        entries.append(write_pair(root, split, f"{cfg.event_id}{i:04d}", 0, 0,
                                  p["pre"], p["post"], p["label"]))
    old.config[f"synth.{split}"] = C.to_flat(cfg)
    m = DatasetManifest(entries, cfg.size, old.config)
    m.save(root)
    return m


def add_scene(root, pre_db, post_db, split: str, event: str, size: int = 256,
              label=None, labeling: C.LabelingConfig | None = None, geo=None) -> DatasetManifest:
    """Tile one co-registered scene into the layout and append it to the manifest.

    When ``label`` is ``None`` it is derived with the threshold/morphology chain.
    """
    if label is None:
        label, _ = label_pair(pre_db, post_db, labeling)
    pair = MultiTemporalPair(pre_db, post_db, label)
    root = Path(root)
    try:
        m = DatasetManifest.load(root)
    except DataError:
        m = DatasetManifest(patch_size=size)
    if labeling is not None:
        m.config["labeling"] = C.to_flat(labeling)
    for patch, (r, c) in tile(pair, size):
        pre = patch.pre[..., 0] if patch.pre.shape[2] == 1 else patch.pre
        post = patch.post[..., 0] if patch.post.shape[2] == 1 else patch.post
        m.entries.append(write_pair(root, split, event, r, c, pre, post, patch.label, geo))
    m.save(root)
    return m


def load_split(root, split: str = "train", manifest: DatasetManifest | None = None):
    """Load a split as scaled tensors ``(pre, post, label)``; images ``[N, C, H, W]`` in [0, 1]."""
    root = Path(root)
    manifest = manifest or DatasetManifest.load(root)
    pres, posts, labels = [], [], []
    for e in manifest.entries:
        if e.split != split:
            continue
        pre, _ = read_raster(root / e.pre)
        post, _ = read_raster(root / e.post)
        pre, post, _ = scale_pair(pre, post, e.scale)
        pres.append(pre)
        posts.append(post)
        labels.append(read_mask(root / e.label)[None])
    if not pres:
        raise DataError(f"split {split!r} is empty")
    return (torch.from_numpy(np.stack(pres)), torch.from_numpy(np.stack(posts)),
            torch.from_numpy(np.stack(labels)).float())


def scale_pair(pre, post, scale):
    lo, hi = scale
    span = hi - lo if hi > lo else 1.0
    f = lambda a: np.atleast_3d(((np.asarray(a, np.float64) - lo) / span).astype(np.float32)).transpose(2, 0, 1)
    return f(pre), f(post), scale


def arrays_to_tensors(pre_db, post_db, label):
    """Stacks ``[N, H, W]`` in dB -> per-pair min-max scaled tensors ``[N, 1, H, W]``."""
    pres, posts = [], []
    for a, b in zip(pre_db, post_db):
        sa, sb, _ = minmax_scale(a, b)
        pres.append(sa)
        posts.append(sb)
    t = lambda x: torch.from_numpy(np.stack(x)[:, None].astype(np.float32))
    return t(pres), t(posts), torch.from_numpy(np.asarray(label)[:, None].astype(np.float32))
