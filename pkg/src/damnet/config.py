"""Configuration dataclasses and the flat ``key = value`` text format.

Every config in the package is a frozen-ish dataclass of scalars and tuples,
so it can be written as one line per field and read back exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

DOWNSAMPLE = (4, 8, 16, 32)

DATA_ROOT_ENV = "DAMNET_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class StageConfig:
    index: int
    downsample: int
    dim: int
    in_dim: int
    heads: int
    oel_kernel: int
    oel_stride: int
    oel_pad: int
    ffn_ratio: float = 4.0
    use_oel: bool = True

    def __post_init__(self):
        if self.index not in (1, 2, 3, 4):
            raise ConfigError(f"stage index must be 1..4, got {self.index}")
        if self.downsample != DOWNSAMPLE[self.index - 1]:
            raise ConfigError(f"stage {self.index} must downsample by {DOWNSAMPLE[self.index - 1]}")
        if self.dim % self.heads:
            raise ConfigError(f"stage {self.index}: dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class ModelConfig:
    in_channels: int = 1
    dims: tuple = (64, 128, 256, 512)
    heads: tuple = (1, 2, 4, 8)
    ffn_ratio: float = 4.0
    blocks_per_stage: int = 1
    prm_rates: tuple = (1, 2, 3, 4)
    fuse_dim: int = 64
    head_dim: int = 64
    cls_init_std: float = 0.02
    ctca_eps: float = 1e-8
    use_oel: bool = True
    use_ctca_tace: bool = True
    use_semantic_token: bool = True

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.heads = tuple(int(h) for h in self.heads)
        self.prm_rates = tuple(int(r) for r in self.prm_rates)
        if len(self.dims) != 4 or len(self.heads) != 4:
            raise ConfigError("dims and heads need exactly four entries")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigError(f"dims must be strictly increasing, got {self.dims}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        # validates divisibility per stage
        self.stages()

    def stages(self) -> list[StageConfig]:
        out = []
        for i in range(4):
            k, s, p = (7, 2, 3) if i == 0 else (3, 2, 1)
            out.append(StageConfig(
                index=i + 1, downsample=DOWNSAMPLE[i], dim=self.dims[i],
                in_dim=self.in_channels if i == 0 else self.dims[i - 1],
                heads=self.heads[i], oel_kernel=k, oel_stride=s, oel_pad=p,
                ffn_ratio=self.ffn_ratio, use_oel=self.use_oel))
        return out

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(dims=(8, 16, 32, 64), heads=(1, 1, 2, 2), fuse_dim=16, head_dim=16)
        base.update(kw)
        return cls(**base)


@dataclass
class LossConfig:
    margin: float = 1.0
    lam: float = 0.4
    contrastive_form: str = "standard_hinge"
    binarize_threshold: float = 0.5
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not 0 < self.binarize_threshold < 1:
            raise ConfigError("binarize_threshold must lie in (0, 1)")
        if self.contrastive_form not in ("standard_hinge", "paper_literal"):
            raise ConfigError(f"unknown contrastive_form {self.contrastive_form!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 8
    decay_epochs: tuple = (20, 50, 90)
    decay_factor: float = 0.1
    schedule: str = "step"
    optimizer: str = "adamw"
    momentum: float = 0.99
    augment: bool = True
    max_steps: int = 0
    seed: int = 0
    deterministic: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig(**self.loss)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if self.epochs and self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigError("every decay epoch must be < epochs")
        if self.schedule not in ("step", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class LabelingConfig:
    threshold_db: float = -18.0
    morph_radius: int = 2
    morph_ops: tuple = ("erode", "dilate")

    def __post_init__(self):
        self.morph_ops = tuple(self.morph_ops)
        if not float("-inf") < self.threshold_db < float("inf"):
            raise ConfigError("threshold_db must be finite")
        if self.morph_radius < 1:
            raise ConfigError("morph_radius must be >= 1")
        bad = [op for op in self.morph_ops if op not in ("erode", "dilate")]
        if bad:
            raise ConfigError(f"unknown morphology ops {bad}")


@dataclass
class SynthConfig:
    seed: int = 0
    n_pairs: int = 16
    size: int = 64
    speckle_looks: int = 4
    n_blobs: int = 3
    blob_scale: float = 0.18
    permanent_water_fraction: float = 0.05
    land_db: float = -8.0
    land_texture_db: float = 2.0
    water_db: float = -24.0
    smooth_radius: int = 2
    event_id: str = "synth"

    def __post_init__(self):
        if self.size <= 0 or self.size % 32:
            raise ConfigError(f"size must be a positive multiple of 32, got {self.size}")
        if self.n_pairs < 0 or self.n_blobs < 0:
            raise ConfigError("n_pairs and n_blobs must be >= 0")
        if self.speckle_looks < 0:
            raise ConfigError("speckle_looks must be >= 0 (0 disables speckle)")


@dataclass
class TileScheme:
    tile: int = 256
    overlap: int = 32
    blend: str = "feather"

    def __post_init__(self):
        if self.tile <= 0 or self.tile % 32:
            raise ConfigError("tile must be a positive multiple of 32")
        if not 0 <= self.overlap < self.tile:
            raise ConfigError("overlap must satisfy 0 <= overlap < tile")
        if self.blend not in ("feather", "max", "center-crop"):
            raise ConfigError(f"unknown blend {self.blend!r}")


# -- flat key = value documents ------------------------------------------------

def _encode(value: Any) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def to_flat(cfg: Any, prefix: str = "") -> dict[str, Any]:
    """Flatten a (possibly nested) config dataclass into dotted keys."""
    out: dict[str, Any] = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, prefix + f.name + "."))
        else:
            out[prefix + f.name] = v
    return out


def dumps(cfg: Any) -> str:
    lines = [f"{k} = {_encode(v)}" for k, v in to_flat(cfg).items()]
    return "\n".join(lines) + "\n"


def parse_flat(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def from_flat(cls, flat: Mapping[str, Any], strict: bool = True):
    """Build ``cls`` from dotted keys; unknown keys raise when ``strict``."""
    names = {f.name: f for f in fields(cls)}
    kwargs: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {}
    for key, val in flat.items():
        head, _, rest = key.partition(".")
        if head not in names:
            if strict:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            continue
        if rest:
            nested.setdefault(head, {})[rest] = val
        else:
            kwargs[head] = tuple(val) if isinstance(val, list) else val
    for head, sub in nested.items():
        sub_cls = type(getattr(cls(), head)) if _has_defaults(cls) else None
        if sub_cls is None:
            raise ConfigError(f"cannot resolve nested key {head!r}")
        kwargs[head] = from_flat(sub_cls, sub, strict)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _has_defaults(cls) -> bool:
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in fields(cls))


def load(cls, path: str | os.PathLike, overrides: Mapping[str, Any] | None = None):
    with open(path) as fh:
        flat = parse_flat(fh.read())
    flat.update(overrides or {})
    return from_flat(cls, flat)


def data_root(default: str = "data") -> str:
    return os.environ.get(DATA_ROOT_ENV, default)
