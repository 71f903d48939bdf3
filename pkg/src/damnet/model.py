"""Full network, deterministic mode and checkpoint archives."""

from __future__ import annotations

import io
import os
import random
import zipfile

import numpy as np
import torch
import torch.nn as nn

from . import config as C
from .backbone import Backbone
from .fusion_head import TDFHead


class DAMNet(nn.Module):
    """Siamese backbone plus temporal-differential fusion head.

    Takes ``pre`` and ``post`` as ``[B, C, H, W]`` and returns flood
    probabilities ``[B, 1, H, W]``.
    """

    def __init__(self, cfg: C.ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or C.ModelConfig()
        self.backbone = Backbone(self.cfg)
        self.head = TDFHead(self.cfg)

    def forward(self, pre, post):
        feats_pre, feats_post, t_sem = self.backbone(pre, post)
        return self.head(feats_pre, feats_post, t_sem)

    @torch.no_grad()
    def predict(self, pre, post):
        was = self.training
        self.eval()
        try:
            return self(pre, post)
        finally:
            self.train(was)


def set_deterministic(seed: int = 0, enabled: bool = True):
    """Seed every RNG and, when ``enabled``, forbid nondeterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)
    if hasattr(torch.backends, "cudnn"):
        torch.backends.cudnn.deterministic = enabled
        torch.backends.cudnn.benchmark = not enabled


def build(cfg: C.ModelConfig, seed: int = 0, dtype=torch.float32) -> DAMNet:
    torch.manual_seed(seed)
    return DAMNet(cfg).to(dtype)


def _put(zf: zipfile.ZipFile, name: str, data: bytes):
    # fixed timestamp so identical models give identical bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zf.compression
    zf.writestr(info, data)


def save_checkpoint(path: str | os.PathLike, model: DAMNet, extra: dict | None = None):
    """Write ``config.txt`` plus named arrays (``params.npz``) into one zip archive."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as npz:
        for k, v in model.state_dict().items():
            arr = io.BytesIO()
            np.lib.format.write_array(arr, v.detach().cpu().numpy(), allow_pickle=False)
            _put(npz, f"{k}.npy", arr.getvalue())
    text = C.dumps(model.cfg)
    if extra:
        text += "".join(f"meta.{k} = {C._encode(v)}\n" for k, v in extra.items())
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        _put(zf, "config.txt", text.encode())
        _put(zf, "params.npz", buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple[DAMNet, dict]:
    with zipfile.ZipFile(path) as zf:
        flat = C.parse_flat(zf.read("config.txt").decode())
        arrays = np.load(io.BytesIO(zf.read("params.npz")))
        state = {k: torch.from_numpy(arrays[k].copy()) for k in arrays.files}
    meta = {k[5:]: v for k, v in flat.items() if k.startswith("meta.")}
    cfg = C.from_flat(C.ModelConfig, {k: v for k, v in flat.items() if not k.startswith("meta.")})
    model = DAMNet(cfg)
    dtype = next(iter(state.values())).dtype if state else torch.float32
    if dtype.is_floating_point:
        model = model.to(dtype)
    model.load_state_dict(state)
    return model, meta
