"""Optimisation loop: AdamW/SGD, milestone schedule, augmentation, best-F1 selection."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import torch

from . import metrics
from .config import TrainConfig
from .fusion_head import binarize, total_loss
from .model import DAMNet, set_deterministic
from .data.pairs import TRANSFORMS, apply_transform

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "precision", "recall", "f1", "oa", "iou", "seconds")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate in effect during ``epoch`` (0-based).

    ``step``: multiply by ``decay_factor`` once per milestone reached.
    ``linear``: interpolate linearly between the step values at consecutive
    milestones, holding the final value after the last one.
    """
    passed = sum(epoch >= m for m in cfg.decay_epochs)
    if cfg.schedule == "step" or passed == len(cfg.decay_epochs):
        return cfg.lr * cfg.decay_factor ** passed
    start = 0 if passed == 0 else cfg.decay_epochs[passed - 1]
    end = cfg.decay_epochs[passed]
    a = cfg.lr * cfg.decay_factor ** passed
    b = a * cfg.decay_factor
    return a + (b - a) * (epoch - start) / (end - start)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def best_epoch(self) -> int | None:
        """Epoch with maximal validation F1, earliest on ties; ``None`` if none scored."""
        best, best_f1 = None, -math.inf
        for r in self.records:
            f1 = r.get("f1")
            if f1 is not None and f1 > best_f1:
                best, best_f1 = r["epoch"], f1
        return best

    def to_text(self) -> str:
        rows = ["\t".join(HISTORY_COLUMNS)]
        for r in self.records:
            rows.append("\t".join("nan" if r.get(c) is None else f"{r[c]:.6g}" for c in HISTORY_COLUMNS))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainHistory":
        lines = text.strip().splitlines()
        cols = lines[0].split("\t")
        recs = []
        for line in lines[1:]:
            vals = [None if v == "nan" else float(v) for v in line.split("\t")]
            rec = dict(zip(cols, vals))
            rec["epoch"] = int(rec["epoch"])
            recs.append(rec)
        return cls(recs)


def make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def augment_batch(pre, post, label, gen: torch.Generator):
    """Draw one transform per sample and apply it to all three tensors."""
    picks = torch.randint(len(TRANSFORMS), (pre.shape[0],), generator=gen).tolist()
    out = ([], [], [])
    for i, k in enumerate(picks):
        for dst, src in zip(out, (pre, post, label)):
            dst.append(apply_transform(src[i], TRANSFORMS[k], axes=(-2, -1)))
    return tuple(torch.stack(x) for x in out)


@torch.no_grad()
def predict_batches(model: DAMNet, pre, post, batch_size: int = 8):
    was = model.training
    model.eval()
    try:
        return torch.cat([model(pre[i:i + batch_size], post[i:i + batch_size])
                          for i in range(0, pre.shape[0], batch_size)])
    finally:
        model.train(was)


def evaluate_model(model: DAMNet, pre, post, label, threshold: float = 0.5, batch_size: int = 8):
    probs = predict_batches(model, pre, post, batch_size)
    mask = binarize(probs, threshold)
    return metrics.evaluate(mask.numpy(), label.to(torch.uint8).numpy())


def train(model: DAMNet, train_data, val_data, cfg: TrainConfig, on_epoch=None):
    """Run the optimisation recipe and return ``(best_state_dict, history)``.

    ``train_data``/``val_data`` are ``(pre, post, label)`` tensors with images
    ``[N, C, H, W]`` and labels ``[N, 1, H, W]``.  ``cfg.max_steps > 0`` caps
    the total number of optimizer steps.  The returned state is the one with the
    best validation F1; with no validation data the final state is returned.
    """
    set_deterministic(cfg.seed, cfg.deterministic)
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    if cfg.epochs == 0:
        return best_state, history
    pre, post, label = train_data
    n = pre.shape[0]
    if n == 0:
        raise ValueError("empty training split")
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    best_f1 = -math.inf
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(n, generator=gen)
        losses = []
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            x1, x2, y = pre[idx], post[idx], label[idx]
            if cfg.augment:
                x1, x2, y = augment_batch(x1, x2, y, gen)
            opt.zero_grad(set_to_none=True)
            loss = total_loss(model(x1, x2), y, cfg.loss)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step}, samples {idx.tolist()}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        rec = {"epoch": epoch, "lr": lr, "train_loss": sum(losses) / len(losses)}
        if val_data is not None:
            rep = evaluate_model(model, *val_data, threshold=cfg.loss.binarize_threshold,
                                 batch_size=cfg.batch_size)
            rec.update({k: getattr(rep, k) for k in metrics.SCORES})
            f1 = rep.f1 if rep.f1 is not None else -math.inf
            if f1 > best_f1:
                best_f1 = f1
                best_state = copy.deepcopy(model.state_dict())
        rec["seconds"] = time.perf_counter() - t0
        history.records.append(rec)
        log.info("epoch %d lr %.3g loss %.4f f1 %s", epoch, lr, rec["train_loss"], rec.get("f1"))
        if on_epoch:
            on_epoch(rec)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if val_data is None or best_f1 == -math.inf:
        best_state = copy.deepcopy(model.state_dict())
    return best_state, history
