"""Confusion counts and the five pixel scores (P, R, F1, OA, IoU)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

SCORES = ("precision", "recall", "f1", "oa", "iou")


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    """Scores in [0, 1]; ``None`` marks an undefined 0/0 ratio (see ``undefined``)."""

    precision: float | None
    recall: float | None
    f1: float | None
    oa: float | None
    iou: float | None
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    undefined: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in SCORES}
        d.update(asdict(self.counts))
        d["undefined"] = dict(self.undefined)
        return d

    def to_text(self) -> str:
        lines = []
        for k in SCORES:
            v = getattr(self, k)
            lines.append(f"{k} = {'undefined' if v is None else repr(v)}")
        lines += [f"{k} = {v}" for k, v in asdict(self.counts).items()]
        lines += [f"undefined.{k} = {why}" for k, why in self.undefined.items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def table_row(self, name: str = "model") -> str:
        def pct(v):
            return "  n/a" if v is None else f"{100 * v:5.1f}"
        return f"{name:<16} | " + " | ".join(pct(getattr(self, k)) for k in SCORES)

    @staticmethod
    def table_header() -> str:
        return f"{'Method':<16} | " + " | ".join(f"{k:>5}" for k in ("P", "R", "F1", "OA", "IoU"))


def _as_bool(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError("masks must be binary (0/1)")
        a = a.astype(bool)
    return a


def confusion(pred, label) -> ConfusionCounts:
    p, y = _as_bool(pred), _as_bool(label)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs label {y.shape}")
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    tn = int(p.size) - tp - fp - fn
    return ConfusionCounts(tp, tn, fp, fn)


def accumulate(pred, label, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    new = confusion(pred, label)
    return new if counts is None else counts + new


def _ratio(num: int, den: int, name: str, undefined: dict) -> float | None:
    if den == 0:
        undefined[name] = f"0/0 ({name} denominator is zero)"
        return None
    return num / den


def compute(counts: ConfusionCounts) -> MetricsReport:
    if counts.total <= 0:
        raise ValueError("cannot score empty confusion counts")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    why: dict = {}
    p = _ratio(tp, tp + fp, "precision", why)
    r = _ratio(tp, tp + fn, "recall", why)
    if p is None or r is None:
        f1 = None
        why["f1"] = "precision or recall undefined"
    elif p + r == 0:
        f1 = 0.0
    else:
        f1 = 2 * p * r / (p + r)
    oa = (tp + tn) / counts.total
    iou = _ratio(tp, tp + fn + fp, "iou", why)
    return MetricsReport(p, r, f1, oa, iou, counts, why)


def evaluate(pred, label) -> MetricsReport:
    return compute(confusion(pred, label))
