"""Overlap and distance metrics for binary masks.

Conventions: both masks empty gives dice = iou = 1 and hd95 = 0; exactly one
empty gives dice = iou = 0 and an undefined hd95 (``None``). HD95 uses every
foreground pixel, unit spacing, and the inclusive linearly-interpolated
95th percentile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import PairingError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def binarize(prob, threshold=0.5):
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice(pred, gt) -> float:
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(pred, gt) -> float:
    c = confusion(pred, gt)
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def percentile95(values) -> float:
    """Inclusive linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    pos = 0.95 * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


def _as_2d(mask):
    m = np.asarray(mask)
    while m.ndim > 2:
        if m.shape[0] != 1:
            raise ShapeError(f"hd95 expects a single 2-D mask, got shape {np.asarray(mask).shape}")
        m = m[0]
    return m


def hd95(pred, gt):
    """95th percentile of the pooled directed nearest-neighbour distances.

    Distances come from exact Euclidean distance transforms of each mask,
    sampled at the other mask's foreground.
    """
    pred, gt = _pair(_as_2d(pred), _as_2d(gt))
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return None
    to_gt = np.sqrt(kernels.edt_sq(gt)[pred])
    to_pred = np.sqrt(kernels.edt_sq(pred)[gt])
    return percentile95(np.concatenate([to_gt, to_pred]))


def hd95_bruteforce(pred, gt):
    """O(|X| |Y|) reference for ``hd95``."""
    pred, gt = _pair(_as_2d(pred), _as_2d(gt))
    xs, ys = np.argwhere(pred).astype(np.float64), np.argwhere(gt).astype(np.float64)
    if len(xs) == 0 and len(ys) == 0:
        return 0.0
    if len(xs) == 0 or len(ys) == 0:
        return None
    d2 = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(-1)
    return percentile95(np.concatenate([np.sqrt(d2.min(axis=1)), np.sqrt(d2.min(axis=0))]))


@dataclass
class SampleMetrics:
    id: str
    dice: float
    iou: float
    hd95: float | None
    confusion: ConfusionCounts
    tags: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "id": self.id, "dice": self.dice, "iou": self.iou, "hd95": self.hd95,
            "tp": self.confusion.tp, "fp": self.confusion.fp, "fn": self.confusion.fn, "tn": self.confusion.tn,
            "tags": dict(self.tags),
        }


def _aggregate(samples):
    defined = [s.hd95 for s in samples if s.hd95 is not None]
    return {
        "count": len(samples),
        "mean_dice": float(np.mean([s.dice for s in samples])) if samples else None,
        "mean_iou": float(np.mean([s.iou for s in samples])) if samples else None,
        "mean_hd95": float(np.mean(defined)) if defined else None,
        "hd95_undefined": len(samples) - len(defined),
    }


@dataclass
class MetricsReport:
    samples: list

    def __post_init__(self):
        self.samples = sorted(self.samples, key=lambda s: s.id)

    @property
    def mean_dice(self):
        return _aggregate(self.samples)["mean_dice"]

    @property
    def mean_iou(self):
        return _aggregate(self.samples)["mean_iou"]

    @property
    def mean_hd95(self):
        return _aggregate(self.samples)["mean_hd95"]

    @property
    def hd95_undefined(self):
        return _aggregate(self.samples)["hd95_undefined"]

    def by_tag(self):
        """Aggregates per tag value, keyed by tag name ("center", "modality")."""
        out = {}
        for s in self.samples:
            for key, value in s.tags.items():
                if value in (None, "", "-"):
                    continue
                out.setdefault(key, {}).setdefault(value, []).append(s)
        return {k: {v: _aggregate(group) for v, group in sorted(groups.items())} for k, groups in sorted(out.items())}

    def to_dict(self):
        d = {"aggregate": _aggregate(self.samples), "samples": [s.to_dict() for s in self.samples]}
        tags = self.by_tag()
        if tags:
            d["by_tag"] = tags
        return d


def sample_metrics(sample_id, pred, gt, tags=None) -> SampleMetrics:
    pred, gt = _pair(pred, gt)
    return SampleMetrics(sample_id, dice(pred, gt), iou(pred, gt), hd95(pred, gt), confusion(pred, gt), dict(tags or {}))


def evaluate(predictions: dict, ground_truth: dict, tags: dict | None = None, threshold=0.5) -> MetricsReport:
    """Score ``{id: probability or binary mask}`` against ``{id: binary mask}``.

    Inputs with values outside {0, 1} are binarized at ``threshold``.
    """
    missing = sorted(set(predictions) ^ set(ground_truth))
    if missing:
        raise PairingError(missing[0], "present on only one side")
    tags = tags or {}
    samples = []
    for sid in predictions:
        pred = np.asarray(predictions[sid])
        if pred.dtype != bool and not np.isin(pred, (0, 1)).all():
            pred = binarize(pred, threshold)
        samples.append(sample_metrics(sid, pred, ground_truth[sid], tags.get(sid)))
    return MetricsReport(samples)
