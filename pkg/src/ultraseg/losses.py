"""Training objectives: BCE + soft Dice, the deep-supervised composite, feature KD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import functional as F
from .autodiff import Variable, constant, mean_all, mul, record, scale, sub
from .errors import ContractError, ShapeError

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Deep-supervision weights, listed from the coarsest level to the finest.

    ``boundary`` pairs with boundary heads at strides (16, 8, 4) and
    ``region`` with intermediate region heads at strides (16, 8, 4, 2), so
    the finest maps carry the largest weight.
    """

    boundary: tuple = (0.1, 0.2, 0.3)
    region: tuple = (0.1, 0.2, 0.3, 0.4)
    kd: float = 0.0

    def __post_init__(self):
        if len(self.boundary) != 3 or len(self.region) != 4:
            raise ValueError("need 3 boundary weights and 4 region weights")
        if self.kd < 0 or min(self.boundary) < 0 or min(self.region) < 0:
            raise ValueError("loss weights must be non-negative")


def bce_dice(logits: Variable, target, smooth=DICE_SMOOTH) -> Variable:
    """mean BCE(sigmoid(z), t) + 1 - soft Dice, as one fused op.

    BCE uses max(z, 0) - z t + log(1 + exp(-|z|)), which stays finite for
    saturated logits. Dice sums run over the whole batch.
    """
    logits = constant(logits)
    t = np.asarray(target)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_dice: target {t.shape} != logits {logits.shape}")
    z = logits.value.astype(np.float64)
    t = t.astype(np.float64)
    m = z.size
    p = expit(z)
    bce = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum() / m
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    num = 2 * inter + smooth
    value = bce + 1 - num / denom
    out = np.array(value, dtype=logits.dtype).reshape(1, 1, 1, 1)

    def fn(g):
        # d dice / dp_i = (2 t_i D - N) / D^2
        ddice = (2 * t * denom - num) / (denom * denom)
        gz = (p - t) / m - ddice * p * (1 - p)
        return ((float(g.reshape(())) * gz).astype(logits.dtype),)

    return record(out, (logits,), fn, "bce_dice")


def _level_target(pyramid, kind, stride, shape):
    table = pyramid.region if kind == "region" else pyramid.boundary
    if stride not in table:
        raise ContractError(f"ground-truth pyramid lacks a {kind} map at stride {stride}")
    tgt = table[stride]
    if tgt.shape != shape:
        raise ShapeError(f"{kind} target at stride {stride} is {tgt.shape}, head output is {shape}")
    return tgt


def total_loss(outputs, pyramid, weights: LossWeights = LossWeights(), region_strides=(2, 4, 8, 16),
               boundary_strides=(4, 8, 16)):
    """L_region + L_boundary + L_gt.

    Returns (total Variable, dict of float components). ``outputs`` lists
    its levels finest first; ``weights`` lists them coarsest first.
    """
    if outputs.region is None:
        raise ContractError("model outputs lack the final region map")
    if len(outputs.region_levels) != len(region_strides) or len(outputs.boundary_levels) != len(boundary_strides):
        raise ContractError(
            f"expected {len(region_strides)} region and {len(boundary_strides)} boundary levels, got "
            f"{len(outputs.region_levels)} and {len(outputs.boundary_levels)}")
    l_region = bce_dice(outputs.region, _level_target(pyramid, "region", 1, outputs.region.shape))
    total = l_region
    parts = {"region": float(l_region.value.reshape(()))}
    l_boundary = 0.0
    for head, stride, w in zip(outputs.boundary_levels, boundary_strides, reversed(weights.boundary)):
        term = scale(bce_dice(head, _level_target(pyramid, "boundary", stride, head.shape)), w)
        total = total + term
        l_boundary += float(term.value.reshape(()))
    l_gt = 0.0
    for head, stride, w in zip(outputs.region_levels, region_strides, reversed(weights.region)):
        term = scale(bce_dice(head, _level_target(pyramid, "region", stride, head.shape)), w)
        total = total + term
        l_gt += float(term.value.reshape(()))
    parts["boundary"] = l_boundary
    parts["gt"] = l_gt
    return total, parts


def region_only_loss(outputs, pyramid):
    """BCE + Dice on the final map; used for models without deep-supervision heads."""
    return bce_dice(outputs.region, _level_target(pyramid, "region", 1, outputs.region.shape))


def kd_feature_loss(teacher_feat, student_feat: Variable, adaptor, alpha: float) -> Variable:
    """alpha * MSE(teacher, adaptor(student)); the teacher is a constant.

    When the student map is larger than the teacher's by a power of two it
    is average-pooled down first.
    """
    teacher = np.asarray(teacher_feat.value if isinstance(teacher_feat, Variable) else teacher_feat)
    s = adaptor(constant(student_feat))
    while s.shape[2] > teacher.shape[2] and s.shape[2] % 2 == 0 and s.shape[3] % 2 == 0:
        s = F.avgpool2(s)
    if s.shape != teacher.shape:
        raise ShapeError(f"kd_feature_loss: adapted student {s.shape} cannot align with teacher {teacher.shape}")
    diff = sub(s, Variable(teacher.astype(s.dtype, copy=False)))
    return scale(mean_all(mul(diff, diff)), alpha)
