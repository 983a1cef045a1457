"""UltraSeg building blocks.

EnhancedDilatedBlock
    channels split in three groups, depthwise 3x3 at dilation 1/2/3,
    concatenated, fused by a pointwise conv, then BN, GELU and a residual.
PredictGatedFusion
    x_out = x1' + x2 + alpha * sigmoid(P_region) * x2 + beta * P_boundary * x2,
    with x1' a pointwise+BN calibration of the decoder feature and alpha,
    beta learnable scalars.
AttentionGuidedFusion
    softmax over two logit maps yields complementary masks that blend a
    projected stage-3 feature with the stage-4 feature.
SimpleSpatialAttention
    (1 - alpha) * x + alpha * sigmoid(mean_c(x)) * x.
GroupShuffleAttention
    grouped sigmoid spatial gates followed by a channel shuffle.
"""

from __future__ import annotations

from . import functional as F
from .autodiff import mul, one_minus
from .errors import DivisibilityError, ShapeError
from .modules import BatchNorm, Module, conv3x3, depthwise3x3, pointwise

SCALAR = (1, 1, 1, 1)


class EnhancedDilatedBlock(Module):
    DILATIONS = (1, 2, 3)

    def __init__(self, channels, scale=1, expansion=1, residual=True):
        super().__init__()
        if channels % 3:
            raise DivisibilityError(f"EDB needs channels divisible by 3, got {channels}")
        self.channels = channels
        self.expansion = expansion
        self.residual = residual
        # BN + GELU are skipped when True; the impulse-response tests use this
        self.linearized = False
        inner = channels * expansion
        self.expand = self.child("expand", pointwise(channels, inner, bias=False, scale=scale)) if expansion > 1 else None
        width = inner // 3
        self.branches = [
            self.child(f"branch{d}", depthwise3x3(width, dilation=d, bias=False, scale=scale))
            for d in self.DILATIONS
        ]
        self.fuse = self.child("fuse", pointwise(inner, channels, bias=False, scale=scale))
        self.bn = self.child("bn", BatchNorm(channels))

    @property
    def branch_width(self):
        return self.channels * self.expansion // 3

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"EDB expects {self.channels} channels, got {x.shape[1]}")
        h = self.expand(x) if self.expand is not None else x
        parts = F.split_channels(h, 3)
        y = F.concat_channels([conv(p) for conv, p in zip(self.branches, parts)])
        y = self.fuse(y)
        if not self.linearized:
            y = F.gelu(self.bn(y))
        return y + x if self.residual else y


def pgf_fuse(x1p, x2, p_region, p_boundary, alpha, beta):
    """Fusion formula on an already-calibrated decoder feature ``x1p``."""
    if x1p.shape != x2.shape:
        raise ShapeError(f"PGF: calibrated decoder feature {x1p.shape} != skip feature {x2.shape}")
    n, _, h, w = x2.shape
    for name, p in (("p_region", p_region), ("p_boundary", p_boundary)):
        if p.shape != (n, 1, h, w):
            raise ShapeError(f"PGF: {name} shape {p.shape} must be {(n, 1, h, w)}")
    region_term = mul(mul(x2, F.sigmoid(p_region)), alpha)
    boundary_term = mul(mul(x2, p_boundary), beta)
    return x1p + x2 + region_term + boundary_term


class PredictGatedFusion(Module):
    def __init__(self, channels, scale=1, alpha=0.5, beta=0.5):
        super().__init__()
        self.adaptor = self.child("adaptor", pointwise(channels, channels, bias=False, scale=scale))
        self.adaptor_bn = self.child("adaptor_bn", BatchNorm(channels))
        self.alpha = self.param("region_weight", SCALAR, "const", value=alpha)
        self.beta = self.param("boundary_weight", SCALAR, "const", value=beta)

    def adapt(self, x1):
        return self.adaptor_bn(self.adaptor(x1))

    def forward(self, x1, x2, p_region, p_boundary):
        if x1.shape[2:] != x2.shape[2:]:
            raise ShapeError(f"PGF: spatial mismatch {x1.shape} vs {x2.shape}")
        return pgf_fuse(self.adapt(x1), x2, p_region, p_boundary, self.alpha, self.beta)


class AttentionGuidedFusion(Module):
    """Cross-stage fusion of stage 3 (2x resolution) into stage 4.

    Stage 3 is average-pooled to stage 4's grid and projected to its width;
    pooling first is equivalent to projecting first (both are linear and the
    pooling weights sum to one) and costs a quarter of the MACs.
    """

    def __init__(self, stage3_channels=48, stage4_channels=64, mid=16, scale=16):
        super().__init__()
        self.c3, self.c4 = stage3_channels, stage4_channels
        self.project = self.child("project", pointwise(stage3_channels, stage4_channels, scale=scale))
        self.trunk_conv = self.child("trunk_conv", conv3x3(2 * stage4_channels, mid, bias=False, scale=scale))
        self.trunk_bn = self.child("trunk_bn", BatchNorm(mid))
        self.trunk_out = self.child("trunk_out", pointwise(mid, 2, scale=scale))

    def masks(self, s3p, stage4):
        logits = self.trunk_out(F.gelu(self.trunk_bn(self.trunk_conv(F.concat_channels([s3p, stage4])))))
        probs = F.softmax_channels(logits)
        return F.channel_slice(probs, 0, 1), F.channel_slice(probs, 1, 2)

    def forward(self, stage3, stage4, return_masks=False):
        if stage3.shape[1] != self.c3 or stage4.shape[1] != self.c4:
            raise ShapeError(
                f"AGF expects ({self.c3}, {self.c4}) channels, got ({stage3.shape[1]}, {stage4.shape[1]})"
            )
        if stage3.shape[2] != 2 * stage4.shape[2] or stage3.shape[3] != 2 * stage4.shape[3]:
            raise ShapeError(f"AGF: stage 3 {stage3.shape} must be twice stage 4 {stage4.shape} spatially")
        s3p = self.project(F.avgpool2(stage3))
        a, b = self.masks(s3p, stage4)
        out = mul(s3p, a) + mul(stage4, b)
        return (out, a, b) if return_masks else out


class SimpleSpatialAttention(Module):
    def __init__(self, alpha=0.3):
        super().__init__()
        self.alpha = self.param("residual_weight", SCALAR, "const", value=alpha)

    def forward(self, x):
        gate = F.sigmoid(F.channel_mean(x))
        attended = mul(x, gate)
        return mul(x, one_minus(self.alpha)) + mul(attended, self.alpha)


class GroupShuffleAttention(Module):
    def __init__(self, channels, groups=4, scale=1):
        super().__init__()
        if channels % groups:
            raise DivisibilityError(f"GSA: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        # one depthwise conv over all channels == a depthwise gate per group
        self.gate = self.child("gate", depthwise3x3(channels, bias=True, scale=scale))

    def forward(self, x):
        if x.shape[1] % self.groups:
            raise DivisibilityError(f"GSA: {x.shape[1]} channels not divisible by {self.groups} groups")
        gated = mul(x, F.sigmoid(self.gate(x)))
        return F.channel_shuffle(gated, self.groups)


class PredictionHead(Module):
    """Pointwise C -> 1 logit map; ``kind`` is "region" or "boundary"."""

    def __init__(self, channels, kind="region", scale=1):
        super().__init__()
        if kind not in ("region", "boundary"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.conv = self.child("conv", pointwise(channels, 1, scale=scale))

    def forward(self, x):
        return self.conv(x)
