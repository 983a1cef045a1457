"""Model configurations, builders and complexity accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import functional as F
from .autodiff import Variable, constant
from .blocks import (
    AttentionGuidedFusion,
    EnhancedDilatedBlock,
    GroupShuffleAttention,
    PredictGatedFusion,
    PredictionHead,
    SimpleSpatialAttention,
)
from .errors import ConfigError, GeometryError, ShapeError
from .modules import BatchNorm, Conv, ConvBNAct, Module, SepConvBNAct, conv3x3, pointwise

ULTRASEG_CHANNELS = (8, 16, 48, 64, 96)
UNET_CHANNELS = {
    "unet-base": (64, 128, 256, 512, 1024),
    "unet-medium": (32, 64, 128, 256, 512),
    "unet-light": (24, 48, 96, 192, 384),
    "unet-small": (16, 32, 64, 128, 256),
    "unet-tiny": (8, 16, 32, 64, 128),
}
VARIANTS = ("ultraseg-108k", "ultraseg-130k") + tuple(UNET_CHANNELS)
# deep-supervision heads, listed shallowest -> deepest, as strides of the input
REGION_LEVELS = (2, 4, 8, 16)
BOUNDARY_LEVELS = (4, 8, 16)


@dataclass
class ModelConfig:
    family: str
    variant: str
    encoder_channels: tuple
    edb_count: int = 0
    use_agf_ssa: bool = False
    input_size: tuple = (256, 256)
    region_levels: tuple = ()
    boundary_levels: tuple = ()
    activation: str = "gelu"
    gsa_groups: int = 4
    agf_mid: int = 16
    edb_expansion: int = 1

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.region_levels = tuple(int(s) for s in self.region_levels)
        self.boundary_levels = tuple(int(s) for s in self.boundary_levels)
        self.validate()

    def validate(self):
        if self.family not in ("ultraseg", "unet"):
            raise ConfigError(f"unknown family {self.family!r}")
        if len(self.encoder_channels) != 5 or min(self.encoder_channels) < 1:
            raise ConfigError(f"need five positive encoder widths, got {self.encoder_channels}")
        if self.family == "ultraseg":
            if self.encoder_channels != ULTRASEG_CHANNELS:
                raise ConfigError(f"ultraseg encoder channels must be {list(ULTRASEG_CHANNELS)}")
            if self.use_agf_ssa != (self.variant == "ultraseg-130k"):
                raise ConfigError("AGF/SSA is enabled exactly for the 130K variant")
            if self.encoder_channels[2] * self.edb_expansion % 3:
                raise ConfigError("EDB width must be divisible by 3")
            if self.encoder_channels[4] % self.gsa_groups:
                raise ConfigError("bottleneck width must be divisible by the GSA group count")
        else:
            if self.encoder_channels not in UNET_CHANNELS.values():
                raise ConfigError(f"unet channels {self.encoder_channels} are not a named configuration")
            if self.edb_count or self.use_agf_ssa:
                raise ConfigError("unet configs take no EDB/AGF/SSA")
        h, w = self.input_size
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ConfigError(f"input size {self.input_size} must be positive multiples of 16")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.edb_count < 0 or self.agf_mid < 1 or self.edb_expansion < 1:
            raise ConfigError("edb_count, agf_mid and edb_expansion must be non-negative/positive")

    # key=value text, one field per line
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(a) for a in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw.pop(f.name)
            if f.name in ("encoder_channels", "input_size", "region_levels", "boundary_levels"):
                kwargs[f.name] = tuple(int(a) for a in v.split(",") if a)
            elif f.name == "use_agf_ssa":
                if v not in ("true", "false"):
                    raise ConfigError(f"use_agf_ssa must be true/false, got {v!r}")
                kwargs[f.name] = v == "true"
            elif f.name in ("family", "variant", "activation"):
                kwargs[f.name] = v
            else:
                try:
                    kwargs[f.name] = int(v)
                except ValueError:
                    raise ConfigError(f"{f.name} must be an integer, got {v!r}") from None
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def config_for(variant: str, input_size=(256, 256)) -> ModelConfig:
    if variant in ("ultraseg-108k", "ultraseg-130k"):
        return ModelConfig(
            family="ultraseg", variant=variant, encoder_channels=ULTRASEG_CHANNELS, edb_count=2,
            use_agf_ssa=variant == "ultraseg-130k", input_size=input_size,
            region_levels=REGION_LEVELS, boundary_levels=BOUNDARY_LEVELS,
        )
    if variant in UNET_CHANNELS:
        return ModelConfig(family="unet", variant=variant, encoder_channels=UNET_CHANNELS[variant],
                           input_size=input_size)
    raise ConfigError(f"unknown model variant {variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass
class ModelOutputs:
    region: Variable
    region_levels: list = field(default_factory=list)      # shallowest -> deepest
    boundary_levels: list = field(default_factory=list)    # shallowest -> deepest
    bottleneck: Variable | None = None


class UltraSegNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3, c4, c5 = cfg.encoder_channels
        act = cfg.activation
        self.cfg = cfg
        self.enc1 = self.child("enc1", ConvBNAct(3, c1, scale=1, act=act))
        self.enc2 = self.child("enc2", ConvBNAct(c1, c2, scale=2, act=act))
        self.enc3 = self.child("enc3", ConvBNAct(c2, c3, scale=4, act=act))
        self.edbs = [self.child(f"edb{i + 1}", EnhancedDilatedBlock(c3, scale=4, expansion=cfg.edb_expansion))
                     for i in range(cfg.edb_count)]
        self.enc4 = self.child("enc4", ConvBNAct(c3, c4, scale=8, act=act))
        self.enc5 = self.child("enc5", SepConvBNAct(c4, c5, scale=16, act=act))
        self.gsa = self.child("gsa", GroupShuffleAttention(c5, cfg.gsa_groups, scale=16))
        if cfg.use_agf_ssa:
            self.agf = self.child("agf", AttentionGuidedFusion(c3, c4, cfg.agf_mid, scale=16))
            self.agf_proj = self.child("agf_proj", pointwise(c4, c5, scale=16))
            self.ssa = self.child("ssa", SimpleSpatialAttention())
        else:
            self.agf = None
        self.dec4 = self.child("dec4", SepConvBNAct(c5, c4, scale=16, act=act))
        self.region4 = self.child("region4", PredictionHead(c4, "region", scale=16))
        self.boundary4 = self.child("boundary4", PredictionHead(c4, "boundary", scale=16))
        self.pgf4 = self.child("pgf4", PredictGatedFusion(c4, scale=16))
        self.dec3 = self.child("dec3", SepConvBNAct(c4, c3, scale=8, act=act))
        self.region3 = self.child("region3", PredictionHead(c3, "region", scale=8))
        self.boundary3 = self.child("boundary3", PredictionHead(c3, "boundary", scale=8))
        self.pgf3 = self.child("pgf3", PredictGatedFusion(c3, scale=8))
        self.dec2 = self.child("dec2", ConvBNAct(c3, c2, scale=4, act=act))
        self.region2 = self.child("region2", PredictionHead(c2, "region", scale=4))
        self.boundary2 = self.child("boundary2", PredictionHead(c2, "boundary", scale=4))
        self.pgf2 = self.child("pgf2", PredictGatedFusion(c2, scale=4))
        self.dec1 = self.child("dec1", ConvBNAct(c2, c1, scale=2, act=act))
        self.region1 = self.child("region1", PredictionHead(c1, "region", scale=2))
        self.pgf1 = self.child("pgf1", PredictGatedFusion(c1, scale=2))
        self.final = self.child("final", PredictionHead(c1, "region", scale=2))

    def forward(self, x):
        s1 = F.maxpool2(self.enc1(x))
        s2 = F.maxpool2(self.enc2(s1))
        h = self.enc3(s2)
        for edb in self.edbs:
            h = edb(h)
        s3 = F.maxpool2(h)
        s4 = F.maxpool2(self.enc4(s3))
        x5 = self.gsa(self.enc5(s4))
        if self.agf is not None:
            x5 = self.ssa(x5 + self.agf_proj(self.agf(s3, s4)))

        d = self.dec4(x5)
        r4, b4 = self.region4(d), self.boundary4(d)
        f = self.pgf4(d, s4, r4, F.sigmoid(b4))
        d = self.dec3(F.upsample_bilinear2(f))
        r3, b3 = self.region3(d), self.boundary3(d)
        f = self.pgf3(d, s3, r3, F.sigmoid(b3))
        d = self.dec2(F.upsample_bilinear2(f))
        r2, b2 = self.region2(d), self.boundary2(d)
        f = self.pgf2(d, s2, r2, F.sigmoid(b2))
        d = self.dec1(F.upsample_bilinear2(f))
        r1 = self.region1(d)
        # no boundary head at the shallowest level: reuse the level-2 map
        f = self.pgf1(d, s1, r1, F.sigmoid(F.upsample_bilinear2(b2)))
        # 1x1 head then upsample == upsample then 1x1 head (both linear)
        region = F.upsample_bilinear2(self.final(f))
        return ModelOutputs(region, [r1, r2, r3, r4], [b2, b3, b4], x5)


class DoubleConv(Module):
    def __init__(self, cin, cout, scale, act):
        super().__init__()
        self.a = self.child("a", ConvBNAct(cin, cout, scale=scale, act=act))
        self.b = self.child("b", ConvBNAct(cout, cout, scale=scale, act=act))

    def forward(self, x):
        return self.b(self.a(x))


class UNet(Module):
    """Classic U-Net from a five-entry channel list.

    Double 3x3 conv per stage, max-pool down, bilinear x2 plus a 1x1 conv
    up, skip concatenation, 1x1 region head.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.encoder_channels
        act = cfg.activation
        self.cfg = cfg
        self.encs = []
        cin = 3
        for i, c in enumerate(ch):
            self.encs.append(self.child(f"enc{i + 1}", DoubleConv(cin, c, 2 ** i, act)))
            cin = c
        self.ups, self.decs = [], []
        for i in reversed(range(len(ch) - 1)):
            self.ups.append(self.child(f"up{i + 1}", pointwise(ch[i + 1], ch[i], scale=2 ** i)))
            self.decs.append(self.child(f"dec{i + 1}", DoubleConv(2 * ch[i], ch[i], 2 ** i, act)))
        self.final = self.child("final", PredictionHead(ch[0], "region", scale=1))

    def forward(self, x):
        skips = []
        h = x
        for i, enc in enumerate(self.encs):
            h = enc(h)
            if i < len(self.encs) - 1:
                skips.append(h)
                h = F.maxpool2(h)
        bottleneck = h
        for up, dec, skip in zip(self.ups, self.decs, reversed(skips)):
            h = dec(F.concat_channels([skip, up(F.upsample_bilinear2(h))]))
        return ModelOutputs(self.final(h), bottleneck=bottleneck)


class Model:
    """A built network plus its ordered parameter registry."""

    def __init__(self, config: ModelConfig, net: Module, seed: int):
        self.config = config
        self.net = net
        self.seed = seed
        self.registry = OrderedDict(net.named_parameters())
        self.buffers = OrderedDict(net.named_buffers())

    @property
    def name(self):
        return self.config.variant

    def parameters(self):
        return list(self.registry.values())

    def train(self):
        self.net.train(True)
        return self

    def eval(self):
        self.net.train(False)
        return self

    @property
    def training(self):
        return self.net.training

    def zero_grad(self):
        for p in self.registry.values():
            p.zero_grad()

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != 3:
            raise ShapeError(f"model input must be (N, 3, H, W), got {shape}")
        h, w = shape[2:]
        if h % 16 or w % 16:
            raise GeometryError(f"input spatial size {(h, w)} must be divisible by 16")

    def forward(self, x) -> ModelOutputs:
        x = constant(x)
        self.check_input(x.shape)
        return self.net(x)

    __call__ = forward

    def conv_layers(self):
        return [(name.rstrip("."), m) for name, m in self.net.named_modules() if isinstance(m, Conv)]

    def state_arrays(self):
        """Every persisted array (parameters then BN buffers), in registry order."""
        out = OrderedDict((k, v.value) for k, v in self.registry.items())
        out.update(self.buffers)
        return out


def build(config: ModelConfig | str, seed: int = 1) -> Model:
    if isinstance(config, str):
        config = config_for(config)
    config.validate()
    net = UltraSegNet(config) if config.family == "ultraseg" else UNet(config)
    net.initialize(int(seed))
    return Model(config, net, int(seed))


# ------------------------------------------------------------ accounting

def count_params(model: Model) -> int:
    return int(sum(p.value.size for p in model.registry.values()))


def _conv_params(cin, cout, k=3, groups=1, bias=True):
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _bn_params(c):
    return 2 * c


def _ultraseg_analytic(cfg):
    c1, c2, c3, c4, c5 = cfg.encoder_channels

    def cba(cin, cout):
        return _conv_params(cin, cout, 3, bias=False) + _bn_params(cout)

    def sep(cin, cout):
        return _conv_params(cin, cin, 3, groups=cin, bias=False) + _conv_params(cin, cout, 1, bias=False) + _bn_params(cout)

    def edb(c, e):
        inner = c * e
        width = inner // 3
        expand = _conv_params(c, inner, 1, bias=False) if e > 1 else 0
        return expand + 3 * width * 9 + _conv_params(inner, c, 1, bias=False) + _bn_params(c)

    def head(c):
        return c + 1

    def pgf(c):
        return _conv_params(c, c, 1, bias=False) + _bn_params(c) + 2

    total = cba(3, c1) + cba(c1, c2) + cba(c2, c3) + cfg.edb_count * edb(c3, cfg.edb_expansion)
    total += cba(c3, c4) + sep(c4, c5) + _conv_params(c5, c5, 3, groups=c5)
    if cfg.use_agf_ssa:
        m = cfg.agf_mid
        total += _conv_params(c3, c4, 1) + _conv_params(2 * c4, m, 3, bias=False) + _bn_params(m)
        total += _conv_params(m, 2, 1) + _conv_params(c4, c5, 1) + 1
    total += sep(c5, c4) + 2 * head(c4) + pgf(c4)
    total += sep(c4, c3) + 2 * head(c3) + pgf(c3)
    total += cba(c3, c2) + 2 * head(c2) + pgf(c2)
    total += cba(c2, c1) + head(c1) + pgf(c1) + head(c1)
    return total


def _unet_analytic(cfg):
    ch = cfg.encoder_channels

    def double(cin, cout):
        return (_conv_params(cin, cout, 3, bias=False) + _bn_params(cout)
                + _conv_params(cout, cout, 3, bias=False) + _bn_params(cout))

    total, cin = 0, 3
    for c in ch:
        total += double(cin, c)
        cin = c
    for i in range(len(ch) - 1):
        total += _conv_params(ch[i + 1], ch[i], 1) + double(2 * ch[i], ch[i])
    return total + ch[0] + 1


def analytic_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count derived from the config alone."""
    if config.family == "ultraseg":
        return _ultraseg_analytic(config)
    return _unet_analytic(config)


def count_flops(model: Model, input_hw=None):
    """(macs, flops) summed over every convolution; flops = 2 * macs.

    Each conv layer knows the stride of its input relative to the image,
    so no forward pass is needed. BN, activations and resampling are not
    counted.
    """
    h, w = input_hw or model.config.input_size
    macs = sum(m.spec.macs(h // m.scale, w // m.scale) for _, m in model.conv_layers())
    return int(macs), int(2 * macs)


def flops_breakdown(model: Model, input_hw=None):
    """MACs and parameter counts grouped by top-level stage name."""
    h, w = input_hw or model.config.input_size
    stages = OrderedDict()
    for name, m in model.conv_layers():
        top = name.split(".")[0]
        stages.setdefault(top, {"macs": 0, "params": 0})
        stages[top]["macs"] += m.spec.macs(h // m.scale, w // m.scale)
    for name, p in model.registry.items():
        top = name.split(".")[0]
        stages.setdefault(top, {"macs": 0, "params": 0})
        stages[top]["params"] += int(p.value.size)
    return stages


def receptive_field(path) -> int:
    """Maximal-path receptive field 1 + sum((k - 1) * d) of a conv chain."""
    path = list(path)
    if not path:
        raise ValueError("receptive_field needs a non-empty path")
    return 1 + sum((int(k) - 1) * int(d) for k, d in path)


def map_to_input(rf: int, stride: int) -> int:
    return int(rf) * int(stride)


def config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
