import numpy as np
import pytest

from ultraseg import functional as F
from ultraseg import zoo
from ultraseg.autodiff import Variable, no_grad
from ultraseg.errors import ConfigError, GeometryError, ShapeError
from ultraseg.modules import depthwise3x3, pointwise
from ultraseg.tensor import Rng


@pytest.fixture(scope="module")
def models():
    return {v: zoo.build(v, seed=1) for v in ("ultraseg-108k", "ultraseg-130k", "unet-tiny")}


def traced_macs(model, hw):
    """MACs from the conv calls actually executed in a forward pass."""
    x = np.zeros((1, 3) + tuple(hw), np.float32)
    with no_grad(), F.trace_convs() as log:
        model.eval()(x)
    return sum(spec.macs(*in_hw) for spec, in_hw in log)


class TestConfig:
    def test_variants(self):
        assert set(zoo.VARIANTS) == {"ultraseg-108k", "ultraseg-130k", "unet-base", "unet-medium",
                                     "unet-light", "unet-small", "unet-tiny"}

    def test_unet_tiny_channels(self):
        assert zoo.config_for("unet-tiny").encoder_channels == (8, 16, 32, 64, 128)
        assert zoo.config_for("unet-base").encoder_channels == (64, 128, 256, 512, 1024)

    @pytest.mark.parametrize("variant", zoo.VARIANTS)
    def test_text_roundtrip(self, variant):
        cfg = zoo.config_for(variant, (128, 192))
        assert zoo.ModelConfig.from_text(cfg.to_text()) == cfg

    def test_from_text_rejects(self):
        good = zoo.config_for("ultraseg-108k").to_text()
        with pytest.raises(ConfigError):
            zoo.ModelConfig.from_text(good + "mystery=1\n")
        with pytest.raises(ConfigError):
            zoo.ModelConfig.from_text(good.replace("edb_count=2", "edb_count=two"))
        with pytest.raises(ConfigError):
            zoo.ModelConfig.from_text(good.replace("use_agf_ssa=false", "use_agf_ssa=maybe"))

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            zoo.config_for("ultraseg-1m")
        with pytest.raises(ConfigError):
            zoo.config_for("ultraseg-108k", (100, 100))
        with pytest.raises(ConfigError):
            zoo.ModelConfig("ultraseg", "ultraseg-108k", (8, 16, 32, 64, 96))
        with pytest.raises(ConfigError):
            zoo.ModelConfig("ultraseg", "ultraseg-108k", zoo.ULTRASEG_CHANNELS, use_agf_ssa=True)
        with pytest.raises(ConfigError):
            zoo.ModelConfig("unet", "unet-x", (8, 16, 32, 64, 100))

    def test_config_dict_is_json_friendly(self):
        d = zoo.config_dict(zoo.config_for("ultraseg-130k"))
        assert d["encoder_channels"] == [8, 16, 48, 64, 96] and d["use_agf_ssa"] is True


class TestBuild:
    def test_deterministic(self):
        a = zoo.build("ultraseg-108k", seed=1).state_arrays()
        b = zoo.build("ultraseg-108k", seed=1).state_arrays()
        assert list(a) == list(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_seed_changes_weights(self):
        a = zoo.build("ultraseg-108k", seed=1).registry
        b = zoo.build("ultraseg-108k", seed=2).registry
        assert not np.array_equal(a["enc1.conv.weight"].value, b["enc1.conv.weight"].value)

    def test_130k_registry_extends_108k(self, models):
        small = models["ultraseg-108k"].registry
        big = models["ultraseg-130k"].registry
        assert set(small) < set(big)
        extra = {name.split(".")[0] for name in set(big) - set(small)}
        assert extra == {"agf", "agf_proj", "ssa"}
        for name in small:
            assert np.array_equal(small[name].value, big[name].value)

    def test_outputs(self, models):
        x = Rng(0).tensor((2, 3, 64, 64), 0.0, 1.0)
        with no_grad():
            out = models["ultraseg-130k"].eval()(x)
        assert out.region.shape == (2, 1, 64, 64)
        # levels are listed finest first
        assert [v.shape for v in out.region_levels] == [(2, 1, 64 // s, 64 // s) for s in zoo.REGION_LEVELS]
        assert [v.shape for v in out.boundary_levels] == [(2, 1, 64 // s, 64 // s) for s in zoo.BOUNDARY_LEVELS]
        assert out.bottleneck.shape == (2, 96, 4, 4)

    def test_unet_outputs(self, models):
        with no_grad():
            out = models["unet-tiny"].eval()(np.zeros((1, 3, 32, 32), np.float32))
        assert out.region.shape == (1, 1, 32, 32)
        assert out.bottleneck.shape == (1, 128, 2, 2)

    def test_input_checks(self, models):
        m = models["ultraseg-108k"]
        with pytest.raises(ShapeError):
            m(np.zeros((1, 1, 32, 32), np.float32))
        with pytest.raises(GeometryError):
            m(np.zeros((1, 3, 40, 32), np.float32))

    def test_train_eval_switch(self, models):
        m = models["ultraseg-108k"]
        m.train()
        assert m.training
        m.eval()
        assert not m.training

    def test_eval_forward_has_no_graph(self, models):
        m = models["ultraseg-108k"].eval()
        with no_grad():
            out = m(np.zeros((1, 3, 32, 32), np.float32))
        assert out.region.parents == ()


class TestCounts:
    def test_closed_forms(self):
        assert sum(p.value.size for _, p in pointwise(8, 16).named_parameters()) == 144
        assert sum(p.value.size for _, p in depthwise3x3(16, bias=False).named_parameters()) == 144

    @pytest.mark.parametrize("variant", zoo.VARIANTS)
    def test_analytic_matches_enumerated(self, variant):
        assert zoo.count_params(zoo.build(variant)) == zoo.analytic_param_count(zoo.config_for(variant))

    def test_budget(self, models):
        small = zoo.count_params(models["ultraseg-108k"])
        big = zoo.count_params(models["ultraseg-130k"])
        assert small < 300_000 and big < 300_000
        assert 15_000 <= big - small <= 30_000

    def test_unet_ordering(self):
        counts = [zoo.analytic_param_count(zoo.config_for(v))
                  for v in ("unet-tiny", "unet-small", "unet-light", "unet-medium", "unet-base")]
        assert counts == sorted(counts)


class TestFlops:
    def test_single_layer_macs(self):
        assert F.ConvSpec(48, 48, 1).macs(16, 16) == 589_824
        assert F.ConvSpec(16, 16, 3, padding=2, dilation=2, groups=16).macs(32, 32) == 147_456

    @pytest.mark.parametrize("variant", ["ultraseg-108k", "ultraseg-130k", "unet-tiny"])
    def test_static_matches_traced(self, models, variant):
        macs, flops = zoo.count_flops(models[variant], (64, 96))
        assert macs == traced_macs(models[variant], (64, 96))
        assert flops == 2 * macs

    def test_ordering(self, models):
        m108 = zoo.count_flops(models["ultraseg-108k"], (256, 256))[0]
        m130 = zoo.count_flops(models["ultraseg-130k"], (256, 256))[0]
        tiny = zoo.count_flops(models["unet-tiny"], (256, 256))[0]
        assert m108 < m130 < tiny
        assert (m130 - m108) < 0.10 * m108

    def test_breakdown_sums(self, models):
        m = models["ultraseg-130k"]
        stages = zoo.flops_breakdown(m, (256, 256))
        assert sum(s["macs"] for s in stages.values()) == zoo.count_flops(m, (256, 256))[0]
        assert sum(s["params"] for s in stages.values()) == zoo.count_params(m)


class TestReceptiveField:
    def test_examples(self):
        assert zoo.receptive_field([(3, 3), (3, 3)]) == 13
        assert zoo.receptive_field([(1, 1)]) == 1
        assert zoo.map_to_input(13, 4) == 52
        with pytest.raises(ValueError):
            zoo.receptive_field([])

    def test_edb_branch_paths(self):
        # the widest path through one EDB is its dilation-3 branch
        assert zoo.receptive_field([(3, 3)]) == 7
        assert zoo.receptive_field([(3, 1), (3, 2), (3, 3)]) == 13
