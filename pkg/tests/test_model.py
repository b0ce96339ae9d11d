import numpy as np
import pytest
import torch
from torch import nn

from rvmde.discretization import SidBins
from rvmde.model import (ModelConfig, ModelError, RVMDE, backbone_features, build_model, count_params, forward,
                         fpn_merge, no_decay_names, pair_probabilities, radar_encode, tiny_config, upsample)

BINS = SidBins(2.0, 40.0, 16)


def inputs(b=1, c=1, h=64, w=128, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, 3, h, w, generator=g), torch.rand(b, c, h, w, generator=g) * 30


def conv(cin, cout, k, bias=False):
    return cin * cout * k * k + (cout if bias else 0)


def block(cin, cout):
    n = conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout
    if cin != cout:
        n += conv(cin, cout, 1) + 2 * cout
    return n


def analytic_count(cfg):
    c, p, r, h = cfg.stage_channels, cfg.pyramid_channels, cfg.radar_channels, cfg.head_channels
    n = conv(3, c[0], 7) + 2 * c[0]
    prev = c[0]
    for width, blocks in zip(c, cfg.blocks_per_stage):
        n += block(prev, width) + (blocks - 1) * block(width, width)
        prev = width
    n += sum(conv(ci, p, 1, True) for ci in c[1:]) + 3 * conv(p, p, 3, True)
    n += conv(cfg.radar_in_channels, r, 7) + 2 * r
    n += block(r, r) + (cfg.radar_blocks - 1) * block(r, r)
    n += block(r, 2 * r) + (cfg.radar_blocks - 1) * block(2 * r, 2 * r)
    n += conv(2 * r, r, 1, True)
    n += conv(3 * p + r, h, 3) + 2 * h + conv(h, h, 3) + 2 * h + conv(h, 2 * cfg.K, 1, True)
    return n


class TestBuild:
    def test_same_seed_identical(self):
        a, b = build_model(tiny_config(), BINS, seed=3), build_model(tiny_config(), BINS, seed=3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)

    def test_seed_sensitivity(self):
        a, b = build_model(tiny_config(), BINS, seed=1), build_model(tiny_config(), BINS, seed=2)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_init_rules(self):
        m = build_model(tiny_config(), BINS)
        for mod in m.modules():
            if isinstance(mod, nn.Conv2d) and mod.bias is not None:
                assert not mod.bias.any()
            if isinstance(mod, nn.GroupNorm):
                assert torch.all(mod.weight == 1) and not mod.bias.any()
        w = m.backbone.layer3[0].conv1.weight
        fan_in = w.shape[1] * 9
        assert abs(w.std().item() - (2 / fan_in) ** 0.5) < 0.1 * (2 / fan_in) ** 0.5

    @pytest.mark.parametrize("cfg", [tiny_config(), tiny_config(radar_in_channels=6),
                                     tiny_config(blocks_per_stage=(2, 1, 2, 1), radar_blocks=1)])
    def test_count_analytic(self, cfg):
        assert count_params(build_model(cfg, BINS)) == analytic_count(cfg)

    def test_count_single_conv(self):
        assert sum(p.numel() for p in nn.Conv2d(4, 8, 3).parameters()) == 296

    def test_count_deterministic(self):
        assert count_params(build_model(tiny_config(), BINS)) == count_params(build_model(tiny_config(), BINS))

    @pytest.mark.parametrize("kw", [dict(stage_channels=(0, 0, 0, 0)), dict(radar_in_channels=3), dict(K=1),
                                    dict(input_h=60), dict(norm="layer"), dict(head_channels=60)])
    def test_invalid_config(self, kw):
        with pytest.raises(ModelError):
            tiny_config(**kw).validate()
        if "K" not in kw:
            with pytest.raises(ModelError):
                build_model(tiny_config(**kw), BINS)

    def test_bins_k_mismatch(self):
        with pytest.raises(ModelError, match="K="):
            RVMDE(tiny_config(), SidBins(K=8))

    def test_config_dict_round_trip(self):
        cfg = tiny_config(norm="batch")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ModelError, match="unknown"):
            ModelConfig.from_dict({"depth": 18})

    def test_no_decay_names(self):
        m = build_model(tiny_config(), BINS)
        names = no_decay_names(m)
        assert "backbone.bn1.weight" in names and "head.bn2.bias" in names
        assert "backbone.conv1.weight" not in names and "fpn.lateral3.bias" not in names


class TestBackbone:
    def test_shapes(self):
        m = build_model(tiny_config(), BINS)
        c3, c4, c5 = backbone_features(m, inputs()[0])
        assert c3.shape == (1, 32, 8, 16) and c4.shape == (1, 64, 4, 8) and c5.shape == (1, 128, 2, 4)

    def test_bad_size(self):
        m = build_model(tiny_config(), BINS)
        with pytest.raises(ModelError, match="divisible by 32"):
            backbone_features(m, torch.zeros(1, 3, 60, 128))

    def test_zero_input_zero_init_finite(self):
        m = build_model(tiny_config(zero_init_residual=True), BINS)
        assert all(torch.isfinite(c).all() for c in backbone_features(m, torch.zeros(1, 3, 64, 128)))

    def test_batch_independence(self):
        m = build_model(tiny_config(), BINS).eval()
        rgb, radar = inputs(b=2)
        with torch.no_grad():
            both, _ = m(rgb, radar)
            one = torch.cat([m(rgb[i:i + 1], radar[i:i + 1])[0] for i in range(2)])
        assert torch.allclose(both, one, atol=1e-6)


class TestFpn:
    def test_shape(self):
        m = build_model(tiny_config(), BINS)
        out = fpn_merge(m, *backbone_features(m, inputs(b=2)[0]))
        assert out.shape == (2, 96, 16, 32)

    def test_zeroed_laterals_give_bias_field(self):
        m = build_model(tiny_config(), BINS)
        with torch.no_grad():
            for name in ("lateral3", "lateral4", "lateral5"):
                lat = getattr(m.fpn, name)
                lat.weight.zero_()
                lat.bias.zero_()
            for name in ("output3", "output4", "output5"):
                getattr(m.fpn, name).bias.uniform_(-1, 1)
            out = fpn_merge(m, *backbone_features(m, inputs()[0]))
        flat = out[0].reshape(out.shape[1], -1)
        # bilinear weights sum to one only up to rounding
        assert torch.allclose(flat.min(1).values, flat.max(1).values, atol=1e-6)
        expected = torch.cat([m.fpn.output3.bias, m.fpn.output4.bias, m.fpn.output5.bias])
        assert torch.allclose(flat[:, 0], expected)

    def test_upsample_constant(self):
        x = torch.full((1, 2, 3, 5), 2.5)
        assert torch.equal(upsample(x, 2), torch.full((1, 2, 6, 10), 2.5))

    def test_upsample_half_pixel(self):
        x = torch.tensor([[[[0.0, 1.0]]]])
        assert upsample(x, 2)[0, 0, 0].tolist() == [0.0, 0.25, 0.75, 1.0]


class TestRadar:
    def test_shape(self):
        m = build_model(tiny_config(), BINS)
        assert radar_encode(m, inputs(b=2)[1]).shape == (2, 16, 16, 32)

    def test_full_depth_shape(self):
        m = build_model(tiny_config(radar_full_depth=True), BINS)
        assert radar_encode(m, inputs()[1]).shape == (1, 16, 16, 32)

    def test_zero_input_constant(self):
        m = build_model(tiny_config(), BINS)
        with torch.no_grad():
            m.radar.proj.bias.uniform_(-1, 1)
            out = radar_encode(m, torch.zeros(1, 1, 64, 128))[0].reshape(16, -1)
        assert torch.equal(out.min(1).values, out.max(1).values)

    def test_channel_mismatch(self):
        m = build_model(tiny_config(radar_in_channels=6), BINS)
        with pytest.raises(ModelError, match="channel mismatch"):
            radar_encode(m, torch.zeros(1, 1, 64, 128))
        with pytest.raises(ModelError, match="channel mismatch"):
            m(*inputs(c=1))

    def test_mer_input_accepted(self):
        m = build_model(tiny_config(radar_in_channels=6), BINS)
        probs, _ = m(*inputs(c=6))
        assert probs.shape == (1, 16, 64, 128)

    def test_radar_sensitivity(self):
        m = build_model(tiny_config(), BINS, dtype=torch.float64).eval()
        rgb, radar = (t.double() for t in inputs())
        with torch.no_grad():
            base = m(rgb, radar)[1]
            bumped = radar.clone()
            bumped[0, 0, 30, 60] += 1e-3
            moved = m(rgb, bumped)[1]
        assert (moved - base).abs().max() > 0


class TestForward:
    def test_shape_range_finite(self):
        m = build_model(tiny_config(), BINS)
        probs, logits = forward(m, *inputs())
        assert probs.shape == (1, 16, 64, 128) and logits.shape == (1, 32, 64, 128)
        assert torch.isfinite(logits).all() and (probs > 0).all() and (probs < 1).all()

    @pytest.mark.parametrize("hw", [(32, 32), (96, 64)])
    def test_shape_contract(self, hw):
        m = build_model(tiny_config(), BINS)
        probs, _ = m(*inputs(h=hw[0], w=hw[1]))
        assert probs.shape == (1, 16) + hw

    def test_pair_softmax(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(2, 8, 3, 3, generator=g, dtype=torch.float64)
        logits[:, 2] = logits[:, 3]
        p = pair_probabilities(logits)
        assert torch.all(p[:, 1] == 0.5)
        sig = torch.sigmoid(logits[:, 1::2] - logits[:, 0::2])
        assert (p - sig).abs().max() < 1e-6

    def test_deterministic(self):
        m = build_model(tiny_config(), BINS)
        a = m(*inputs())[1]
        b = m(*inputs())[1]
        assert torch.equal(a, b)

    def test_nan_check_names_layer(self):
        m = build_model(tiny_config(), BINS)
        with torch.no_grad():
            m.fpn.output4.weight[0, 0, 0, 0] = float("nan")
        m.set_nan_check(True)
        with pytest.raises(FloatingPointError, match="fpn.output4"):
            m(*inputs())
        m.set_nan_check(False)
        m(*inputs())

    def test_batch_norm_mode(self):
        m = build_model(tiny_config(norm="batch"), BINS)
        probs, _ = m(*inputs(b=2))
        assert torch.isfinite(probs).all()
