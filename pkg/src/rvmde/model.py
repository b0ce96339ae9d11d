"""Radar-validated depth network.

Residual image backbone, a feature pyramid restricted to P3-P5 whose levels
are upsampled to stride 4 and concatenated, a separate residual radar
encoder, late fusion by concatenation, and an ordinal head emitting two
logits per depth threshold.
"""

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .discretization import SidBins


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    stage_channels: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    pyramid_channels: int = 256
    radar_channels: int = 64
    radar_in_channels: int = 1
    head_channels: int = 256
    K: int = 80
    norm: str = "group"
    norm_groups: int = 8
    radar_blocks: int = 2
    radar_full_depth: bool = False
    zero_init_residual: bool = False
    input_h: int = 352
    input_w: int = 928

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ModelError("stage_channels and blocks_per_stage need exactly 4 entries")
        ints = {
            "stage_channels": min(self.stage_channels),
            "blocks_per_stage": min(self.blocks_per_stage),
            "pyramid_channels": self.pyramid_channels,
            "radar_channels": self.radar_channels,
            "head_channels": self.head_channels,
            "radar_blocks": self.radar_blocks,
            "input_h": self.input_h,
            "input_w": self.input_w,
        }
        for name, val in ints.items():
            if val <= 0:
                raise ModelError(f"{name} must be positive, got {val}")
        if self.radar_in_channels not in (1, 6):
            raise ModelError(f"radar_in_channels must be 1 or 6, got {self.radar_in_channels}")
        if self.K < 2:
            raise ModelError(f"K must be >= 2, got {self.K}")
        if self.input_h % 32 or self.input_w % 32:
            raise ModelError(f"input size {self.input_h}x{self.input_w} must be divisible by 32")
        if self.norm not in ("group", "batch"):
            raise ModelError(f"norm must be 'group' or 'batch', got {self.norm!r}")
        if self.norm == "group":
            normed = list(self.stage_channels) + [self.radar_channels, 2 * self.radar_channels, self.head_channels]
            if self.radar_full_depth:
                normed += [4 * self.radar_channels, 8 * self.radar_channels]
            bad = [c for c in normed if c % self.norm_groups]
            if bad:
                raise ModelError(f"channel counts {bad} not divisible by norm_groups={self.norm_groups}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides):
    """Desk-scale configuration used by the tests and the overfit experiment."""
    base = dict(stage_channels=(16, 32, 64, 128), blocks_per_stage=(1, 1, 1, 1), pyramid_channels=32,
                radar_channels=16, head_channels=64, K=16, input_h=64, input_w=128)
    base.update(overrides)
    return ModelConfig(**base)


def _norm(cfg, c):
    if cfg.norm == "group":
        return nn.GroupNorm(cfg.norm_groups, c)
    return nn.BatchNorm2d(c)


def upsample(x, factor):
    """Bilinear upsampling with half-pixel centres (no corner alignment)."""
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


class BasicBlock(nn.Module):
    def __init__(self, cfg, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = _norm(cfg, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = _norm(cfg, cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cfg, cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.downsample is None else self.downsample(x)
        return F.relu(out + skip)


def _stage(cfg, cin, cout, blocks, stride):
    layers = [BasicBlock(cfg, cin, cout, stride)]
    layers += [BasicBlock(cfg, cout, cout, 1) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c = cfg.stage_channels
        self.conv1 = nn.Conv2d(3, c[0], 7, 2, 3, bias=False)
        self.bn1 = _norm(cfg, c[0])
        self.layer1 = _stage(cfg, c[0], c[0], cfg.blocks_per_stage[0], 1)
        self.layer2 = _stage(cfg, c[0], c[1], cfg.blocks_per_stage[1], 2)
        self.layer3 = _stage(cfg, c[1], c[2], cfg.blocks_per_stage[2], 2)
        self.layer4 = _stage(cfg, c[2], c[3], cfg.blocks_per_stage[3], 2)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.max_pool2d(x, 3, 2, 1)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c3, c4, c5


class PyramidMerge(nn.Module):
    """Top-down FPN over C3-C5 (no P6/P7); levels resampled to stride 4 and concatenated."""

    def __init__(self, cfg):
        super().__init__()
        c, p = cfg.stage_channels, cfg.pyramid_channels
        self.lateral3 = nn.Conv2d(c[1], p, 1)
        self.lateral4 = nn.Conv2d(c[2], p, 1)
        self.lateral5 = nn.Conv2d(c[3], p, 1)
        self.output3 = nn.Conv2d(p, p, 3, 1, 1)
        self.output4 = nn.Conv2d(p, p, 3, 1, 1)
        self.output5 = nn.Conv2d(p, p, 3, 1, 1)

    def forward(self, c3, c4, c5):
        p5 = self.lateral5(c5)
        p4 = self.lateral4(c4) + upsample(p5, 2)
        p3 = self.lateral3(c3) + upsample(p4, 2)
        p3, p4, p5 = self.output3(p3), self.output4(p4), self.output5(p5)
        return torch.cat([upsample(p3, 2), upsample(p4, 4), upsample(p5, 8)], dim=1)


class RadarEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        r = cfg.radar_channels
        self.in_channels = cfg.radar_in_channels
        self.conv1 = nn.Conv2d(cfg.radar_in_channels, r, 7, 2, 3, bias=False)
        self.bn1 = _norm(cfg, r)
        self.layer1 = _stage(cfg, r, r, cfg.radar_blocks, 1)
        self.layer2 = _stage(cfg, r, 2 * r, cfg.radar_blocks, 2)
        self.full_depth = cfg.radar_full_depth
        width = 2 * r
        if self.full_depth:
            self.layer3 = _stage(cfg, 2 * r, 4 * r, cfg.radar_blocks, 2)
            self.layer4 = _stage(cfg, 4 * r, 8 * r, cfg.radar_blocks, 2)
            width += 12 * r
        self.proj = nn.Conv2d(width, r, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ModelError(f"radar channel mismatch: model expects {self.in_channels}, got {x.shape[1]}")
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer2(self.layer1(x))
        if self.full_depth:
            x8 = self.layer3(x)
            x16 = self.layer4(x8)
            x = torch.cat([x, upsample(x8, 2), upsample(x16, 4)], dim=1)
        return self.proj(x)


class OrdinalHead(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cin = 3 * cfg.pyramid_channels + cfg.radar_channels
        h = cfg.head_channels
        self.conv1 = nn.Conv2d(cin, h, 3, 1, 1, bias=False)
        self.bn1 = _norm(cfg, h)
        self.conv2 = nn.Conv2d(h, h, 3, 1, 1, bias=False)
        self.bn2 = _norm(cfg, h)
        self.logits = nn.Conv2d(h, 2 * cfg.K, 1)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        return upsample(self.logits(x), 4)


def pair_probabilities(logits):
    """P_k from a softmax over each channel pair (2k, 2k+1); returns (B, K, H, W)."""
    b, c, h, w = logits.shape
    pairs = logits.reshape(b, c // 2, 2, h, w)
    return torch.softmax(pairs, dim=2)[:, :, 1]


class RVMDE(nn.Module):
    def __init__(self, cfg, bins):
        super().__init__()
        cfg.validate()
        if bins.K != cfg.K:
            raise ModelError(f"bins have K={bins.K} but model config has K={cfg.K}")
        self.cfg = cfg
        self.bins = bins
        self.backbone = Backbone(cfg)
        self.fpn = PyramidMerge(cfg)
        self.radar = RadarEncoder(cfg)
        self.head = OrdinalHead(cfg)
        self._hooks = []

    def check_inputs(self, rgb, radar):
        if rgb.dim() != 4 or rgb.shape[1] != 3:
            raise ModelError(f"rgb must be B x 3 x H x W, got {tuple(rgb.shape)}")
        h, w = rgb.shape[-2:]
        if h % 32 or w % 32:
            raise ModelError(f"input size {h}x{w} must be divisible by 32")
        if radar.dim() != 4 or radar.shape[0] != rgb.shape[0] or radar.shape[-2:] != rgb.shape[-2:]:
            raise ModelError(f"radar shape {tuple(radar.shape)} does not match rgb {tuple(rgb.shape)}")
        if radar.shape[1] != self.cfg.radar_in_channels:
            raise ModelError(
                f"radar channel mismatch: model expects {self.cfg.radar_in_channels}, got {radar.shape[1]}")

    def forward(self, rgb, radar):
        self.check_inputs(rgb, radar)
        c3, c4, c5 = self.backbone(rgb)
        fused = torch.cat([self.fpn(c3, c4, c5), self.radar(radar)], dim=1)
        logits = self.head(fused)
        return pair_probabilities(logits), logits

    def set_nan_check(self, enabled=True):
        """Raise ``FloatingPointError`` naming the first layer that emits a non-finite value."""
        for h in self._hooks:
            h.remove()
        self._hooks = []
        if not enabled:
            return

        def make_hook(name):
            def hook(module, args, output):
                if isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                    raise FloatingPointError(f"non-finite output in layer {name!r}")
            return hook

        for name, mod in self.named_modules():
            if name and not list(mod.children()):
                self._hooks.append(mod.register_forward_hook(make_hook(name)))


def _he_init(model, seed):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels // mod.groups * mod.kernel_size[0] * mod.kernel_size[1]
                w = torch.randn(mod.weight.shape, generator=gen, dtype=torch.float64) * (2.0 / fan_in) ** 0.5
                mod.weight.copy_(w)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, (nn.GroupNorm, nn.BatchNorm2d)):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        if model.cfg.zero_init_residual:
            # each residual block starts as identity
            for mod in model.modules():
                if isinstance(mod, BasicBlock):
                    mod.bn2.weight.zero_()


def build_model(cfg, bins=None, seed=0, dtype=torch.float32):
    """Build and deterministically initialize a model; same (cfg, seed) gives identical weights."""
    bins = bins or SidBins(K=cfg.K)
    model = RVMDE(cfg, bins).to(dtype)
    _he_init(model, seed)
    return model


def backbone_features(model, rgb):
    h, w = rgb.shape[-2:]
    if h % 32 or w % 32:
        raise ModelError(f"input size {h}x{w} must be divisible by 32")
    return model.backbone(rgb)


def fpn_merge(model, c3, c4, c5):
    return model.fpn(c3, c4, c5)


def radar_encode(model, radar):
    return model.radar(radar)


def forward(model, rgb, radar):
    return model(rgb, radar)


def count_params(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def no_decay_names(model):
    """Names of normalization scale/shift parameters (excluded from weight decay)."""
    names = set()
    for mname, mod in model.named_modules():
        if isinstance(mod, (nn.GroupNorm, nn.BatchNorm2d)):
            for pname, _ in mod.named_parameters(recurse=False):
                names.add(f"{mname}.{pname}" if mname else pname)
    return names
