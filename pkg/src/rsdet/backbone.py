"""ResNet-RS feature extractor.

Bottleneck ResNet with three modifications that can each be toggled for
ablations: a three-conv ("D") stem, a squeeze-excitation gate on every
residual block, and SiLU in place of ReLU. Residual branches are dropped with
a depth-linear stochastic-depth schedule during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn

BLOCK_COUNTS = {
    50: (3, 4, 6, 3),
    101: (3, 4, 23, 3),
    152: (3, 8, 36, 3),
    200: (3, 24, 36, 3),
}
STAGE_PLANES = (64, 128, 256, 512)
EXPANSION = 4

# Keras-style momentum 0.99 is torch momentum 0.01
BN_MOMENTUM = 0.01
BN_EPS = 1e-3


def silu(x: torch.Tensor) -> torch.Tensor:
    """x * sigmoid(x)."""
    return x * torch.sigmoid(x)


class SiLU(nn.Module):
    def forward(self, x):
        return silu(x)


def make_activation(name: str) -> nn.Module:
    if name == "silu":
        return SiLU()
    if name == "relu":
        return nn.ReLU()
    raise ValueError(f"unknown activation {name!r}; expected 'silu' or 'relu'")


def make_norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def scaled_width(channels: int, multiplier: float) -> int:
    return max(8, int(round(channels * multiplier)))


def se_hidden_width(channels: int, ratio: float, divisor: int = 8) -> int:
    """Squeeze width: channels * ratio rounded to the nearest multiple of 8, at least 8."""
    if not 0 < ratio <= 1:
        raise ValueError(f"se ratio must be in (0, 1], got {ratio}")
    raw = channels * ratio
    return max(divisor, int(math.floor(raw / divisor + 0.5)) * divisor)


@dataclass
class BackboneSpec:
    """Configuration of a ResNet-RS backbone.

    ``width_multiplier`` scales every conv width (stem and stages) and exists
    for desk-scale runs; 1.0 gives the canonical widths.
    """

    depth: int = 50
    se_ratio: float = 0.25
    stochastic_depth_init: float = 0.2
    activation: str = "silu"
    stem: str = "d"
    use_se: bool = True
    width_multiplier: float = 1.0
    sd_per_sample: bool = True

    def __post_init__(self):
        if self.depth not in BLOCK_COUNTS:
            raise ValueError(f"unsupported ResNet depth {self.depth}; choose from {sorted(BLOCK_COUNTS)}")
        if not 0 < self.se_ratio <= 1:
            raise ValueError(f"se_ratio must be in (0, 1], got {self.se_ratio}")
        if not 0 <= self.stochastic_depth_init < 1:
            raise ValueError(f"stochastic_depth_init must be in [0, 1), got {self.stochastic_depth_init}")
        if self.stem not in ("d", "vanilla"):
            raise ValueError(f"stem must be 'd' or 'vanilla', got {self.stem!r}")
        make_activation(self.activation)

    @property
    def block_counts(self) -> tuple[int, int, int, int]:
        return BLOCK_COUNTS[self.depth]

    @property
    def total_blocks(self) -> int:
        return sum(self.block_counts)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(scaled_width(p, self.width_multiplier) * EXPANSION for p in STAGE_PLANES)

    @classmethod
    def baseline(cls, depth: int = 50, **kw) -> "BackboneSpec":
        """Vanilla ResNet: 7x7 stem, no SE, ReLU, no stochastic depth."""
        return cls(depth=depth, stem="vanilla", use_se=False, activation="relu", stochastic_depth_init=0.0, **kw)

    def with_(self, **kw) -> "BackboneSpec":
        return replace(self, **kw)


def stochastic_depth_rate(init: float, block_index: int, total_blocks: int) -> float:
    """Drop rate of a residual block; ``block_index`` is 1-based and global."""
    if not 1 <= block_index <= total_blocks:
        raise ValueError(f"block_index {block_index} outside 1..{total_blocks}")
    return init * block_index / total_blocks


class StochasticDepth(nn.Module):
    """Drops the residual branch with probability ``rate`` in training mode.

    Kept branches are divided by the survival probability, so evaluation
    needs no rescaling.
    """

    def __init__(self, rate: float, per_sample: bool = True):
        super().__init__()
        self.rate = rate
        self.per_sample = per_sample

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        shape = (x.shape[0],) + (1,) * (x.ndim - 1) if self.per_sample else (1,) * x.ndim
        mask = torch.empty(shape, dtype=x.dtype, device=x.device).bernoulli_(keep)
        return x * mask / keep

    def extra_repr(self):
        return f"rate={self.rate:.4f}, per_sample={self.per_sample}"


class SqueezeExcite(nn.Module):
    """Channel gate: global pool -> 1x1 reduce -> act -> 1x1 expand -> sigmoid."""

    def __init__(self, channels: int, ratio: float = 0.25, activation: str = "silu"):
        super().__init__()
        hidden = se_hidden_width(channels, ratio)
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.act = make_activation(activation)
        self.expand = nn.Conv2d(hidden, channels, 1)

    @property
    def hidden_width(self) -> int:
        return self.reduce.out_channels

    def gate(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.expand(self.act(self.reduce(s))))

    def forward(self, x):
        return x * self.gate(x)

    @torch.no_grad()
    def pin_open(self):
        """Force the gate to exactly 1 so the block behaves as if SE were absent."""
        self.expand.weight.zero_()
        # sigmoid(100) rounds to 1.0 in float32 and float64
        self.expand.bias.fill_(100.0)


def conv_norm_act(cin, cout, kernel, stride=1, activation="silu", act=True):
    layers = [nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False), make_norm(cout)]
    if act:
        layers.append(make_activation(activation))
    return nn.Sequential(*layers)


class StemD(nn.Sequential):
    """Three 3x3 convs (widths 32, 32, 64; first stride 2) then a stride-2 max-pool."""

    def __init__(self, activation="silu", widths=(32, 32, 64)):
        w1, w2, w3 = widths
        super().__init__(
            conv_norm_act(3, w1, 3, 2, activation),
            conv_norm_act(w1, w2, 3, 1, activation),
            conv_norm_act(w2, w3, 3, 1, activation),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.out_channels = w3


class StemVanilla(nn.Sequential):
    """Single 7x7 stride-2 conv then a stride-2 max-pool."""

    def __init__(self, activation="relu", width=64):
        super().__init__(
            conv_norm_act(3, width, 7, 2, activation),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.out_channels = width


def build_stem_d(activation: str = "silu", width_multiplier: float = 1.0) -> StemD:
    return StemD(activation, tuple(scaled_width(w, width_multiplier) for w in (32, 32, 64)))


class Bottleneck(nn.Module):
    def __init__(self, cin, planes, stride, spec: BackboneSpec, drop_rate: float):
        super().__init__()
        cout = planes * EXPANSION
        act = spec.activation
        self.conv1 = conv_norm_act(cin, planes, 1, 1, act)
        self.conv2 = conv_norm_act(planes, planes, 3, stride, act)
        self.conv3 = conv_norm_act(planes, cout, 1, 1, act, act=False)
        self.se = SqueezeExcite(cout, spec.se_ratio, act) if spec.use_se else nn.Identity()
        self.drop_path = StochasticDepth(drop_rate, spec.sd_per_sample)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), make_norm(cout))
        else:
            self.shortcut = nn.Identity()
        self.act = make_activation(act)

    def residual(self, x):
        return self.se(self.conv3(self.conv2(self.conv1(x))))

    def forward(self, x):
        return self.act(self.shortcut(x) + self.drop_path(self.residual(x)))


class ResNetRS(nn.Module):
    """Returns ``{"C2": ..., "C5": ...}`` at strides 4, 8, 16, 32."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        m = spec.width_multiplier
        if spec.stem == "d":
            self.stem = build_stem_d(spec.activation, m)
        else:
            self.stem = StemVanilla(spec.activation, scaled_width(64, m))
        cin = self.stem.out_channels
        block_index = 0
        self.stages = nn.ModuleList()
        for stage_idx, (count, planes) in enumerate(zip(spec.block_counts, STAGE_PLANES)):
            planes = scaled_width(planes, m)
            blocks = []
            for i in range(count):
                block_index += 1
                stride = 2 if (i == 0 and stage_idx > 0) else 1
                rate = stochastic_depth_rate(spec.stochastic_depth_init, block_index, spec.total_blocks)
                blocks.append(Bottleneck(cin, planes, stride, spec, rate))
                cin = planes * EXPANSION
            self.stages.append(nn.Sequential(*blocks))
        self.out_channels = {f"C{k}": c for k, c in zip(range(2, 6), spec.stage_channels)}
        self.reset_parameters()

    def reset_parameters(self):
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, mode="fan_out", nonlinearity="relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.BatchNorm2d):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
        # each residual branch starts at zero so every block begins as identity
        for block in self.blocks():
            nn.init.zeros_(block.conv3[1].weight)

    def blocks(self) -> list[Bottleneck]:
        return [b for stage in self.stages for b in stage]

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input spatial size {(h, w)} must be divisible by 32")
        x = self.stem(x)
        feats = {}
        for k, stage in zip(range(2, 6), self.stages):
            x = stage(x)
            feats[f"C{k}"] = x
        return feats


def build_resnet_rs(spec: BackboneSpec) -> ResNetRS:
    return ResNetRS(spec)


def save_weights(module: nn.Module, path: str | Path) -> None:
    """Write the flat ``name -> tensor`` state dict with ``torch.save``."""
    torch.save({k: v.detach().cpu().clone() for k, v in module.state_dict().items()}, path)


def load_weights(module: nn.Module, path: str | Path, strict: bool = True) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    module.load_state_dict(state, strict=strict)
