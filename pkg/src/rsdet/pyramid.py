"""Feature pyramid producing P3..P7 from backbone C3..C5."""

from __future__ import annotations

import torch.nn as nn
import torch.nn.functional as F

from .backbone import make_activation, make_norm

PYRAMID_LEVELS = (3, 4, 5, 6, 7)


class FPN(nn.Module):
    """Top-down pyramid at a uniform channel width.

    P3..P5 come from 1x1 laterals plus nearest-neighbour upsampled coarser
    levels, followed by a 3x3 output conv. P6 is a stride-2 3x3 conv on C5 and
    P7 a stride-2 3x3 conv on the activated P6.

    Args:
        in_channels: channel widths of C3, C4, C5.
        width: output width of every level.
        activation: ``"silu"`` or ``"relu"``.
        use_norm: add batch norm after every output conv (and the activation
            on P3..P5).
    """

    def __init__(self, in_channels: tuple[int, int, int], width: int = 256, activation: str = "silu",
                 use_norm: bool = True):
        super().__init__()
        self.width = width
        self.use_norm = use_norm
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1, bias=not use_norm) for _ in in_channels)
        self.p6 = nn.Conv2d(in_channels[-1], width, 3, stride=2, padding=1, bias=not use_norm)
        self.p7 = nn.Conv2d(width, width, 3, stride=2, padding=1, bias=not use_norm)
        n_out = len(PYRAMID_LEVELS)
        self.norms = nn.ModuleList(make_norm(width) if use_norm else nn.Identity() for _ in range(n_out))
        self.out_act = nn.ModuleList(
            make_activation(activation) if use_norm else nn.Identity() for _ in in_channels
        )
        self.p6_act = make_activation(activation)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, feats):
        c3, c4, c5 = feats["C3"], feats["C4"], feats["C5"]
        # C3 must halve four more times to reach P7, C5 twice
        for name, c, factor in (("C3", c3, 16), ("C4", c4, 8), ("C5", c5, 4)):
            h, w = c.shape[-2:]
            if h % factor or w % factor:
                raise ValueError(f"{name} spatial size {(h, w)} cannot be halved down to P7")
        if c4.shape[-2:] != (c3.shape[-2] // 2, c3.shape[-1] // 2) or \
                c5.shape[-2:] != (c4.shape[-2] // 2, c4.shape[-1] // 2):
            raise ValueError("C3, C4, C5 must have strides 8, 16, 32")
        lat = [conv(c) for conv, c in zip(self.lateral, (c3, c4, c5))]
        top_down = [None, None, lat[2]]
        for i in (1, 0):
            top_down[i] = lat[i] + F.interpolate(top_down[i + 1], size=lat[i].shape[-2:], mode="nearest")
        out = {}
        for i, lvl in enumerate((3, 4, 5)):
            out[f"P{lvl}"] = self.out_act[i](self.norms[i](self.output[i](top_down[i])))
        p6 = self.norms[3](self.p6(c5))
        out["P6"] = p6
        out["P7"] = self.norms[4](self.p7(self.p6_act(p6)))
        return out


def build_fpn(in_channels, width=256, activation="silu", use_norm=True) -> FPN:
    return FPN(tuple(in_channels), width, activation, use_norm)
