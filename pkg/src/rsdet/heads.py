"""Prediction heads for RetinaNet-RS and Cascade RCNN-RS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torchvision.ops import roi_align

from .backbone import make_activation, make_norm
from .geometry import MAX_LOG_RATIO, AnchorGrid, clip_boxes, decode_boxes
from .postprocess import nms

PRIOR_PROBABILITY = 0.01
ROI_LEVELS = (3, 4, 5)


@dataclass
class HeadConfig:
    """Shape of the prediction heads.

    ``num_convs`` and ``conv_width`` apply to the RetinaNet subnets and to the
    cascade box heads; ``fc_width`` only to the latter.
    """

    num_convs: int = 4
    conv_width: int = 256
    fc_width: int = 1024
    cascade_iou_thresholds: tuple[float, ...] = (0.6, 0.7)
    class_agnostic_regression: bool = True
    rpn_num_convs: int = 2
    mask_num_convs: int = 4
    roi_size: int = 7
    mask_roi_size: int = 14
    cascade_class_ensemble: bool = False
    rpn_nms_threshold: float = 0.7
    rpn_pre_nms_topk: int = 1000
    rpn_train_proposals: int = 500
    rpn_eval_proposals: int = 1000

    def __post_init__(self):
        self.cascade_iou_thresholds = tuple(float(t) for t in self.cascade_iou_thresholds)
        if self.num_convs < 1:
            raise ValueError(f"num_convs must be >= 1, got {self.num_convs}")
        th = self.cascade_iou_thresholds
        if not th or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"cascade_iou_thresholds must be non-empty and strictly increasing, got {th}")

    @property
    def num_stages(self) -> int:
        return len(self.cascade_iou_thresholds)

    @classmethod
    def regular(cls, **kw) -> "HeadConfig":
        return cls(**kw)

    @classmethod
    def heavy(cls, **kw) -> "HeadConfig":
        """Large-model variant: 7-conv heads and a third stage at IoU 0.8."""
        kw.setdefault("num_convs", 7)
        kw.setdefault("cascade_iou_thresholds", (0.6, 0.7, 0.8))
        return cls(**kw)

    @classmethod
    def variant(cls, name: str, **kw) -> "HeadConfig":
        if name == "regular":
            return cls.regular(**kw)
        if name == "heavy":
            return cls.heavy(**kw)
        raise ValueError(f"unknown head variant {name!r}; expected 'regular' or 'heavy'")


@dataclass
class RawPredictions:
    """Dense per-level outputs in NCHW layout.

    Class maps have ``A * K`` channels (anchor-major) and box maps ``A * 4``.
    """

    class_logits: dict[int, torch.Tensor]
    box_deltas: dict[int, torch.Tensor]
    num_classes: int
    num_anchors: int = 3
    extras: dict = field(default_factory=dict)

    @property
    def levels(self) -> list[int]:
        return sorted(self.class_logits)

    def flatten(self) -> tuple[torch.Tensor, torch.Tensor]:
        """``(N, total_anchors, K)`` logits and ``(N, total_anchors, 4)`` deltas.

        Rows follow :class:`~rsdet.geometry.AnchorGrid` order.
        """
        cls, box = [], []
        for lvl in self.levels:
            cls.append(_flatten_level(self.class_logits[lvl], self.num_anchors, self.num_classes))
            box.append(_flatten_level(self.box_deltas[lvl], self.num_anchors, 4))
        return torch.cat(cls, dim=1), torch.cat(box, dim=1)


def _flatten_level(t: torch.Tensor, a: int, c: int) -> torch.Tensor:
    n, _, h, w = t.shape
    return t.view(n, a, c, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, c)


class SharedConvTower(nn.Module):
    """3x3 convs shared across pyramid levels with one norm set per level."""

    def __init__(self, cin: int, width: int, num_convs: int, num_levels: int = 5, activation: str = "silu"):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(cin if i == 0 else width, width, 3, padding=1, bias=False) for i in range(num_convs)
        )
        self.norms = nn.ModuleList(
            nn.ModuleList(make_norm(width) for _ in range(num_convs)) for _ in range(num_levels)
        )
        self.act = make_activation(activation)
        for conv in self.convs:
            nn.init.normal_(conv.weight, std=0.01)

    def forward(self, x, level_index: int):
        for conv, norm in zip(self.convs, self.norms[level_index]):
            x = self.act(norm(conv(x)))
        return x


class RetinaNetHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, num_anchors: int = 3, width: int = 256,
                 num_convs: int = 4, activation: str = "silu", levels=(3, 4, 5, 6, 7)):
        super().__init__()
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        self.levels = tuple(levels)
        self.cls_tower = SharedConvTower(in_channels, width, num_convs, len(levels), activation)
        self.box_tower = SharedConvTower(in_channels, width, num_convs, len(levels), activation)
        self.cls_pred = nn.Conv2d(width, num_anchors * num_classes, 3, padding=1)
        self.box_pred = nn.Conv2d(width, num_anchors * 4, 3, padding=1)
        nn.init.normal_(self.cls_pred.weight, std=0.01)
        nn.init.constant_(self.cls_pred.bias, -math.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY))
        nn.init.normal_(self.box_pred.weight, std=0.01)
        nn.init.zeros_(self.box_pred.bias)

    def forward(self, pyramid: dict[str, torch.Tensor]) -> RawPredictions:
        if len(pyramid) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} pyramid levels, got {len(pyramid)}")
        cls, box = {}, {}
        for i, lvl in enumerate(self.levels):
            p = pyramid[f"P{lvl}"]
            cls[lvl] = self.cls_pred(self.cls_tower(p, i))
            box[lvl] = self.box_pred(self.box_tower(p, i))
        return RawPredictions(cls, box, self.num_classes, self.num_anchors)


def retinanet_head(in_channels: int, num_classes: int, **kw) -> RetinaNetHead:
    return RetinaNetHead(in_channels, num_classes, **kw)


class RPNHead(nn.Module):
    """Class-agnostic objectness (A channels) and deltas (4A channels) per level."""

    def __init__(self, in_channels: int, num_anchors: int = 3, width: int = 256, num_convs: int = 2,
                 activation: str = "silu", levels=(3, 4, 5, 6, 7)):
        super().__init__()
        self.num_anchors = num_anchors
        self.levels = tuple(levels)
        self.tower = SharedConvTower(in_channels, width, num_convs, len(levels), activation)
        self.objectness = nn.Conv2d(width, num_anchors, 1)
        self.deltas = nn.Conv2d(width, num_anchors * 4, 1)
        for conv in (self.objectness, self.deltas):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)

    def forward(self, pyramid) -> RawPredictions:
        obj, box = {}, {}
        for i, lvl in enumerate(self.levels):
            t = self.tower(pyramid[f"P{lvl}"], i)
            obj[lvl] = self.objectness(t)
            box[lvl] = self.deltas(t)
        return RawPredictions(obj, box, num_classes=1, num_anchors=self.num_anchors)


def rpn_head(in_channels: int, **kw) -> RPNHead:
    return RPNHead(in_channels, **kw)


@torch.no_grad()
def generate_proposals(raw: RawPredictions, anchors: AnchorGrid, pre_nms_topk: int = 1000,
                       nms_threshold: float = 0.7, post_nms_topk: int = 1000) -> list[torch.Tensor]:
    """Top-k per level, decode, clip, NMS, keep the best ``post_nms_topk`` per image."""
    results = []
    n = next(iter(raw.class_logits.values())).shape[0]
    image_size = anchors.image_size
    for b in range(n):
        boxes_all, scores_all = [], []
        for lvl in raw.levels:
            logits = _flatten_level(raw.class_logits[lvl][b:b + 1], raw.num_anchors, 1)[0, :, 0]
            deltas = _flatten_level(raw.box_deltas[lvl][b:b + 1], raw.num_anchors, 4)[0]
            k = min(pre_nms_topk, len(logits))
            scores, idx = logits.float().topk(k)
            boxes = decode_boxes(deltas[idx].float(), anchors.boxes[lvl][idx].to(deltas.device).float(),
                                 max_log_ratio=MAX_LOG_RATIO)
            boxes_all.append(clip_boxes(boxes, image_size))
            scores_all.append(scores)
        boxes = torch.cat(boxes_all)
        scores = torch.cat(scores_all)
        valid = ((boxes[:, 2] - boxes[:, 0]) > 1e-3) & ((boxes[:, 3] - boxes[:, 1]) > 1e-3)
        boxes, scores = boxes[valid], scores[valid]
        keep = nms(boxes, scores, nms_threshold, post_nms_topk)
        results.append(boxes[keep])
    return results


def roi_levels(boxes: torch.Tensor, levels=ROI_LEVELS, canonical_level: int = 4, canonical_size: float = 224.0):
    """Pyramid level for each ROI: floor(4 + log2(sqrt(area) / 224)) clamped to the given range."""
    area = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp(min=1e-6)
    lvl = torch.floor(canonical_level + torch.log2(torch.sqrt(area) / canonical_size) + 1e-6)
    return lvl.clamp(min(levels), max(levels)).long()


def roi_extract(features: dict[str, torch.Tensor], rois: list[torch.Tensor], output_size: int,
                sampling_ratio: int = 2, levels=ROI_LEVELS) -> torch.Tensor:
    """Bilinear ROI-align crops, one per ROI, from the level picked by :func:`roi_levels`.

    Args:
        features: pyramid maps keyed ``"P3"`` ... in NCHW layout.
        rois: one ``(R_i, 4)`` yxyx box tensor per image, already clipped.
        output_size: side length of each crop.

    Returns:
        ``(sum R_i, C, output_size, output_size)`` crops in concatenated ROI order.
    """
    ref = features[f"P{levels[0]}"]
    c = ref.shape[1]
    total = sum(len(r) for r in rois)
    out = ref.new_zeros((total, c, output_size, output_size))
    if total == 0:
        return out
    batch_idx = torch.cat([torch.full((len(r),), i, dtype=ref.dtype, device=ref.device) for i, r in enumerate(rois)])
    boxes = torch.cat(rois).to(ref.dtype)
    assigned = roi_levels(boxes, levels)
    for lvl in levels:
        sel = torch.nonzero(assigned == lvl).flatten()
        if len(sel) == 0:
            continue
        b = boxes[sel]
        xyxy = torch.stack([batch_idx[sel], b[:, 1], b[:, 0], b[:, 3], b[:, 2]], dim=1)
        out[sel] = roi_align(features[f"P{lvl}"], xyxy, output_size, spatial_scale=1.0 / 2**lvl,
                             sampling_ratio=sampling_ratio, aligned=True)
    return out


class CascadeBoxHead(nn.Module):
    """Conv stack -> one FC layer -> class logits (K + 1, background at 0) and box deltas."""

    def __init__(self, in_channels: int, num_classes: int, cfg: HeadConfig, activation: str = "silu"):
        super().__init__()
        self.num_classes = num_classes
        self.class_agnostic = cfg.class_agnostic_regression
        layers = []
        cin = in_channels
        for _ in range(cfg.num_convs):
            layers += [nn.Conv2d(cin, cfg.conv_width, 3, padding=1, bias=False), make_norm(cfg.conv_width),
                       make_activation(activation)]
            cin = cfg.conv_width
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(cfg.conv_width * cfg.roi_size**2, cfg.fc_width)
        self.fc_act = make_activation(activation)
        self.cls_score = nn.Linear(cfg.fc_width, num_classes + 1)
        self.box_pred = nn.Linear(cfg.fc_width, 4 if self.class_agnostic else 4 * num_classes)
        for m in self.convs:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.normal_(self.box_pred.weight, std=0.001)
        nn.init.zeros_(self.box_pred.bias)

    def forward(self, roi_feats):
        x = self.convs(roi_feats).flatten(1)
        x = self.fc_act(self.fc(x))
        return self.cls_score(x), self.box_pred(x)


def build_cascade_box_heads(in_channels: int, num_classes: int, cfg: HeadConfig,
                            activation: str = "silu") -> nn.ModuleList:
    """One independent head per cascade stage."""
    return nn.ModuleList(CascadeBoxHead(in_channels, num_classes, cfg, activation) for _ in range(cfg.num_stages))


def cascade_box_heads(heads: nn.ModuleList, roi_feats: torch.Tensor, stage: int, cfg: HeadConfig):
    if not 0 <= stage < cfg.num_stages:
        raise ValueError(f"stage {stage} outside 0..{cfg.num_stages - 1}")
    return heads[stage](roi_feats)


class MaskHead(nn.Module):
    """Conv stack, one 3x3 stride-2 deconv, then per-class 1x1 mask logits."""

    def __init__(self, in_channels: int, num_classes: int, width: int = 256, num_convs: int = 4,
                 activation: str = "silu"):
        super().__init__()
        layers = []
        cin = in_channels
        for _ in range(num_convs):
            layers += [nn.Conv2d(cin, width, 3, padding=1, bias=False), make_norm(width), make_activation(activation)]
            cin = width
        self.convs = nn.Sequential(*layers)
        self.deconv = nn.ConvTranspose2d(width, width, 3, stride=2, padding=1, output_padding=1)
        self.deconv_act = make_activation(activation)
        self.predictor = nn.Conv2d(width, num_classes, 1)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, roi_feats):
        return self.predictor(self.deconv_act(self.deconv(self.convs(roi_feats))))


def mask_head(in_channels: int, num_classes: int, **kw) -> MaskHead:
    return MaskHead(in_channels, num_classes, **kw)
