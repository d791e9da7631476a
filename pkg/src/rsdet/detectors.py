"""RetinaNet-RS and Cascade RCNN-RS models.

Both expose the same surface used by training, evaluation and benchmarking:

* ``forward(images)`` runs the network and returns raw outputs,
* ``postprocess(raw)`` turns raw outputs into :class:`DetectionResult` lists,
* ``loss(images, targets)`` returns a :class:`LossBundle`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
from torchvision.ops import roi_align

from .backbone import BackboneSpec, ResNetRS
from .geometry import (MAX_LOG_RATIO, AnchorGrid, clip_boxes, decode_boxes, encode_boxes, generate_anchors,
                       match_targets)
from .heads import (HeadConfig, MaskHead, RawPredictions, RetinaNetHead, RPNHead, build_cascade_box_heads,
                    generate_proposals, roi_extract)
from .losses import FocalParams, LossBundle, StageTargets, box_loss, cascade_losses, focal_loss, mask_loss, \
    rpn_loss, sample_anchors
from .postprocess import MAX_DETECTIONS, NMS_THRESHOLD, SCORE_THRESHOLD, DetectionResult, assemble
from .pyramid import FPN
from .scaling import RCNN, RETINANET


@dataclass
class DetectorConfig:
    family: str = RETINANET
    num_classes: int = 80
    image_size: int = 640
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    fpn_width: int = 256
    fpn_norm: bool = True
    head: HeadConfig = field(default_factory=HeadConfig)
    focal: FocalParams = field(default_factory=FocalParams)
    with_masks: bool = False
    anchor_scale: float = 3.0
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    retinanet_match: tuple[float, float] = (0.5, 0.4)
    rpn_match: tuple[float, float] = (0.7, 0.3)
    rpn_batch_per_image: int = 256
    roi_batch_per_image: int = 512
    roi_positive_fraction: float = 0.25
    score_thresh: float = SCORE_THRESHOLD
    nms_thresh: float = NMS_THRESHOLD
    max_detections: int = MAX_DETECTIONS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspect_ratios"] = list(self.aspect_ratios)
        d["head"]["cascade_iou_thresholds"] = list(self.head.cascade_iou_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["backbone"] = BackboneSpec(**d.get("backbone", {}))
        d["head"] = HeadConfig(**d.get("head", {}))
        d["focal"] = FocalParams(**d.get("focal", {}))
        for key in ("aspect_ratios", "retinanet_match", "rpn_match"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class _Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        act = cfg.backbone.activation
        self.backbone = ResNetRS(cfg.backbone)
        chans = self.backbone.out_channels
        self.fpn = FPN((chans["C3"], chans["C4"], chans["C5"]), cfg.fpn_width, act, cfg.fpn_norm)
        self._anchor_cache: dict = {}

    def anchors(self, image_size, device=None, dtype=torch.float32) -> AnchorGrid:
        key = (tuple(image_size), str(device), dtype)
        if key not in self._anchor_cache:
            grid = generate_anchors(tuple(image_size), base_scale=self.cfg.anchor_scale,
                                    aspect_ratios=self.cfg.aspect_ratios)
            grid.boxes = {k: v.to(device=device, dtype=dtype) for k, v in grid.boxes.items()}
            self._anchor_cache[key] = grid
        return self._anchor_cache[key]

    def features(self, images):
        return self.fpn(self.backbone(images))

    @torch.no_grad()
    def detect(self, images) -> list[DetectionResult]:
        return self.postprocess(self.forward(images))


class RetinaNetRS(_Detector):
    def __init__(self, cfg: DetectorConfig):
        super().__init__(cfg)
        self.head = RetinaNetHead(cfg.fpn_width, cfg.num_classes, len(cfg.aspect_ratios), cfg.head.conv_width,
                                  cfg.head.num_convs, cfg.backbone.activation)

    def forward(self, images) -> RawPredictions:
        raw = self.head(self.features(images))
        raw.extras["image_size"] = tuple(images.shape[-2:])
        return raw

    def postprocess(self, raw: RawPredictions) -> list[DetectionResult]:
        image_size = raw.extras["image_size"]
        logits, deltas = raw.flatten()
        anchors = self.anchors(image_size, logits.device, logits.dtype).concat()
        c = self.cfg
        return [assemble(logits[b], deltas[b], anchors, image_size, c.score_thresh, c.nms_thresh, c.max_detections)
                for b in range(len(logits))]

    def loss(self, images, targets) -> LossBundle:
        raw = self.forward(images)
        logits, deltas = raw.flatten()
        anchors = self.anchors(raw.extras["image_size"], logits.device, logits.dtype).concat()
        cls_t, box_t, valid, pos = [], [], [], []
        for tgt in targets:
            gt = tgt["boxes"].to(anchors)
            m = match_targets(anchors, gt, *self.cfg.retinanet_match, force_best=True)
            onehot = torch.zeros(len(anchors), self.cfg.num_classes, dtype=logits.dtype, device=logits.device)
            p = m.positive
            if p.any():
                onehot[p, tgt["class_ids"][m.assignment[p]]] = 1.0
            enc = torch.zeros_like(anchors)
            if len(gt):
                enc[p] = encode_boxes(gt[m.assignment[p]], anchors[p])
            cls_t.append(onehot)
            box_t.append(enc)
            valid.append(~m.ignored)
            pos.append(p)
        cls_t, box_t = torch.stack(cls_t), torch.stack(box_t)
        valid, pos = torch.stack(valid), torch.stack(pos)
        num_pos = pos.sum().clamp(min=1).to(logits.dtype)
        return LossBundle({
            "cls": focal_loss(logits, cls_t, self.cfg.focal, valid=valid, normalizer=num_pos),
            "box": box_loss(deltas, box_t, pos),
        })


@dataclass
class CascadeOutputs:
    """Raw two-stage outputs for a batch.

    ``stage_boxes[t]`` are the boxes fed to stage ``t`` (concatenated over
    images, split by ``rois_per_image``); ``stage_logits``/``stage_deltas``
    are that stage's predictions for them.
    """

    rpn: RawPredictions
    proposals: list[torch.Tensor]
    stage_boxes: list[torch.Tensor]
    stage_logits: list[torch.Tensor]
    stage_deltas: list[torch.Tensor]
    rois_per_image: list[int]
    image_size: tuple[int, int]
    pyramid: dict | None = None


def _split(t: torch.Tensor, sizes: list[int]) -> list[torch.Tensor]:
    return list(torch.split(t, sizes))


class CascadeRCNNRS(_Detector):
    def __init__(self, cfg: DetectorConfig):
        super().__init__(cfg)
        act = cfg.backbone.activation
        h = cfg.head
        self.rpn = RPNHead(cfg.fpn_width, len(cfg.aspect_ratios), cfg.fpn_width, h.rpn_num_convs, act)
        self.box_heads = build_cascade_box_heads(cfg.fpn_width, cfg.num_classes, h, act)
        self.mask_head = (MaskHead(cfg.fpn_width, cfg.num_classes, h.conv_width, h.mask_num_convs, act)
                          if cfg.with_masks else None)
        # swapped out by tests to record the thresholds each stage matches with
        self.matcher = match_targets

    @property
    def num_stages(self) -> int:
        return self.cfg.head.num_stages

    def _refine(self, deltas, boxes, sizes, image_size):
        if deltas.shape[-1] != 4:
            raise NotImplementedError("box refinement between stages needs class-agnostic regression")
        refined = clip_boxes(decode_boxes(deltas.detach(), boxes, MAX_LOG_RATIO), image_size)
        return _split(refined, sizes)

    def forward(self, images) -> CascadeOutputs:
        image_size = tuple(images.shape[-2:])
        pyr = self.features(images)
        rpn_raw = self.rpn(pyr)
        grid = self.anchors(image_size, images.device, images.dtype)
        n_props = self.cfg.head.rpn_train_proposals if self.training else self.cfg.head.rpn_eval_proposals
        proposals = [p.to(images.dtype) for p in generate_proposals(
            rpn_raw, grid, self.cfg.head.rpn_pre_nms_topk, self.cfg.head.rpn_nms_threshold, n_props)]
        boxes = proposals
        sizes = [len(p) for p in proposals]
        stage_boxes, stage_logits, stage_deltas = [], [], []
        for t in range(self.num_stages):
            feats = roi_extract(pyr, boxes, self.cfg.head.roi_size)
            logits, deltas = self.box_heads[t](feats)
            cat = torch.cat(boxes) if boxes else images.new_zeros((0, 4))
            stage_boxes.append(cat)
            stage_logits.append(logits)
            stage_deltas.append(deltas)
            if t + 1 < self.num_stages:
                boxes = self._refine(deltas, cat, sizes, image_size)
        return CascadeOutputs(rpn_raw, proposals, stage_boxes, stage_logits, stage_deltas, sizes, image_size, pyr)

    def postprocess(self, out: CascadeOutputs) -> list[DetectionResult]:
        c = self.cfg
        if c.head.cascade_class_ensemble:
            probs = torch.stack([torch.softmax(l, -1) for l in out.stage_logits]).mean(0)
            logits = probs.clamp(min=1e-12).log()
        else:
            logits = out.stage_logits[-1]
        deltas = out.stage_deltas[-1]
        if deltas.shape[-1] != 4:
            deltas = deltas.view(len(deltas), c.num_classes, 4)
        results = []
        for lg, dl, bx in zip(_split(logits, out.rois_per_image), _split(deltas, out.rois_per_image),
                              _split(out.stage_boxes[-1], out.rois_per_image)):
            results.append(assemble(lg, dl, bx, out.image_size, c.score_thresh, c.nms_thresh, c.max_detections,
                                    activation="softmax"))
        if self.mask_head is not None and out.pyramid is not None:
            feats = roi_extract(out.pyramid, [r.boxes for r in results], c.head.mask_roi_size)
            if len(feats):
                probs = torch.sigmoid(self.mask_head(feats))
                cls = torch.cat([r.class_ids for r in results])
                sel = probs[torch.arange(len(probs)), cls]
                for r, m in zip(results, _split(sel, [len(r) for r in results])):
                    r.masks = m
        return results

    def loss(self, images, targets) -> LossBundle:
        c = self.cfg
        image_size = tuple(images.shape[-2:])
        pyr = self.features(images)
        rpn_raw = self.rpn(pyr)
        grid = self.anchors(image_size, images.device, images.dtype)
        anchors = grid.concat()
        obj, dts = rpn_raw.flatten()
        rpn_obj, rpn_box = [], []
        for b, tgt in enumerate(targets):
            gt = tgt["boxes"].to(anchors)
            m = self.matcher(anchors, gt, *c.rpn_match, force_best=True)
            enc = torch.zeros_like(anchors)
            if len(gt) and m.positive.any():
                enc[m.positive] = encode_boxes(gt[m.assignment[m.positive]], anchors[m.positive])
            o, bx = rpn_loss(obj[b, :, 0], dts[b], m, enc, c.rpn_batch_per_image)
            rpn_obj.append(o)
            rpn_box.append(bx)
        bundle = LossBundle({"rpn_obj": torch.stack(rpn_obj).mean(), "rpn_box": torch.stack(rpn_box).mean()})

        proposals = generate_proposals(rpn_raw, grid, c.head.rpn_pre_nms_topk, c.head.rpn_nms_threshold,
                                       c.head.rpn_train_proposals)
        boxes = [p.to(images.dtype) for p in proposals]
        stage_out, stage_tgts = [], []
        last_pos = None
        for t, thr in enumerate(c.head.cascade_iou_thresholds):
            sampled, labels, box_t, assigned = [], [], [], []
            for b, tgt in enumerate(targets):
                gt = tgt["boxes"].to(anchors)
                cand = torch.cat([boxes[b], gt]) if len(gt) else boxes[b]
                m = self.matcher(cand, gt, thr, thr)
                pos, neg = sample_anchors(m, c.roi_batch_per_image, c.roi_positive_fraction)
                idx = torch.cat([pos, neg])
                lab = torch.zeros(len(idx), dtype=torch.long)
                enc = torch.zeros((len(idx), 4), dtype=cand.dtype)
                if len(pos):
                    gi = m.assignment[pos]
                    lab[: len(pos)] = tgt["class_ids"][gi] + 1
                    enc[: len(pos)] = encode_boxes(gt[gi], cand[pos])
                sampled.append(cand[idx])
                labels.append(lab)
                box_t.append(enc)
                assigned.append(torch.cat([m.assignment[pos], torch.full((len(neg),), -1, dtype=torch.long)]))
            sizes = [len(s) for s in sampled]
            feats = roi_extract(pyr, sampled, c.head.roi_size)
            logits, deltas = self.box_heads[t](feats)
            stage_out.append((logits, deltas))
            stage_tgts.append(StageTargets(torch.cat(labels), torch.cat(box_t)))
            last_pos = (sampled, assigned)
            if t + 1 < self.num_stages:
                boxes = self._refine(deltas, torch.cat(sampled), sizes, image_size)
        bundle.update(cascade_losses(stage_out, stage_tgts))

        if self.mask_head is not None:
            bundle.components["mask"] = self._mask_loss(pyr, targets, *last_pos)
        return bundle

    def _mask_loss(self, pyr, targets, sampled, assigned):
        rois, gts, classes = [], [], []
        size = 2 * self.cfg.head.mask_roi_size
        for b, tgt in enumerate(targets):
            keep = assigned[b] >= 0
            r = sampled[b][keep]
            rois.append(r)
            gi = assigned[b][keep]
            classes.append(tgt["class_ids"][gi])
            if len(r) == 0 or "masks" not in tgt:
                gts.append(r.new_zeros((len(r), size, size)))
                continue
            m = tgt["masks"][gi].to(r.dtype)[:, None]
            idx = torch.arange(len(r), dtype=r.dtype)[:, None]
            xyxy = torch.cat([idx, r[:, [1, 0, 3, 2]]], dim=1)
            crop = roi_align(m, xyxy, size, spatial_scale=1.0, sampling_ratio=2, aligned=True)
            gts.append((crop[:, 0] >= 0.5).to(r.dtype))
        feats = roi_extract(pyr, rois, self.cfg.head.mask_roi_size)
        if len(feats) == 0:
            return sum(p.sum() for p in self.mask_head.parameters()) * 0.0
        return mask_loss(self.mask_head(feats), torch.cat(gts), torch.cat(classes))


def build_detector(cfg: DetectorConfig) -> _Detector:
    if cfg.family == RETINANET:
        return RetinaNetRS(cfg)
    if cfg.family == RCNN:
        return CascadeRCNNRS(cfg)
    raise ValueError(f"unknown detector family {cfg.family!r}")
