"""Decode, per-class NMS and top-k selection of final detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .geometry import MAX_LOG_RATIO, clip_boxes, decode_boxes, iou_matrix

SCORE_THRESHOLD = 0.05
NMS_THRESHOLD = 0.5
MAX_DETECTIONS = 100


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float, max_out: int | None = None) -> torch.Tensor:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (equal scores: lower index
    first). A box is suppressed when its IoU with an already kept box is at
    least ``iou_threshold``, so kept pairs always overlap strictly less.

    Returns:
        Indices of kept boxes, highest score first.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if len(boxes) == 0 or max_out == 0:
        return torch.zeros(0, dtype=torch.long, device=boxes.device)
    order = torch.sort(scores, descending=True, stable=True).indices
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if max_out is not None and len(keep) >= max_out:
            break
        rest = order[1:]
        if len(rest) == 0:
            break
        overlap = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overlap < iou_threshold]
    return torch.stack(keep)


def batched_nms(boxes, scores, class_ids, iou_threshold):
    """Per-class NMS; kept indices sorted by score, descending."""
    kept = []
    for c in torch.unique(class_ids):
        idx = torch.nonzero(class_ids == c).flatten()
        kept.append(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    if not kept:
        return torch.zeros(0, dtype=torch.long, device=boxes.device)
    kept = torch.cat(kept)
    return kept[torch.sort(scores[kept], descending=True, stable=True).indices]


@dataclass
class DetectionResult:
    boxes: torch.Tensor
    scores: torch.Tensor
    class_ids: torch.Tensor
    masks: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls, dtype=torch.float32) -> "DetectionResult":
        return cls(torch.zeros((0, 4), dtype=dtype), torch.zeros(0, dtype=dtype), torch.zeros(0, dtype=torch.long))

    def to_dict(self) -> dict:
        return {
            "boxes": self.boxes.detach().double().cpu().tolist(),
            "scores": self.scores.detach().double().cpu().tolist(),
            "class_ids": self.class_ids.detach().cpu().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionResult":
        return cls(
            torch.tensor(d["boxes"], dtype=torch.float64).reshape(-1, 4),
            torch.tensor(d["scores"], dtype=torch.float64),
            torch.tensor(d["class_ids"], dtype=torch.long),
        )

    def scaled(self, factor: float) -> "DetectionResult":
        return DetectionResult(self.boxes * factor, self.scores, self.class_ids, self.masks, dict(self.meta))


def select_detections(scores: torch.Tensor, boxes: torch.Tensor, score_thresh: float = SCORE_THRESHOLD,
                      nms_thresh: float = NMS_THRESHOLD, max_detections: int = MAX_DETECTIONS,
                      pre_nms_topk: int | None = 5000) -> DetectionResult:
    """Filter ``(N, K)`` class probabilities and pick the final detections.

    ``boxes`` is ``(N, 4)`` when regression is class-agnostic or ``(N, K, 4)``
    otherwise.
    """
    cand = torch.nonzero(scores > score_thresh)
    if len(cand) == 0:
        return DetectionResult.empty(boxes.dtype)
    row, cls = cand[:, 0], cand[:, 1]
    cand_scores = scores[row, cls]
    if pre_nms_topk is not None and len(cand_scores) > pre_nms_topk:
        top = torch.sort(cand_scores, descending=True, stable=True).indices[:pre_nms_topk]
        row, cls, cand_scores = row[top], cls[top], cand_scores[top]
    cand_boxes = boxes[row] if boxes.ndim == 2 else boxes[row, cls]
    keep = batched_nms(cand_boxes, cand_scores, cls, nms_thresh)[:max_detections]
    return DetectionResult(cand_boxes[keep], cand_scores[keep], cls[keep], meta={"rows": row[keep]})


def assemble(class_logits: torch.Tensor, box_deltas: torch.Tensor, anchors: torch.Tensor,
             image_size: tuple[int, int], score_thresh: float = SCORE_THRESHOLD, nms_thresh: float = NMS_THRESHOLD,
             max_detections: int = MAX_DETECTIONS, activation: str = "sigmoid",
             pre_nms_topk: int | None = 5000) -> DetectionResult:
    """Decode one image's raw outputs into final detections.

    Args:
        class_logits: ``(N, K)`` per-anchor logits (``"sigmoid"``) or
            ``(N, K + 1)`` with background in column 0 (``"softmax"``).
        box_deltas: ``(N, 4)`` or ``(N, K, 4)`` deltas relative to ``anchors``.
        anchors: ``(N, 4)`` anchors or proposals.
        image_size: ``(H, W)`` used to clip decoded boxes.
    """
    if activation == "sigmoid":
        scores = torch.sigmoid(class_logits)
    elif activation == "softmax":
        scores = torch.softmax(class_logits, dim=-1)[:, 1:]
    else:
        raise ValueError(f"activation must be 'sigmoid' or 'softmax', got {activation!r}")
    if box_deltas.ndim == 3:
        n, k, _ = box_deltas.shape
        flat = decode_boxes(box_deltas.reshape(-1, 4), anchors.repeat_interleave(k, dim=0), MAX_LOG_RATIO)
        boxes = clip_boxes(flat, image_size).reshape(n, k, 4)
    else:
        boxes = clip_boxes(decode_boxes(box_deltas, anchors, MAX_LOG_RATIO), image_size)
    return select_detections(scores, boxes, score_thresh, nms_thresh, max_detections, pre_nms_topk)
