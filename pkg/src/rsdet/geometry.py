"""Box algebra shared by both detector families.

All boxes are ``(ymin, xmin, ymax, xmax)`` in pixel units and live in an
``(N, 4)`` floating point tensor. Anchors, regression targets and final
detections all use this convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

LEVELS = (3, 4, 5, 6, 7)
ASPECT_RATIOS = (1.0, 2.0, 0.5)
BASE_ANCHOR_SCALE = 3.0

NEGATIVE = -1
IGNORE = -2

# exp() guard for decoded log-size deltas
MAX_LOG_RATIO = math.log(1000.0 / 16)


def as_boxes(boxes, dtype=None) -> torch.Tensor:
    """Coerce an array-like into an ``(N, 4)`` box tensor."""
    t = torch.as_tensor(boxes, dtype=dtype)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t.reshape(-1, 4)


def validate_boxes(boxes: torch.Tensor) -> None:
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"boxes must be (N, 4), got {tuple(boxes.shape)}")
    if not torch.isfinite(boxes).all():
        raise ValueError("boxes contain non-finite coordinates")
    if (boxes[:, 2] < boxes[:, 0]).any() or (boxes[:, 3] < boxes[:, 1]).any():
        raise ValueError("boxes must satisfy ymax >= ymin and xmax >= xmin")


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise intersection-over-union.

    Args:
        a: ``(N, 4)`` boxes.
        b: ``(M, 4)`` boxes.

    Returns:
        ``(N, M)`` tensor with entries in ``[0, 1]``. Pairs whose union is
        empty (two zero-area boxes) get 0 rather than NaN.
    """
    a = as_boxes(a)
    b = as_boxes(b, dtype=a.dtype)
    area_a = box_area(a)
    area_b = box_area(b)
    tl = torch.maximum(a[:, None, :2], b[None, :, :2])
    br = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (br - tl).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny), torch.zeros_like(inter))
    return iou.clamp(0.0, 1.0)


def clip_boxes(boxes: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    h, w = image_size
    y = boxes[:, 0::2].clamp(0, h)
    x = boxes[:, 1::2].clamp(0, w)
    return torch.stack([y[:, 0], x[:, 0], y[:, 1], x[:, 1]], dim=1)


@dataclass
class AnchorGrid:
    """Anchors for pyramid levels 3..7.

    ``boxes[level]`` holds ``H_L * W_L * len(aspect_ratios)`` anchors ordered
    row-major over the grid with the aspect-ratio index varying fastest, which
    is the same order a head's ``(A * C, H, W)`` output flattens to.
    """

    image_size: tuple[int, int]
    boxes: dict[int, torch.Tensor]
    aspect_ratios: tuple[float, ...]
    base_anchor_scale: float
    grid_sizes: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def levels(self) -> list[int]:
        return sorted(self.boxes)

    @property
    def anchors_per_location(self) -> int:
        return len(self.aspect_ratios)

    def stride(self, level: int) -> int:
        return 2**level

    def concat(self) -> torch.Tensor:
        return torch.cat([self.boxes[lvl] for lvl in self.levels], dim=0)

    def __len__(self) -> int:
        return sum(len(b) for b in self.boxes.values())


def anchor_count(image_size: tuple[int, int], levels: Sequence[int] = LEVELS, num_aspect_ratios: int = 3) -> int:
    """Closed-form anchor count: sum over levels of ceil(H/2^L) * ceil(W/2^L) * A."""
    h, w = image_size
    return sum(math.ceil(h / 2**lvl) * math.ceil(w / 2**lvl) * num_aspect_ratios for lvl in levels)


def generate_anchors(
    image_size: tuple[int, int],
    levels: Sequence[int] = LEVELS,
    base_scale: float = BASE_ANCHOR_SCALE,
    aspect_ratios: Sequence[float] = ASPECT_RATIOS,
    dtype: torch.dtype = torch.float32,
) -> AnchorGrid:
    """Tile anchors over every pyramid level.

    The square anchor edge at level ``L`` is ``base_scale * 2**L``. For
    aspect ratio ``r = h / w`` the anchor keeps that area with
    ``h = edge * sqrt(r)`` and ``w = edge / sqrt(r)``. Centers sit at
    ``(i + 0.5) * stride``.
    """
    h, w = image_size
    coarsest = 2 ** max(levels)
    if h % coarsest or w % coarsest:
        raise ValueError(f"image size {image_size} must be divisible by the coarsest stride {coarsest}")
    boxes = {}
    grid_sizes = {}
    for lvl in levels:
        stride = 2**lvl
        gh, gw = math.ceil(h / stride), math.ceil(w / stride)
        edge = base_scale * stride
        ratios = torch.tensor(aspect_ratios, dtype=torch.float64)
        ah = edge * ratios.sqrt()
        aw = edge / ratios.sqrt()
        cy = (torch.arange(gh, dtype=torch.float64) + 0.5) * stride
        cx = (torch.arange(gw, dtype=torch.float64) + 0.5) * stride
        cy, cx = torch.meshgrid(cy, cx, indexing="ij")
        cy = cy.reshape(-1, 1)
        cx = cx.reshape(-1, 1)
        lvl_boxes = torch.stack(
            [cy - ah / 2, cx - aw / 2, cy + ah / 2, cx + aw / 2], dim=-1
        ).reshape(-1, 4)
        boxes[lvl] = lvl_boxes.to(dtype)
        grid_sizes[lvl] = (gh, gw)
    return AnchorGrid(
        image_size=(h, w),
        boxes=boxes,
        aspect_ratios=tuple(aspect_ratios),
        base_anchor_scale=base_scale,
        grid_sizes=grid_sizes,
    )


def _center_size(boxes: torch.Tensor) -> tuple[torch.Tensor, ...]:
    h = boxes[:, 2] - boxes[:, 0]
    w = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * h, boxes[:, 1] + 0.5 * w, h, w


def encode_boxes(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Center offset / log-size deltas of ``boxes`` relative to ``anchors``.

    Returns ``(dy, dx, dh, dw)`` with ``dy = (cy - cya) / ha`` and
    ``dh = log(h / ha)``. No variance scaling is applied.
    """
    boxes = as_boxes(boxes)
    anchors = as_boxes(anchors, dtype=boxes.dtype)
    if boxes.shape != anchors.shape:
        raise ValueError(f"boxes {tuple(boxes.shape)} and anchors {tuple(anchors.shape)} differ in shape")
    cy, cx, h, w = _center_size(boxes)
    acy, acx, ah, aw = _center_size(anchors)
    return torch.stack(
        [(cy - acy) / ah, (cx - acx) / aw, torch.log(h / ah), torch.log(w / aw)], dim=1
    )


def decode_boxes(deltas: torch.Tensor, anchors: torch.Tensor, max_log_ratio: float | None = None) -> torch.Tensor:
    """Inverse of :func:`encode_boxes`.

    ``max_log_ratio`` clamps the size deltas before ``exp``; inference paths
    pass :data:`MAX_LOG_RATIO`, round-trip callers leave it unset.
    """
    deltas = torch.as_tensor(deltas).reshape(-1, 4)
    anchors = as_boxes(anchors, dtype=deltas.dtype)
    acy, acx, ah, aw = _center_size(anchors)
    dh, dw = deltas[:, 2], deltas[:, 3]
    if max_log_ratio is not None:
        dh = dh.clamp(max=max_log_ratio)
        dw = dw.clamp(max=max_log_ratio)
    cy = deltas[:, 0] * ah + acy
    cx = deltas[:, 1] * aw + acx
    h = torch.exp(dh) * ah
    w = torch.exp(dw) * aw
    return torch.stack([cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w], dim=1)


@dataclass
class MatchResult:
    """Per-anchor assignment.

    ``assignment[i]`` is the matched ground-truth index for positives,
    :data:`NEGATIVE` or :data:`IGNORE` otherwise. ``iou[i]`` is the anchor's
    best IoU against any ground truth (0 when there is none).
    """

    assignment: torch.Tensor
    iou: torch.Tensor
    pos_thresh: float
    neg_thresh: float

    @property
    def positive(self) -> torch.Tensor:
        return self.assignment >= 0

    @property
    def negative(self) -> torch.Tensor:
        return self.assignment == NEGATIVE

    @property
    def ignored(self) -> torch.Tensor:
        return self.assignment == IGNORE

    def __len__(self) -> int:
        return len(self.assignment)


def match_targets(anchors: torch.Tensor, gt: torch.Tensor, pos_thresh: float, neg_thresh: float,
                  force_best: bool = False) -> MatchResult:
    """Assign each anchor to its best-overlapping ground-truth box.

    Anchors whose best IoU is at least ``pos_thresh`` are positive, below
    ``neg_thresh`` negative, and ignored in between. Ties go to the lowest
    ground-truth index.

    With ``force_best`` every ground-truth box that overlaps some anchor also
    claims its single best anchor (first on ties) even when that IoU is under
    ``pos_thresh``, so small objects still get a positive. Boxes are applied in
    index order and a later box wins a contested anchor.
    """
    if pos_thresh < neg_thresh:
        raise ValueError(f"pos_thresh {pos_thresh} must be >= neg_thresh {neg_thresh}")
    anchors = as_boxes(anchors)
    gt = as_boxes(gt, dtype=anchors.dtype)
    n = len(anchors)
    if len(gt) == 0:
        return MatchResult(
            assignment=torch.full((n,), NEGATIVE, dtype=torch.long),
            iou=torch.zeros(n, dtype=anchors.dtype),
            pos_thresh=pos_thresh,
            neg_thresh=neg_thresh,
        )
    iou = iou_matrix(anchors, gt)
    best, _ = iou.max(dim=1)
    # first index attaining the max; torch.max makes no tie-order promise
    cols = torch.arange(len(gt)).expand_as(iou)
    best_idx = torch.where(iou == best[:, None], cols, torch.full_like(cols, len(gt))).min(dim=1).values
    assignment = torch.full((n,), IGNORE, dtype=torch.long)
    assignment[best < neg_thresh] = NEGATIVE
    pos = best >= pos_thresh
    assignment[pos] = best_idx[pos]
    if force_best:
        col_arg = iou.argmax(dim=0)
        for j in range(len(gt)):
            if iou[col_arg[j], j] > 0:
                a = int(col_arg[j])
                assignment[a] = j
                best[a] = iou[a, j]
    return MatchResult(assignment=assignment, iou=best, pos_thresh=pos_thresh, neg_thresh=neg_thresh)
