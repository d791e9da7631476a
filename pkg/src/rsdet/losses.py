"""Training objectives for both detector families."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .geometry import MatchResult

HUBER_DELTA = 1.0


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 1.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"focal alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass
class LossBundle:
    """Named scalar losses; ``total`` is their unit-weighted sum."""

    components: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        vals = list(self.components.values())
        if not vals:
            return torch.zeros(())
        return torch.stack([v.reshape(()) for v in vals]).sum()

    def __getitem__(self, key):
        return self.components[key]

    def update(self, other: "LossBundle", prefix: str = "") -> "LossBundle":
        for k, v in other.components.items():
            self.components[prefix + k] = v
        return self

    def check(self) -> "LossBundle":
        for k, v in self.components.items():
            if not torch.isfinite(v).all():
                raise FloatingPointError(f"loss component {k!r} is not finite: {v.item()}")
            if (v < 0).any():
                raise ValueError(f"loss component {k!r} is negative: {v.item()}")
        return self

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, params: FocalParams = FocalParams(),
               valid: torch.Tensor | None = None, normalizer: float | torch.Tensor | None = None) -> torch.Tensor:
    """Sigmoid focal loss summed over anchors and classes.

    Args:
        logits: ``(..., K)`` per anchor-class logits.
        targets: same shape, entries in {0, 1}.
        valid: optional ``(...)`` anchor mask; ignored anchors contribute nothing.
        normalizer: divisor for the sum; defaults to the number of positive
            (valid) anchors, clamped to at least 1.
    """
    targets = targets.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = params.alpha * targets + (1 - params.alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** params.gamma * ce
    positive_anchor = targets.amax(dim=-1) > 0
    if valid is not None:
        loss = loss * valid.unsqueeze(-1).to(loss.dtype)
        positive_anchor = positive_anchor & valid.bool()
    if normalizer is None:
        normalizer = positive_anchor.sum().clamp(min=1).to(loss.dtype)
    return loss.sum() / normalizer


def huber(residual: torch.Tensor, delta: float = HUBER_DELTA) -> torch.Tensor:
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))


def box_loss(pred_deltas: torch.Tensor, target_deltas: torch.Tensor, positive_mask: torch.Tensor,
             delta: float = HUBER_DELTA, normalizer: float | torch.Tensor | None = None) -> torch.Tensor:
    """Huber loss summed over the 4 coordinates, averaged over positive anchors."""
    pos = positive_mask.bool()
    n_pos = pos.sum()
    if n_pos == 0:
        return pred_deltas.sum() * 0.0
    per = huber(pred_deltas[pos] - target_deltas[pos].to(pred_deltas.dtype), delta).sum()
    return per / (normalizer if normalizer is not None else n_pos.to(pred_deltas.dtype))


def sample_anchors(match: MatchResult, batch_size: int = 256, positive_fraction: float = 0.5,
                   generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Random positive/negative subsample with at most ``positive_fraction`` positives."""
    pos = torch.nonzero(match.positive).flatten()
    neg = torch.nonzero(match.negative).flatten()
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = pos[torch.randperm(len(pos), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(len(neg), generator=generator)[:n_neg]]
    return pos, neg


def rpn_loss(objectness: torch.Tensor, deltas: torch.Tensor, match: MatchResult, target_deltas: torch.Tensor,
             batch_size: int = 256, positive_fraction: float = 0.5,
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Objectness BCE over a sampled minibatch plus Huber on the sampled positives.

    Raises:
        ValueError: when no anchor is positive or negative (nothing to sample).
    """
    pos, neg = sample_anchors(match, batch_size, positive_fraction, generator)
    if len(pos) + len(neg) == 0:
        raise ValueError("rpn_loss: every anchor is ignored, no sample to train on")
    idx = torch.cat([pos, neg])
    labels = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(objectness.dtype)
    obj = F.binary_cross_entropy_with_logits(objectness[idx], labels)
    pos_mask = torch.zeros(len(deltas), dtype=torch.bool)
    pos_mask[pos] = True
    return obj, box_loss(deltas, target_deltas, pos_mask)


@dataclass
class StageTargets:
    """Per-ROI targets of one cascade stage.

    ``labels`` uses 0 for background, ``class_id + 1`` for foreground and -1
    for ROIs excluded from the loss.
    """

    labels: torch.Tensor
    box_targets: torch.Tensor
    match: MatchResult | None = None


def rcnn_stage_loss(logits: torch.Tensor, deltas: torch.Tensor, targets: StageTargets) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax cross-entropy and Huber box loss for one box head."""
    valid = targets.labels >= 0
    if valid.sum() == 0:
        zero = logits.sum() * 0.0
        return zero, zero
    cls = F.cross_entropy(logits[valid], targets.labels[valid])
    pos = targets.labels > 0
    if deltas.shape[-1] != 4:
        k = deltas.shape[-1] // 4
        sel = (targets.labels - 1).clamp(min=0, max=k - 1)
        deltas = deltas.view(-1, k, 4)[torch.arange(len(deltas)), sel]
    return cls, box_loss(deltas, targets.box_targets, pos)


def cascade_losses(stage_outputs: list[tuple[torch.Tensor, torch.Tensor]],
                   stage_targets: list[StageTargets]) -> LossBundle:
    """Equal-weight sum of per-stage classification and box losses."""
    if len(stage_outputs) != len(stage_targets):
        raise ValueError(f"{len(stage_outputs)} stage outputs but {len(stage_targets)} stage targets")
    bundle = LossBundle()
    for t, ((logits, deltas), tgt) in enumerate(zip(stage_outputs, stage_targets)):
        cls, box = rcnn_stage_loss(logits, deltas, tgt)
        bundle.components[f"stage{t}_cls"] = cls
        bundle.components[f"stage{t}_box"] = box
    return bundle


def mask_loss(mask_logits: torch.Tensor, gt_masks: torch.Tensor, matched_classes: torch.Tensor,
              positive: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pixel BCE on the matched-class channel, averaged over positive ROIs.

    Args:
        mask_logits: ``(R, K, M, M)``.
        gt_masks: ``(R, M, M)`` binary targets.
        matched_classes: ``(R,)`` class index (0-based) per ROI.
        positive: optional ``(R,)`` mask; all ROIs count when omitted.
    """
    if positive is None:
        positive = torch.ones(len(mask_logits), dtype=torch.bool)
    positive = positive.bool()
    if positive.sum() == 0:
        return mask_logits.sum() * 0.0
    idx = torch.nonzero(positive).flatten()
    logits = mask_logits[idx, matched_classes[idx]]
    return F.binary_cross_entropy_with_logits(logits, gt_masks[idx].to(logits.dtype))


def gradient_check(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, num_coords: int = 20,
                   eps: float = 1e-6, generator: torch.Generator | None = None, floor: float = 1e-6) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps a float64 tensor to a scalar. ``num_coords`` coordinates of
    ``x`` are drawn at random (without replacement when possible). The
    relative error divides by ``max(|numeric|, |analytic|, floor)`` so
    vanishing gradients are compared on an absolute scale.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    flat = x.detach().reshape(-1)
    n = min(num_coords, flat.numel())
    coords = torch.randperm(flat.numel(), generator=generator)[:n]
    worst = 0.0
    with torch.no_grad():
        for c in coords.tolist():
            plus = flat.clone()
            plus[c] += eps
            minus = flat.clone()
            minus[c] -= eps
            num = (fn(plus.view_as(x)) - fn(minus.view_as(x))).item() / (2 * eps)
            ana = grad.reshape(-1)[c].item()
            denom = max(abs(num), abs(ana), floor)
            worst = max(worst, abs(num - ana) / denom)
    return worst
