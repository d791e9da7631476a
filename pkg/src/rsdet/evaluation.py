"""Simplified COCO box AP (101-point interpolation, IoU 0.50:0.05:0.95).

Matches the reference protocol for box detection with these simplifications:
object area is the box area, there are no crowd annotations, and detections
with equal scores are ordered by their box coordinates so the result does not
depend on input order.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np
import torch

from .geometry import iou_matrix
from .postprocess import DetectionResult

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _canonical_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    keys = [boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores] if len(boxes) else [-scores]
    return np.lexsort(keys)


def _evaluate_image(det_boxes, det_scores, gt_boxes, area_rng, max_dets):
    """Greedy matching of one image/class at every IoU threshold.

    Returns scores, match flags ``(T, D)``, ignore flags ``(T, D)`` and the
    number of non-ignored ground truths.
    """
    order = _canonical_order(det_boxes, det_scores)[:max_dets]
    det_boxes, det_scores = det_boxes[order], det_scores[order]
    gt_area = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    gt_ignore = (gt_area < area_rng[0]) | (gt_area > area_rng[1])
    gorder = np.argsort(gt_ignore, kind="mergesort")
    gt_boxes, gt_ignore = gt_boxes[gorder], gt_ignore[gorder]
    n_t, n_d, n_g = len(IOU_THRESHOLDS), len(det_boxes), len(gt_boxes)
    matched = np.zeros((n_t, n_d), dtype=bool)
    det_ignore = np.zeros((n_t, n_d), dtype=bool)
    if n_d and n_g:
        ious = iou_matrix(torch.from_numpy(det_boxes), torch.from_numpy(gt_boxes)).numpy()
        for ti, t in enumerate(IOU_THRESHOLDS):
            gt_taken = np.zeros(n_g, dtype=bool)
            for d in range(n_d):
                best = min(t, 1 - 1e-10)
                m = -1
                for g in range(n_g):
                    if gt_taken[g]:
                        continue
                    if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                        break
                    if ious[d, g] < best:
                        continue
                    best = ious[d, g]
                    m = g
                if m == -1:
                    continue
                det_ignore[ti, d] = gt_ignore[m]
                matched[ti, d] = True
                gt_taken[m] = True
    det_area = (det_boxes[:, 2] - det_boxes[:, 0]) * (det_boxes[:, 3] - det_boxes[:, 1])
    outside = (det_area < area_rng[0]) | (det_area > area_rng[1])
    det_ignore |= ~matched & outside[None, :]
    return det_scores, matched, det_ignore, int((~gt_ignore).sum())


def _average_precision(scores, matched, ignored, n_gt) -> np.ndarray:
    """101-point interpolated precision per IoU threshold, ``(T,)``."""
    order = np.argsort(-scores, kind="mergesort")
    matched, ignored = matched[:, order], ignored[:, order]
    tps = np.cumsum(matched & ~ignored, axis=1).astype(np.float64)
    fps = np.cumsum(~matched & ~ignored, axis=1).astype(np.float64)
    out = np.zeros(len(IOU_THRESHOLDS))
    for t in range(len(IOU_THRESHOLDS)):
        tp, fp = tps[t], fps[t]
        if len(tp) == 0:
            continue
        rc = tp / n_gt
        pr = tp / (tp + fp + np.spacing(1))
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        idx = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
        q = np.zeros(len(RECALL_THRESHOLDS))
        valid = idx < len(pr)
        q[valid] = pr[idx[valid]]
        out[t] = q.mean()
    return out


def coco_ap(results: Mapping, ground_truth: Mapping, max_dets: int = 100) -> dict:
    """AP summary over every image id present in ``ground_truth``.

    Args:
        results: ``image_id -> DetectionResult`` (or a dict with ``boxes``,
            ``scores``, ``class_ids``). Missing ids count as no detections.
        ground_truth: ``image_id -> (boxes, class_ids)`` in yxyx pixels.

    Returns:
        ``AP``, ``AP50``, ``AP75``, ``APs``, ``APm``, ``APl``; a metric is
        ``None`` when no ground truth falls in its scope.
    """
    image_ids = sorted(ground_truth)
    gts, dets = {}, {}
    classes = set()
    for iid in image_ids:
        boxes, cls = ground_truth[iid]
        boxes = _np(boxes).reshape(-1, 4)
        cls = np.asarray(_np(cls), dtype=np.int64).reshape(-1)
        gts[iid] = (boxes, cls)
        classes.update(cls.tolist())
        r = results.get(iid)
        if r is None:
            dets[iid] = (np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
        else:
            if isinstance(r, dict):
                r = DetectionResult.from_dict(r)
            dcls = np.asarray(_np(r.class_ids), dtype=np.int64).reshape(-1)
            dets[iid] = (_np(r.boxes).reshape(-1, 4), _np(r.scores).reshape(-1), dcls)
            classes.update(dcls.tolist())

    per_area = {}
    for area_name, rng in AREA_RANGES.items():
        aps = []
        for c in sorted(classes):
            s_all, m_all, i_all, n_gt = [], [], [], 0
            for iid in image_ids:
                gb, gc = gts[iid]
                db, ds, dc = dets[iid]
                s, m, ig, n = _evaluate_image(db[dc == c], ds[dc == c], gb[gc == c], rng, max_dets)
                s_all.append(s)
                m_all.append(m)
                i_all.append(ig)
                n_gt += n
            if n_gt == 0:
                continue
            aps.append(_average_precision(np.concatenate(s_all), np.concatenate(m_all, axis=1),
                                          np.concatenate(i_all, axis=1), n_gt))
        per_area[area_name] = np.stack(aps) if aps else None

    def summarize(area, t=None):
        a = per_area[area]
        if a is None:
            return None
        return float(a.mean() if t is None else a[:, t].mean())

    return {
        "AP": summarize("all"),
        "AP50": summarize("all", 0),
        "AP75": summarize("all", 5),
        "APs": summarize("small"),
        "APm": summarize("medium"),
        "APl": summarize("large"),
    }


@torch.no_grad()
def evaluate_detector(model, dataset, resolution: int, max_dets: int = 100) -> tuple[dict, dict]:
    """Run ``model`` over ``dataset`` one image at a time and score it.

    Images are resized so the longer side equals ``resolution`` and padded.
    Detections are mapped back to original image pixels before scoring.

    Returns:
        ``(metrics, detections)`` where ``detections`` maps image id to a
        :class:`DetectionResult` in original coordinates.
    """
    from .datapipe import DatasetError, prepare_eval

    if len(dataset) == 0:
        raise DatasetError("evaluation dataset is empty")
    model_classes = getattr(getattr(model, "cfg", None), "num_classes", None)
    if model_classes is not None and model_classes != dataset.num_classes:
        raise DatasetError(f"model predicts {model_classes} classes but the evaluation dataset has "
                           f"{dataset.num_classes}")
    was_training = model.training
    model.eval()
    detections, ground_truth = {}, {}
    try:
        for i in range(len(dataset)):
            sample = dataset[i]
            x, scale = prepare_eval(sample, resolution)
            result = model.detect(x[None])[0]
            detections[sample.image_id] = result.scaled(1.0 / scale)
            ground_truth[sample.image_id] = (sample.boxes, sample.class_ids)
    finally:
        model.train(was_training)
    return coco_ap(detections, ground_truth, max_dets), detections
