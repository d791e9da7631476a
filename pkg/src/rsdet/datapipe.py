"""Dataset ingestion, scale-jitter augmentation and inference preprocessing.

Images are ``(H, W, 3)`` arrays. Training images are normalized with the
per-channel constants below *before* any resize/pad, so zero padding equals
the dataset mean.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_MEAN = np.array([123.675, 116.28, 103.53], dtype=np.float32)
IMAGE_STD = np.array([58.395, 57.12, 57.375], dtype=np.float32)
MIN_BOX_AREA = 1.0

cv2.setNumThreads(1)


class DatasetError(ValueError):
    """Raised for malformed annotation files or missing images."""


@dataclass
class Sample:
    image: np.ndarray
    boxes: np.ndarray
    class_ids: np.ndarray
    masks: np.ndarray | None = None
    image_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.class_ids)} class ids")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class JitterSpec:
    target_size: int = 640
    scale_range: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))


def jitter_resize_bounds(spec: JitterSpec) -> tuple[int, int]:
    """Smallest and largest resized side a square input can reach."""
    lo, hi = spec.scale_range
    return round(lo * spec.target_size), round(hi * spec.target_size)


def normalize_image(image: np.ndarray) -> np.ndarray:
    return (image.astype(np.float32) - IMAGE_MEAN) / IMAGE_STD


def to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def _resize(image: np.ndarray, h: int, w: int, nearest: bool = False) -> np.ndarray:
    if image.shape[:2] == (h, w):
        return image.copy()
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.resize(image, (w, h), interpolation=interp)
    if image.ndim == 3 and out.ndim == 2:
        out = out[..., None]
    return out


def _resize_masks(masks: np.ndarray, h: int, w: int) -> np.ndarray:
    if len(masks) == 0:
        return np.zeros((0, h, w), dtype=np.uint8)
    return np.stack([_resize(m.astype(np.uint8), h, w, nearest=True) for m in masks])


def apply_scale(sample: Sample, scale: float, target: int, rng: np.random.Generator) -> Sample:
    """Resize so the longer side becomes ``scale * target``, then pad/crop to ``target``.

    Padding is zero-valued and anchored top-left; crops take a uniformly random
    window. Boxes follow the image, are clipped, and boxes left with less than
    one square pixel are dropped.
    """
    h, w = sample.size
    factor = scale * target / max(h, w)
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    image = _resize(sample.image, nh, nw)
    oy = int(rng.integers(0, nh - target + 1)) if nh > target else 0
    ox = int(rng.integers(0, nw - target + 1)) if nw > target else 0
    out = np.zeros((target, target) + image.shape[2:], dtype=image.dtype)
    ch, cw = min(nh, target), min(nw, target)
    out[:ch, :cw] = image[oy:oy + ch, ox:ox + cw]

    sy, sx = nh / h, nw / w
    boxes = sample.boxes * np.array([sy, sx, sy, sx]) - np.array([oy, ox, oy, ox], dtype=np.float64)
    boxes = np.clip(boxes, 0, target)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = area >= MIN_BOX_AREA

    masks = None
    if sample.masks is not None:
        m = _resize_masks(sample.masks, nh, nw)
        masks = np.zeros((len(m), target, target), dtype=np.uint8)
        masks[:, :ch, :cw] = m[:, oy:oy + ch, ox:ox + cw]
        masks = masks[keep]
    meta = dict(sample.meta, scale=scale, crop_offset=(oy, ox), resized_size=(nh, nw))
    return replace(sample, image=out, boxes=boxes[keep], class_ids=sample.class_ids[keep], masks=masks, meta=meta)


def scale_jitter(sample: Sample, spec: JitterSpec, rng: np.random.Generator) -> Sample:
    """Random-scale resize then pad or crop to ``spec.target_size`` square."""
    scale = float(rng.uniform(*spec.scale_range))
    return apply_scale(sample, scale, spec.target_size, rng)


def flip(sample: Sample) -> Sample:
    """Deterministic left-right mirror of image, boxes and masks."""
    w = sample.size[1]
    b = sample.boxes
    boxes = np.stack([b[:, 0], w - b[:, 3], b[:, 2], w - b[:, 1]], axis=1)
    masks = None if sample.masks is None else sample.masks[:, :, ::-1].copy()
    return replace(sample, image=sample.image[:, ::-1].copy(), boxes=boxes, masks=masks)


def horizontal_flip(sample: Sample, rng: np.random.Generator, p: float = 0.5) -> Sample:
    return flip(sample) if rng.random() < p else sample


def resize_longer_pad(image: np.ndarray, target: int) -> tuple[np.ndarray, float]:
    """Scale the longer side to ``target`` and zero-pad bottom/right to a square.

    Returns:
        The padded image and the applied scale (multiply original-image boxes
        by it to land in the padded frame).
    """
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty image")
    scale = target / max(h, w)
    nh, nw = min(target, round(h * scale)), min(target, round(w * scale))
    resized = _resize(image, nh, nw)
    out = np.zeros((target, target) + image.shape[2:], dtype=image.dtype)
    out[:nh, :nw] = resized
    return out, scale


# ---------------------------------------------------------------- datasets


class DetectionDataset(Sequence):
    num_classes: int
    class_names: list[str]

    def annotations(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Ground truth of one image without decoding pixels."""
        s = self[index]
        return s.boxes, s.class_ids


class InMemoryDataset(DetectionDataset):
    def __init__(self, samples: list[Sample], class_names: list[str]):
        self.samples = samples
        self.class_names = list(class_names)
        self.num_classes = len(class_names)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def rle_decode(counts, size) -> np.ndarray:
    """Decode a COCO RLE (uncompressed list or compressed string), column-major."""
    h, w = size
    if isinstance(counts, str):
        counts = _rle_string_to_counts(counts)
    flat = np.zeros(h * w, dtype=np.uint8)
    pos, val = 0, 0
    for c in counts:
        if val:
            flat[pos:pos + c] = 1
        pos += c
        val ^= 1
    if pos != h * w:
        raise DatasetError(f"RLE counts sum to {pos}, expected {h * w}")
    return flat.reshape(w, h).T


def _rle_string_to_counts(s: str) -> list[int]:
    counts = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def polygons_to_mask(polygons, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.uint8)
    for poly in polygons:
        pts = np.round(np.asarray(poly, dtype=np.float64).reshape(-1, 2)).astype(np.int32)
        cv2.fillPoly(mask, [pts], 1)
    return mask


class CocoDataset(DetectionDataset):
    """Images plus boxes (and optional masks) from a COCO-style JSON file.

    Supported fields: ``images[].{id, file_name, width, height}``,
    ``annotations[].{image_id, bbox, category_id, iscrowd?, segmentation?}``,
    ``categories[].{id, name}``. Crowd annotations are skipped. Category ids
    map to contiguous class indices in ascending id order.
    """

    def __init__(self, path, image_root=None, with_masks: bool = False, check_files: bool = True):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetError(f"{path}: cannot read annotation JSON: {e}") from e
        for key in ("images", "annotations", "categories"):
            if not isinstance(data.get(key), list):
                raise DatasetError(f"{path}: missing or non-list top-level field {key!r}")
        self.path = path
        self.image_root = Path(image_root) if image_root is not None else path.parent
        self.with_masks = with_masks
        cats = sorted(data["categories"], key=lambda c: c["id"])
        self.category_ids = [c["id"] for c in cats]
        self.class_names = [str(c.get("name", c["id"])) for c in cats]
        self.num_classes = len(cats)
        cat_index = {cid: i for i, cid in enumerate(self.category_ids)}

        self.images = {}
        for img in data["images"]:
            for key in ("id", "file_name", "width", "height"):
                if key not in img:
                    raise DatasetError(f"{path}: image entry {img} lacks {key!r}")
            self.images[img["id"]] = img
        self.image_ids = sorted(self.images)
        self._anns = {i: [] for i in self.image_ids}
        for k, ann in enumerate(data["annotations"]):
            where = f"{path}: annotations[{k}]"
            if ann.get("image_id") not in self.images:
                raise DatasetError(f"{where}: unknown image_id {ann.get('image_id')!r}")
            if ann.get("category_id") not in cat_index:
                raise DatasetError(f"{where}: unknown category_id {ann.get('category_id')!r}")
            if ann.get("iscrowd", 0):
                continue
            bbox = ann.get("bbox")
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise DatasetError(f"{where}: bbox must be [x, y, w, h], got {bbox!r}")
            x, y, bw, bh = (float(v) for v in bbox)
            img = self.images[ann["image_id"]]
            if bw <= 0 or bh <= 0:
                raise DatasetError(f"{where}: degenerate bbox {bbox} (zero width or height)")
            if x < 0 or y < 0 or x + bw > img["width"] + 1e-6 or y + bh > img["height"] + 1e-6:
                raise DatasetError(
                    f"{where}: bbox {bbox} outside image {img['id']} of size {img['width']}x{img['height']}"
                )
            self._anns[ann["image_id"]].append((coco_bbox_to_yxyx(bbox), cat_index[ann["category_id"]],
                                                ann.get("segmentation")))
        if check_files:
            for iid in self.image_ids:
                f = self.image_root / self.images[iid]["file_name"]
                if not f.is_file():
                    raise DatasetError(f"{path}: image file for id {iid} not found at {f}")

    def __len__(self):
        return len(self.image_ids)

    def annotations(self, index):
        anns = self._anns[self.image_ids[index]]
        boxes = np.array([a[0] for a in anns], dtype=np.float64).reshape(-1, 4)
        return boxes, np.array([a[1] for a in anns], dtype=np.int64)

    def __getitem__(self, index) -> Sample:
        iid = self.image_ids[index]
        info = self.images[iid]
        with Image.open(self.image_root / info["file_name"]) as im:
            image = np.asarray(im.convert("RGB"))
        boxes, class_ids = self.annotations(index)
        masks = None
        if self.with_masks:
            h, w = image.shape[:2]
            ms = []
            for box, _, seg in self._anns[iid]:
                ms.append(_decode_segmentation(seg, box, h, w))
            masks = np.stack(ms) if ms else np.zeros((0, h, w), dtype=np.uint8)
        return Sample(image, boxes, class_ids, masks, image_id=iid)


def _decode_segmentation(seg, box, h, w) -> np.ndarray:
    if isinstance(seg, list) and seg:
        return polygons_to_mask(seg, h, w)
    if isinstance(seg, dict) and "counts" in seg:
        return rle_decode(seg["counts"], seg.get("size", (h, w)))
    # no segmentation: fall back to the filled box
    m = np.zeros((h, w), dtype=np.uint8)
    y0, x0, y1, x1 = (int(round(v)) for v in box)
    m[y0:y1, x0:x1] = 1
    return m


def coco_bbox_to_yxyx(bbox) -> list[float]:
    x, y, w, h = (float(v) for v in bbox)
    return [y, x, y + h, x + w]


def load_coco_json(path, image_root=None, with_masks: bool = False) -> CocoDataset:
    return CocoDataset(path, image_root, with_masks)


SYNTH_CLASSES = ["rectangle", "ellipse"]


def synth_shapes(n: int, seed: int = 0, image_size: int = 512, max_objects: int = 3,
                 size_range: tuple[int, int] | None = None) -> InMemoryDataset:
    """Non-overlapping colored rectangles and ellipses on a noisy background.

    Boxes are the exact pixel extents of each shape's mask. Object sides are
    drawn from ``size_range``, by default 3/32 to 3/8 of ``image_size``.
    """
    if size_range is None:
        size_range = (max(2, image_size * 3 // 32), max(2, image_size * 3 // 8))
    if not 2 <= size_range[0] <= size_range[1] <= image_size:
        raise ValueError(f"size_range {size_range} must satisfy 2 <= lo <= hi <= image_size ({image_size})")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        bg = rng.integers(20, 90, size=3)
        image = np.clip(bg + rng.normal(0, 12, size=(image_size, image_size, 3)), 0, 255).astype(np.uint8)
        boxes, classes, masks = [], [], []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(50):
                h, w = rng.integers(size_range[0], size_range[1] + 1, size=2)
                y0 = int(rng.integers(0, image_size - h + 1))
                x0 = int(rng.integers(0, image_size - w + 1))
                cand = [y0, x0, y0 + int(h), x0 + int(w)]
                if all(_disjoint(cand, b, margin=4) for b in boxes):
                    break
            else:
                continue
            cls = int(rng.integers(0, len(SYNTH_CLASSES)))
            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            if cls == 0:
                mask[cand[0]:cand[2], cand[1]:cand[3]] = 1
            else:
                center = (int(x0 + w // 2), int(y0 + h // 2))
                cv2.ellipse(mask, center, (int(w // 2), int(h // 2)), 0, 0, 360, 1, thickness=-1)
            color = rng.integers(130, 256, size=3)
            image[mask.astype(bool)] = color
            ys, xs = np.nonzero(mask)
            boxes.append([ys.min(), xs.min(), ys.max() + 1, xs.max() + 1])
            classes.append(cls)
            masks.append(mask)
        masks_arr = np.stack(masks) if masks else np.zeros((0, image_size, image_size), dtype=np.uint8)
        samples.append(Sample(image, np.array(boxes, dtype=np.float64).reshape(-1, 4), classes, masks_arr,
                              image_id=i))
    return InMemoryDataset(samples, SYNTH_CLASSES)


def _disjoint(a, b, margin=0) -> bool:
    return a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]


# ---------------------------------------------------------------- loading


@dataclass
class Batch:
    images: torch.Tensor
    targets: list[dict]
    indices: list[int]


def _to_target(s: Sample, with_masks: bool) -> dict:
    t = {
        "boxes": torch.from_numpy(s.boxes.astype(np.float32)),
        "class_ids": torch.from_numpy(s.class_ids),
        "image_id": s.image_id,
    }
    if with_masks and s.masks is not None:
        t["masks"] = torch.from_numpy(np.ascontiguousarray(s.masks, dtype=np.uint8))
    return t


class DetectionLoader:
    """Batches of jittered, flipped, normalized training images.

    Every epoch shuffles with an RNG seeded by ``(seed, epoch)``. Item ``i`` of
    the epoch goes to worker ``i % num_workers``; each worker draws augmentation
    randomness from its own generator seeded by ``(seed, worker_id, epoch)``
    and consumes its items in epoch order, so output is identical for a given
    worker count regardless of thread scheduling.
    """

    def __init__(self, dataset: DetectionDataset, batch_size: int, jitter: JitterSpec | None,
                 seed: int = 0, flip: bool = True, num_workers: int = 1, shuffle: bool = True,
                 with_masks: bool = False):
        if len(dataset) == 0:
            raise DatasetError("dataset is empty")
        self.dataset = dataset
        self.batch_size = batch_size
        self.jitter = jitter
        self.seed = seed
        self.flip = flip
        self.num_workers = max(1, num_workers)
        self.shuffle = shuffle
        self.with_masks = with_masks

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.batch_size)

    def _prepare(self, index: int, rng: np.random.Generator) -> Sample:
        s = self.dataset[index]
        s = replace(s, image=normalize_image(s.image))
        if self.flip:
            s = horizontal_flip(s, rng)
        if self.jitter is not None:
            s = scale_jitter(s, self.jitter, rng)
        return s

    def epoch(self, epoch: int) -> Iterator[Batch]:
        n = len(self.dataset)
        order = np.arange(n)
        if self.shuffle:
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
        rngs = [np.random.default_rng([self.seed, w, epoch]) for w in range(self.num_workers)]
        pool = ThreadPoolExecutor(self.num_workers) if self.num_workers > 1 else None
        try:
            for start in range(0, n, self.batch_size):
                positions = list(range(start, min(start + self.batch_size, n)))
                per_worker = {w: [p for p in positions if p % self.num_workers == w] for w in range(self.num_workers)}

                def run(w):
                    return {p: self._prepare(int(order[p]), rngs[w]) for p in per_worker[w]}

                if pool is None:
                    parts = [run(0)]
                else:
                    parts = list(pool.map(run, range(self.num_workers)))
                merged = {}
                for part in parts:
                    merged.update(part)
                samples = [merged[p] for p in positions]
                images = torch.stack([to_tensor(s.image) for s in samples])
                yield Batch(images, [_to_target(s, self.with_masks) for s in samples],
                            [int(order[p]) for p in positions])
        finally:
            if pool is not None:
                pool.shutdown()


def prepare_eval(sample: Sample, target: int) -> tuple[torch.Tensor, float]:
    """Normalized, longer-side-resized, zero-padded CHW tensor and its scale."""
    image, scale = resize_longer_pad(normalize_image(sample.image), target)
    return to_tensor(image), scale
