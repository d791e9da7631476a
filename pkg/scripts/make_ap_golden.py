"""Regenerate tests/golden/ap_fixture.json with the reference COCO toolkit.

Needs pycocotools. The fixture uses box area as the annotation area, no crowd
annotations and distinct detection scores, which is the regime where the
in-repo evaluator is expected to agree exactly.
"""

import contextlib
import io
import json
from pathlib import Path

import numpy as np
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

OUT = Path(__file__).resolve().parents[1] / "tests" / "golden" / "ap_fixture.json"


def make_fixture(seed=0, n_images=12, n_classes=3):
    rng = np.random.default_rng(seed)
    images, gts, dets = [], [], []
    for iid in range(1, n_images + 1):
        images.append({"id": iid, "width": 640, "height": 480})
        for _ in range(int(rng.integers(0, 6))):
            h, w = rng.uniform(8, 200, size=2)
            y, x = rng.uniform(0, 480 - h), rng.uniform(0, 640 - w)
            c = int(rng.integers(0, n_classes))
            gts.append({"image_id": iid, "box": [y, x, y + h, x + w], "class_id": c})
            # a few noisy hits per object
            for _ in range(int(rng.integers(0, 3))):
                jy, jx = rng.normal(0, 0.12 * h), rng.normal(0, 0.12 * w)
                sh, sw = h * rng.uniform(0.8, 1.25), w * rng.uniform(0.8, 1.25)
                dets.append({"image_id": iid, "box": [y + jy, x + jx, y + jy + sh, x + jx + sw],
                             "class_id": c if rng.random() > 0.15 else int(rng.integers(0, n_classes))})
        for _ in range(int(rng.integers(0, 4))):
            h, w = rng.uniform(8, 150, size=2)
            y, x = rng.uniform(0, 480 - h), rng.uniform(0, 640 - w)
            dets.append({"image_id": iid, "box": [y, x, y + h, x + w], "class_id": int(rng.integers(0, n_classes))})
    scores = rng.permutation(len(dets)) / len(dets) * 0.98 + 0.01
    for d, s in zip(dets, scores):
        d["score"] = float(s)
    return images, gts, dets


def xywh(box):
    y0, x0, y1, x1 = box
    return [x0, y0, x1 - x0, y1 - y0]


def reference_metrics(images, gts, dets, n_classes=3):
    gt_json = {
        "images": images,
        "categories": [{"id": c + 1, "name": str(c)} for c in range(n_classes)],
        "annotations": [{"id": k + 1, "image_id": g["image_id"], "category_id": g["class_id"] + 1,
                         "bbox": xywh(g["box"]), "area": xywh(g["box"])[2] * xywh(g["box"])[3], "iscrowd": 0}
                        for k, g in enumerate(gts)],
    }
    with contextlib.redirect_stdout(io.StringIO()):
        coco = COCO()
        coco.dataset = gt_json
        coco.createIndex()
        res = coco.loadRes([{"image_id": d["image_id"], "category_id": d["class_id"] + 1, "bbox": xywh(d["box"]),
                             "score": d["score"]} for d in dets])
        ev = COCOeval(coco, res, "bbox")
        ev.evaluate()
        ev.accumulate()
        ev.summarize()
    names = ["AP", "AP50", "AP75", "APs", "APm", "APl"]
    return {k: (None if v < 0 else float(v)) for k, v in zip(names, ev.stats[:6])}


def main():
    images, gts, dets = make_fixture()
    payload = {"images": [i["id"] for i in images], "ground_truth": gts, "detections": dets,
               "metrics": reference_metrics(images, gts, dets)}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(payload, indent=1))
    print(OUT, payload["metrics"])


if __name__ == "__main__":
    main()
