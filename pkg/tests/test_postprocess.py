import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rsdet.geometry import encode_boxes, iou_matrix
from rsdet.postprocess import DetectionResult, assemble, batched_nms, nms, select_detections

from . import oracles


def rand_boxes(n, gen, extent=200.0):
    yx = torch.rand(n, 2, generator=gen, dtype=torch.float64) * extent
    hw = torch.rand(n, 2, generator=gen, dtype=torch.float64) * 60 + 1
    return torch.cat([yx, yx + hw], 1)


def test_nms_small_examples():
    assert nms(torch.tensor([[0.0, 0, 1, 1]]), torch.tensor([0.3]), 0.5).tolist() == [0]
    dup = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10]])
    assert nms(dup, torch.tensor([0.8, 0.9]), 0.5).tolist() == [1]
    assert nms(torch.zeros(0, 4), torch.zeros(0), 0.5).tolist() == []
    with pytest.raises(ValueError):
        nms(dup, torch.tensor([0.5]), 0.5)


def test_nms_suppresses_at_exact_threshold():
    boxes = torch.tensor([[0.0, 0.0, 2.0, 2.0], [0.0, 1.0, 2.0, 3.0]])
    assert iou_matrix(boxes[:1], boxes[1:]).item() == pytest.approx(1 / 3)
    assert nms(boxes, torch.tensor([0.9, 0.8]), 1 / 3).tolist() == [0]
    assert nms(boxes, torch.tensor([0.9, 0.8]), 0.34).tolist() == [0, 1]


def test_nms_equal_scores_lower_index_first():
    boxes = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10], [50.0, 50, 60, 60]])
    assert nms(boxes, torch.tensor([0.5, 0.5, 0.5]), 0.5).tolist() == [0, 2]


def test_nms_max_out():
    g = torch.Generator().manual_seed(0)
    boxes = rand_boxes(50, g, extent=1000)
    scores = torch.rand(50, generator=g, dtype=torch.float64)
    full = nms(boxes, scores, 0.5)
    assert nms(boxes, scores, 0.5, max_out=3).tolist() == full[:3].tolist()
    assert len(nms(boxes, scores, 0.5, max_out=0)) == 0


def test_nms_matches_oracle_100_trials():
    g = torch.Generator().manual_seed(42)
    for trial in range(100):
        n = int(torch.randint(1, 201, (1,), generator=g))
        boxes = rand_boxes(n, g)
        # coarse scores force ties
        scores = torch.randint(0, 20, (n,), generator=g).double() / 20
        thr = float(torch.rand(1, generator=g)) * 0.8 + 0.1
        got = nms(boxes, scores, thr).tolist()
        assert got == oracles.greedy_nms(boxes.tolist(), scores.tolist(), thr), trial


def test_batched_nms_is_per_class():
    boxes = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10], [0.0, 0, 10, 10]])
    keep = batched_nms(boxes, torch.tensor([0.9, 0.8, 0.7]), torch.tensor([0, 1, 0]), 0.5)
    assert keep.tolist() == [0, 1]


def test_assemble_all_negative_logits_empty():
    anchors = rand_boxes(30, torch.Generator().manual_seed(0)).float()
    out = assemble(torch.full((30, 3), -math.inf), torch.zeros(30, 4), anchors, (256, 256))
    assert len(out) == 0 and out.boxes.shape == (0, 4)


def test_assemble_single_confident_anchor_recovers_gt():
    anchors = torch.tensor([[10.0, 10.0, 50.0, 50.0], [100.0, 100.0, 140.0, 160.0], [0.0, 0.0, 20.0, 20.0]])
    gt = torch.tensor([[96.0, 104.0, 150.0, 150.0]])
    deltas = torch.zeros(3, 4)
    deltas[1] = encode_boxes(gt, anchors[1:2])[0]
    logits = torch.full((3, 2), -10.0)
    logits[1, 1] = 8.0
    out = assemble(logits, deltas, anchors, (256, 256))
    assert len(out) == 1 and out.class_ids.tolist() == [1]
    torch.testing.assert_close(out.boxes, gt, atol=1e-4, rtol=0)
    assert out.scores.item() == pytest.approx(torch.sigmoid(torch.tensor(8.0)).item())


def test_assemble_caps_at_max_detections():
    # 500 disjoint boxes, all survive NMS
    i = torch.arange(500, dtype=torch.float32)
    anchors = torch.stack([(i // 25) * 20, (i % 25) * 20, (i // 25) * 20 + 10, (i % 25) * 20 + 10], 1)
    scores = torch.linspace(0.1, 0.9, 500)
    logits = torch.logit(scores)[:, None]
    out = assemble(logits, torch.zeros(500, 4), anchors, (512, 512), max_detections=100)
    assert len(out) == 100
    torch.testing.assert_close(out.scores, scores.flip(0)[:100])


def test_assemble_clips_and_softmax_mode():
    anchors = torch.tensor([[-20.0, -20.0, 40.0, 300.0]])
    logits = torch.tensor([[0.0, 5.0, 0.0]])
    out = assemble(logits, torch.zeros(1, 4), anchors, (100, 200), activation="softmax")
    assert out.boxes.tolist() == [[0.0, 0.0, 40.0, 200.0]]
    assert out.class_ids.tolist() == [0]
    with pytest.raises(ValueError):
        assemble(logits, torch.zeros(1, 4), anchors, (100, 200), activation="relu")


def test_assemble_class_specific_boxes():
    anchors = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    deltas = torch.zeros(1, 2, 4)
    deltas[0, 1, 0] = 1.0  # shift class 1 down by one box height
    out = assemble(torch.tensor([[-10.0, 10.0]]), deltas, anchors, (100, 100))
    assert out.boxes.tolist() == [[10.0, 0.0, 20.0, 10.0]]


@given(st.integers(0, 10_000), st.floats(0.2, 0.8))
def test_assemble_output_invariants_and_idempotence(seed, thr):
    g = torch.Generator().manual_seed(seed)
    n = 120
    anchors = rand_boxes(n, g, 150).float()
    logits = torch.randn(n, 3, generator=g) * 3
    deltas = torch.randn(n, 4, generator=g) * 0.2
    out = assemble(logits, deltas, anchors, (200, 200), nms_thresh=thr, max_detections=50)
    assert len(out) <= 50
    assert (out.scores[:-1] >= out.scores[1:]).all()
    assert ((out.scores > 0.05) & (out.scores <= 1)).all()
    for c in out.class_ids.unique():
        b = out.boxes[out.class_ids == c]
        m = iou_matrix(b, b)
        m.fill_diagonal_(0)
        assert (m < thr).all()
    probs = torch.zeros(len(out), 3)
    probs[torch.arange(len(out)), out.class_ids] = out.scores
    again = select_detections(probs, out.boxes, nms_thresh=thr, max_detections=50)
    assert torch.equal(again.boxes, out.boxes) and torch.equal(again.scores, out.scores)
    assert torch.equal(again.class_ids, out.class_ids)


def test_detection_result_round_trip_and_scaling():
    r = DetectionResult(torch.tensor([[1.0, 2.0, 3.0, 4.0]]), torch.tensor([0.5]), torch.tensor([2]))
    back = DetectionResult.from_dict(r.to_dict())
    assert back.boxes.tolist() == r.boxes.tolist() and back.class_ids.tolist() == [2]
    assert r.scaled(2.0).boxes.tolist() == [[2.0, 4.0, 6.0, 8.0]]
    assert len(DetectionResult.empty()) == 0
