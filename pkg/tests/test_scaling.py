import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsdet.scaling import (RCNN, RETINANET, SWEEP_DEPTHS, SWEEP_RESOLUTIONS, ScaleConfig, all_table_rows,
                           rcnn_rs_config, retinanet_rs_config, scale_config, sweep_grid)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "scale_rows.json").read_text())


def test_table_rows_match_golden_file():
    rows = [(c.family, c.scale_label, c.resolution, c.backbone_depth) for c in all_table_rows()]
    expected = [(fam, r["scale"], r["resolution"], r["depth"]) for fam in (RETINANET, RCNN) for r in GOLDEN[fam]]
    assert rows == expected
    assert len(rows) == 14


@pytest.mark.parametrize("scale,row", [(1, (512, 50)), (4, (640, 101)), (6, (768, 152))])
def test_retinanet_examples(scale, row):
    c = retinanet_rs_config(scale)
    assert (c.resolution, c.backbone_depth) == row


@pytest.mark.parametrize("scale,row", [(3, (768, 50)), (7, (1024, 152)), (9, (1280, 200))])
def test_rcnn_examples(scale, row):
    c = rcnn_rs_config(scale)
    assert (c.resolution, c.backbone_depth) == row


def test_retinanet_has_no_scale_two():
    with pytest.raises(ValueError, match=r"\[1, 3, 4, 5, 6\]"):
        retinanet_rs_config(2)
    with pytest.raises(ValueError, match="valid scales"):
        rcnn_rs_config(10)
    with pytest.raises(ValueError, match="family"):
        scale_config("yolo", 1)


def test_scale_config_rejects_unpublished_rows():
    with pytest.raises(ValueError, match="published"):
        ScaleConfig(RETINANET, 2, 640, 50)
    with pytest.raises(ValueError, match="divisible"):
        ScaleConfig(RCNN, None, 600, 50)
    assert ScaleConfig(RCNN, None, 640, 200).config_id == "rcnn_rs-grid-r200-640"


def test_every_row_divisible_by_p7_stride():
    assert all(c.resolution % 128 == 0 for c in all_table_rows())


def test_round_trip():
    for c in all_table_rows():
        assert ScaleConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_full_sweep_grid():
    grid = sweep_grid(SWEEP_DEPTHS, SWEEP_RESOLUTIONS)
    assert len(grid) == 24
    assert [(c.backbone_depth, c.resolution) for c in grid[:7]] == [
        (50, 512), (50, 640), (50, 768), (50, 896), (50, 1024), (50, 1280), (101, 512)]
    assert len({(c.backbone_depth, c.resolution) for c in grid}) == 24


def test_grid_edge_cases():
    assert [(c.backbone_depth, c.resolution) for c in sweep_grid([101], [640])] == [(101, 640)]
    assert sweep_grid([50, 101], []) == []
    with pytest.raises(ValueError):
        sweep_grid([34], [512])
    with pytest.raises(ValueError):
        sweep_grid([50], [600])


@given(st.lists(st.sampled_from(SWEEP_DEPTHS), max_size=4, unique=True),
       st.lists(st.integers(1, 12).map(lambda k: 128 * k), max_size=6, unique=True))
def test_grid_is_depth_major_cross_product(depths, resolutions):
    grid = sweep_grid(depths, resolutions)
    assert [(c.backbone_depth, c.resolution) for c in grid] == [(d, r) for d in depths for r in resolutions]
