import csv
import json
from dataclasses import replace
from pathlib import Path

import pytest
import yaml

from rsdet import cli
from rsdet.config import ConfigError, RunConfig, dump_config, load_config, table_run_config
from rsdet.evaluation import coco_ap
from rsdet.postprocess import DetectionResult
from rsdet.scaling import all_table_rows

from .helpers import tiny_run_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RUN_CONFIGS = sorted(p for p in CONFIGS.glob("*.yaml") if not p.name.startswith("sweep"))


def write_cfg(tmp_path, cfg: RunConfig, name="cfg.yaml") -> Path:
    path = tmp_path / name
    path.write_text(dump_config(cfg))
    return path


def tiny_cfg(tmp_path, **kw) -> RunConfig:
    cfg = tiny_run_config(**kw)
    return replace(cfg, output_dir=str(tmp_path / "run"))


# ---------------------------------------------------------------- config


def test_resolution_must_be_multiple_of_128():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"model": {"resolution": 600}, "recipe": {"jitter": {"target_size": 600,
                                                                               "scale_range": [0.1, 2.0]}}})
    assert any(e.startswith("model.resolution:") and "multiple of 128" in e for e in info.value.errors)


def test_heavy_head_only_for_rcnn():
    with pytest.raises(ConfigError, match="head_variant"):
        RunConfig.from_dict({"family": "retinanet_rs", "head_variant": "heavy"})
    assert RunConfig.from_dict({"family": "rcnn_rs", "head_variant": "heavy"}).head_variant == "heavy"


@pytest.mark.parametrize("data,path", [
    ({"famliy": "rcnn_rs"}, "famliy"),
    ({"model": {"widht": 1}}, "model.widht"),
    ({"family": "rcnn_rs", "scale": 10}, "scale"),
    ({"family": "retinanet_rs", "scale": 2}, "scale"),
    ({"model": {"activation": "gelu"}}, "model.activation"),
    ({"model": {"with_masks": True}}, "model.with_masks"),
    ({"dataset": {"kind": "coco"}}, "dataset.annotations"),
    ({"recipe": {"jitter": {"target_size": 640, "scale_range": [0.1, 2.0]}}}, "recipe.jitter.target_size"),
    ({"recipe": {"warmup_epochs": 100, "epochs": 10}}, "recipe"),
])
def test_validation_names_the_field(data, path):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(data)
    assert any(e.startswith(path) for e in info.value.errors), info.value.errors


def test_defaults_follow_scale_row():
    cfg = RunConfig.from_dict({"family": "rcnn_rs", "scale": 7})
    assert cfg.resolution == 1024 and cfg.scale_config.backbone_depth == 152
    assert cfg.recipe.jitter.target_size == 1024
    dc = cfg.detector_config(80)
    assert dc.image_size == 1024 and dc.backbone.depth == 152


def test_round_trip(tmp_path):
    cfg = tiny_cfg(tmp_path, family="rcnn_rs", with_masks=True)
    back = load_config(write_cfg(tmp_path, cfg))
    assert back == cfg


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)


@pytest.mark.parametrize("row", all_table_rows(), ids=lambda r: r.config_id)
def test_table_run_configs_validate(row):
    cfg = table_run_config(row.family, row.scale_label)
    assert cfg.resolution == row.resolution and cfg.recipe.epochs == 600 and cfg.recipe.batch_size == 256


@pytest.mark.parametrize("path", RUN_CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_validate_and_smoke_train(path, tmp_path):
    cfg = load_config(path)
    if cfg.dataset.kind != "synth":
        # no image data in the test environment; validation only
        assert cfg.detector_config(80).image_size == cfg.resolution
        return
    cfg = replace(cfg, output_dir=str(tmp_path / "run"), max_steps=1)
    out = cli.cmd_train(cfg)
    assert (out / "checkpoints" / "last" / "weights.pt").exists()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("sweep*.yaml")), ids=lambda p: p.name)
def test_shipped_sweep_grids_expand(path):
    grid = yaml.safe_load(path.read_text())
    base = cli._grid_base(grid, path)
    if grid["mode"] == "bench":
        entries = cli._bench_entries(grid, base)
        assert len(entries) == 24
        assert all(f"r{c.scale_config.backbone_depth}-{c.resolution}" in grid["reference_ap"] for _, c in entries)
    else:
        entries = cli._train_entries(grid, base, Path("/tmp/unused"))
        assert len(entries) == len(grid["jitter_ranges"]) * len(grid["epochs"])


# ---------------------------------------------------------------- CLI


def test_cli_argument_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["bench"])
    assert info.value.code == 1


def test_cli_invalid_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"model": {"resolution": 600}}))
    assert cli.main(["train", str(bad)]) == 1
    assert "model.resolution" in capsys.readouterr().err
    assert cli.main(["train", str(tmp_path / "nope.yaml")]) == 1
    assert cli.main(["eval", str(bad), str(tmp_path)]) == 1


def test_cli_train_eval_round_trip(tmp_path, capsys):
    cfg = tiny_cfg(tmp_path)
    path = write_cfg(tmp_path, cfg)
    assert cli.main(["train", str(path), "--max-steps", "2"]) == 0
    run = Path(cfg.output_dir)
    assert (run / "config.yaml").exists() and (run / "loss_curve.png").stat().st_size > 0
    assert load_config(run / "config.yaml") == replace(cfg, max_steps=2)

    out = tmp_path / "eval"
    assert cli.main(["eval", str(path), str(run / "checkpoints" / "last"), "--output-dir", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    dets = json.loads((out / "detections.json").read_text())
    assert metrics["num_images"] == 4 and len(dets) == 4
    # the dump re-scores to the same numbers
    from rsdet.config import build_dataset
    ds = build_dataset(cfg, "eval")
    gt = {s.image_id: (s.boxes, s.class_ids) for s in ds}
    rescored = coco_ap({int(k): DetectionResult.from_dict(v) for k, v in dets.items()}, gt)
    for k, v in rescored.items():
        assert v == pytest.approx(metrics[k], abs=1e-12) if v is not None else metrics[k] is None
    assert cli.main(["eval", str(path), str(tmp_path)]) == 1


def test_cli_eval_class_mismatch(tmp_path):
    cfg = tiny_cfg(tmp_path)
    assert cli.main(["train", str(write_cfg(tmp_path, cfg)), "--max-steps", "1"]) == 0
    ann = tmp_path / "ann.json"
    from PIL import Image
    Image.new("RGB", (32, 32)).save(tmp_path / "a.png")
    ann.write_text(json.dumps({"images": [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                               "annotations": [], "categories": [{"id": i, "name": str(i)} for i in range(5)]}))
    coco = replace(cfg, dataset=replace(cfg.dataset, kind="coco", annotations=str(ann)))
    code = cli.main(["eval", str(write_cfg(tmp_path, coco, "coco.yaml")),
                     str(Path(cfg.output_dir) / "checkpoints" / "last"), "--output-dir", str(tmp_path / "e")])
    assert code == 1


def test_cli_train_is_deterministic(tmp_path):
    logs = []
    for k in range(2):
        cfg = replace(tiny_run_config(), output_dir=str(tmp_path / f"run{k}"))
        assert cli.main(["train", str(write_cfg(tmp_path, cfg, f"c{k}.yaml")), "--max-steps", "3"]) == 0
        logs.append((tmp_path / f"run{k}" / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_cli_bench_outputs(tmp_path, capsys):
    path = write_cfg(tmp_path, tiny_cfg(tmp_path))
    out = tmp_path / "bench"
    code = cli.main(["bench", str(path), "--output-dir", str(out), "--image-size", "128",
                     "--precisions", "single,half"])
    assert code == 0
    rows = list(csv.DictReader(open(out / "latency.csv")))
    summary = json.loads((out / "summary.json").read_text())
    precisions = {"single"} | ({"half"} if not summary["skipped"] else set())
    assert {(r["precision"], r["with_postprocess"]) for r in rows} == {
        (p, pp) for p in precisions for pp in ("True", "False")}
    assert "postprocess_share_pct_single" in summary["modes"][0]
    reports = json.loads((out / "latency.json").read_text())
    assert all(r["repeats"] >= 30 for r in reports)
    assert (out / "latency_modes.png").stat().st_size > 0
    assert cli.main(["bench", str(path), "--repeats", "5"]) == 1
    assert cli.main(["bench", str(path), "--precisions", "double"]) == 1


def _bench_grid(tmp_path):
    base = tiny_run_config().to_dict()
    return {"mode": "bench", "base": base, "depths": [50, 101], "resolutions": [128], "precisions": ["single"],
            "repeats": 30, "warmups": 10, "reference_ap": {"r50-128": 30.0, "r101-128": 31.0}}


def test_cli_sweep_resume_and_failures(tmp_path, monkeypatch):
    grid_path = tmp_path / "grid.yaml"
    grid_path.write_text(yaml.safe_dump(_bench_grid(tmp_path)))
    out = tmp_path / "sweep"
    real = cli._run_bench_entry

    def flaky(cfg, grid):
        if cfg.scale_config.backbone_depth == 101:
            raise RuntimeError("injected failure")
        return real(cfg, grid)

    monkeypatch.setattr(cli, "_run_bench_entry", flaky)
    assert cli.main(["sweep", str(grid_path), "--output-dir", str(out)]) == 2
    failures = json.loads((out / "failures.json").read_text())
    assert [f["run_id"] for f in failures] == ["retinanet_rs-grid-r101-128"]
    assert "injected failure" in failures[0]["error"]
    done = out / "runs" / "retinanet_rs-grid-r50-128" / "result.json"
    stamp = done.stat().st_mtime_ns

    calls = []

    def counting(cfg, grid):
        calls.append(cfg.scale_config.backbone_depth)
        return real(cfg, grid)

    monkeypatch.setattr(cli, "_run_bench_entry", counting)
    assert cli.main(["sweep", str(grid_path), "--output-dir", str(out)]) == 0
    assert calls == [101]
    assert done.stat().st_mtime_ns == stamp
    assert json.loads((out / "failures.json").read_text()) == []
    frontier = json.loads((out / "pareto.json").read_text())
    assert {p["config_id"] for p in frontier["points"]} == {"retinanet_rs-grid-r50-128", "retinanet_rs-grid-r101-128"}
    for name in ("sweep_latency.csv", "sweep_modes.json", "pareto.csv", "pareto.png"):
        assert (out / name).exists(), name


def test_cli_train_sweep(tmp_path):
    base = tiny_run_config(epochs=1).to_dict()
    grid = {"mode": "train", "base": base, "jitter_ranges": [[1.0, 1.0], [0.5, 1.5]], "epochs": [1]}
    grid_path = tmp_path / "grid.yaml"
    grid_path.write_text(yaml.safe_dump(grid))
    assert cli.main(["sweep", str(grid_path), "--output-dir", str(tmp_path / "s")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "sweep_ap.csv")))
    assert [r["run_id"] for r in rows] == ["jitter1-1_ep1", "jitter0.5-1.5_ep1"]
    assert (tmp_path / "s" / "sweep_ap.png").exists()


def test_cli_sweep_rejects_bad_mode(tmp_path):
    grid_path = tmp_path / "grid.yaml"
    grid_path.write_text(yaml.safe_dump({"mode": "both"}))
    assert cli.main(["sweep", str(grid_path)]) == 1


def test_cli_export_configs(tmp_path):
    out = tmp_path / "table"
    assert cli.main(["export-configs", "--output-dir", str(out)]) == 0
    files = sorted(out.glob("*.yaml"))
    assert len(files) == 14
    index = list(csv.DictReader(open(out / "index.csv")))
    assert len(index) == 14
    for row in index:
        cfg = load_config(out / row["file"])
        assert cfg.resolution == int(row["resolution"]) and cfg.scale_config.backbone_depth == int(row["depth"])
