"""Command line entry point: ``rsdet train|eval|bench|sweep|export-configs``.

Exit codes: 0 on success, 1 for invalid input (config, dataset, arguments),
2 for failures while running (divergence, failed sweep entries, crashes).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch
import yaml

from .bench import (MIN_REPEATS, MIN_WARMUPS, PRECISIONS, LatencyReport, ParetoPoint, PrecisionUnsupportedError,
                    benchmark, summarize_modes, write_pareto, write_reports)
from .config import (ConfigError, RunConfig, ablation_run_configs, build_dataset, load_config, save_config,
                     table_run_config)
from .datapipe import SYNTH_CLASSES, DatasetError, JitterSpec
from .detectors import DetectorConfig, build_detector
from .evaluation import evaluate_detector
from .scaling import all_table_rows
from .training import TrainingDiverged, load_checkpoint, seed_everything, train

logger = logging.getLogger("rsdet")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def num_classes_for(cfg: RunConfig) -> int:
    if cfg.dataset.kind == "synth":
        return len(SYNTH_CLASSES)
    with open(cfg.dataset.annotations) as f:
        return len(json.load(f).get("categories", []))


# ---------------------------------------------------------------- train


def cmd_train(cfg: RunConfig, resume: str | None = None) -> Path:
    """Train ``cfg`` and write metrics, checkpoints and a loss curve under ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    dataset = build_dataset(cfg, "train")
    det_cfg = cfg.detector_config(dataset.num_classes)
    seed_everything(cfg.seed)
    model = build_detector(det_cfg)
    save_config(cfg, out / "config.yaml")
    state = train(model, dataset, cfg.recipe, seed=cfg.seed, output_dir=out, checkpoint_every=cfg.checkpoint_every,
                  max_steps=cfg.max_steps, num_workers=cfg.num_workers, resume_from=resume,
                  with_masks=cfg.model.with_masks, extra={"detector": det_cfg.to_dict()})
    if state.metrics:
        from .plots import plot_loss_curve

        plot_loss_curve(state.metrics, out / "loss_curve.png")
    logger.info("trained %d steps, checkpoint at %s", state.step, out / "checkpoints" / "last")
    return out


# ---------------------------------------------------------------- eval


def load_model(checkpoint) -> torch.nn.Module:
    ckpt = Path(checkpoint)
    meta_path = ckpt / "state.json"
    if not meta_path.exists():
        raise UsageError(f"{ckpt} is not a checkpoint directory (no state.json)")
    meta = json.loads(meta_path.read_text())
    if "detector" not in meta:
        raise UsageError(f"{meta_path} does not record the detector configuration")
    model = build_detector(DetectorConfig.from_dict(meta["detector"]))
    load_checkpoint(ckpt, model, restore_rng=False)
    return model


def cmd_eval(cfg: RunConfig, checkpoint, out_dir) -> dict:
    """Score a checkpoint; writes ``metrics.json`` and ``detections.json``."""
    model = load_model(checkpoint)
    dataset = build_dataset(cfg, "eval")
    metrics, dets = evaluate_detector(model, dataset, cfg.resolution)
    out = Path(out_dir)
    _write_json(out / "metrics.json", {"checkpoint": str(checkpoint), "num_images": len(dataset), **metrics})
    _write_json(out / "detections.json", {str(k): v.to_dict() for k, v in dets.items()})
    return metrics


# ---------------------------------------------------------------- bench


def bench_modes(model, scale_cfg, precisions, repeats, warmups, image_size=None) -> tuple[list, list]:
    """Benchmark every precision with and without postprocessing.

    Returns ``(reports, skipped)``; precisions the device cannot run are
    listed in ``skipped`` instead of aborting the others.
    """
    reports, skipped = [], []
    for prec in precisions:
        try:
            for pp in (True, False):
                reports.append(benchmark(model, scale_cfg, prec, pp, repeats, warmups, image_size=image_size))
        except PrecisionUnsupportedError as e:
            skipped.append({"precision": prec, "reason": str(e)})
    return reports, skipped


def cmd_bench(cfg: RunConfig, out_dir, precisions=("single", "half"), repeats=MIN_REPEATS, warmups=MIN_WARMUPS,
              checkpoint=None, image_size=None) -> list[LatencyReport]:
    """Latency reports for one config in both precisions, with and without postprocessing."""
    from .plots import plot_latency_modes

    if checkpoint:
        model = load_model(checkpoint)
    else:
        seed_everything(cfg.seed)
        model = build_detector(cfg.detector_config(num_classes_for(cfg)))
    reports, skipped = bench_modes(model, cfg.scale_config, precisions, repeats, warmups, image_size)
    out = Path(out_dir)
    paths = write_reports(reports, out) if reports else {}
    _write_json(out / "summary.json", {"modes": summarize_modes(reports), "skipped": skipped,
                                       "files": {k: str(v) for k, v in paths.items()}})
    if reports:
        plot_latency_modes(reports, out / "latency_modes.png")
    if not reports:
        raise PrecisionUnsupportedError(f"none of {list(precisions)} can run here: {skipped}")
    return reports


# ---------------------------------------------------------------- sweep


def _grid_base(grid: dict, grid_path: Path | None) -> RunConfig:
    if "base_config" in grid:
        p = Path(grid["base_config"])
        if grid_path is not None and not p.is_absolute():
            p = grid_path.parent / p
        return load_config(p)
    return RunConfig.from_dict(grid.get("base", {}))


def _bench_entries(grid: dict, base: RunConfig) -> list[tuple[str, RunConfig]]:
    entries = []
    for depth in grid.get("depths", [base.scale_config.backbone_depth]):
        for res in grid.get("resolutions", [base.resolution]):
            d = base.to_dict()
            d["model"].update(resolution=res, depth=depth)
            d["recipe"]["jitter"]["target_size"] = res
            cfg = RunConfig.from_dict(d)
            entries.append((cfg.scale_config.config_id, cfg))
    return entries


def _train_entries(grid: dict, base: RunConfig, out: Path) -> list[tuple[str, RunConfig]]:
    entries = []
    for lo, hi in grid.get("jitter_ranges", [list(base.recipe.jitter.scale_range)]):
        for epochs in grid.get("epochs", [base.recipe.epochs]):
            run_id = f"jitter{lo:g}-{hi:g}_ep{epochs}"
            recipe = replace(base.recipe, epochs=int(epochs),
                             jitter=JitterSpec(base.recipe.jitter.target_size, (float(lo), float(hi))))
            cfg = replace(base, recipe=recipe, output_dir=str(out / "runs" / run_id))
            entries.append((run_id, cfg.validate()))
    return entries


def _run_bench_entry(cfg: RunConfig, grid: dict) -> dict:
    model = build_detector(cfg.detector_config(num_classes_for(cfg)))
    reports, skipped = bench_modes(model, cfg.scale_config, grid.get("precisions", ["single"]),
                                   int(grid.get("repeats", MIN_REPEATS)), int(grid.get("warmups", MIN_WARMUPS)),
                                   grid.get("image_size"))
    if not reports:
        raise PrecisionUnsupportedError(f"no requested precision can run: {skipped}")
    return {"reports": [r.to_dict() for r in reports], "skipped": skipped}


def _run_train_entry(cfg: RunConfig) -> dict:
    out = cmd_train(cfg)
    model = load_model(out / "checkpoints" / "last")
    metrics, _ = evaluate_detector(model, build_dataset(cfg, "eval"), cfg.resolution)
    return {"jitter": list(cfg.recipe.jitter.scale_range), "epochs": cfg.recipe.epochs, "metrics": metrics}


def _safe_run(mode: str, run_id: str, cfg: RunConfig, grid: dict, result_path: str) -> dict:
    """Run one sweep entry, persisting its result or its failure; never raises."""
    try:
        seed_everything(cfg.seed)
        res = _run_bench_entry(cfg, grid) if mode == "bench" else _run_train_entry(cfg)
        res.update(run_id=run_id, status="ok")
        _write_json(Path(result_path), res)
    except Exception as e:  # record and keep sweeping
        res = {"run_id": run_id, "status": "failed", "error": f"{type(e).__name__}: {e}",
               "traceback": traceback.format_exc()}
    return res


def cmd_sweep(grid: dict, out_dir, grid_path: Path | None = None, parallel: int = 1) -> dict:
    """Run every grid entry, skipping those with a saved result.

    ``mode: bench`` sweeps backbone depth by resolution and emits latency
    reports plus a Pareto frontier; ``mode: train`` sweeps jitter range by
    epoch count and emits an AP table. ``parallel > 1`` runs training entries
    in separate processes.
    """
    mode = grid.get("mode", "bench")
    if mode not in ("bench", "train"):
        raise UsageError(f"grid.mode: {mode!r} is not 'bench' or 'train'")
    if parallel > 1 and mode != "train":
        raise UsageError("parallel execution is only available for training sweeps")
    out = Path(out_dir)
    base = _grid_base(grid, grid_path)
    entries = _bench_entries(grid, base) if mode == "bench" else _train_entries(grid, base, out)
    results, todo = {}, []
    for run_id, cfg in entries:
        rp = out / "runs" / run_id / "result.json"
        if rp.exists():
            logger.info("skipping %s (result exists)", run_id)
            results[run_id] = json.loads(rp.read_text())
        else:
            todo.append((run_id, cfg, str(rp)))
    if parallel > 1 and todo:
        with ProcessPoolExecutor(parallel) as pool:
            futs = [pool.submit(_safe_run, mode, rid, cfg, grid, rp) for rid, cfg, rp in todo]
            for (rid, _, _), fut in zip(todo, futs):
                results[rid] = fut.result()
    else:
        for rid, cfg, rp in todo:
            logger.info("running %s", rid)
            results[rid] = _safe_run(mode, rid, cfg, grid, rp)
    ordered = [results[rid] for rid, _ in entries]
    failures = [r for r in ordered if r.get("status") != "ok"]
    _write_json(out / "failures.json", failures)
    ok = [r for r in ordered if r.get("status") == "ok"]
    if mode == "bench":
        _summarize_bench_sweep(ok, grid, out)
    else:
        _summarize_train_sweep(ok, out)
    return {"completed": len(ok), "failed": len(failures), "total": len(entries)}


def _summarize_bench_sweep(results: list[dict], grid: dict, out: Path) -> None:
    from .plots import plot_latency_modes, plot_pareto

    reports = [LatencyReport.from_dict(d) for r in results for d in r["reports"]]
    reference = grid.get("reference_ap", {})
    for rep in reports:
        key = f"r{rep.depth}-{rep.resolution}"
        rep.ap = reference.get(key, rep.ap)
    if not reports:
        return
    write_reports(reports, out, "sweep_latency")
    _write_json(out / "sweep_modes.json", summarize_modes(reports))
    plot_latency_modes(reports, out / "sweep_latency_modes.png")
    # frontier over the first listed precision, end to end
    prec = grid.get("precisions", ["single"])[0]
    points = [ParetoPoint(r.median_ms, r.ap, r.config_id) for r in reports
              if r.ap is not None and r.precision == prec and r.include_postprocess]
    if points:
        write_pareto(points, out)
        plot_pareto(points, out / "pareto.png")


def _summarize_train_sweep(results: list[dict], out: Path) -> None:
    import matplotlib.pyplot as plt

    from .plots import FIGSIZE, _finish

    if not results:
        return
    with open(out / "sweep_ap.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "jitter_low", "jitter_high", "epochs", "AP", "AP50", "AP75"])
        for r in results:
            m = r["metrics"]
            w.writerow([r["run_id"], *r["jitter"], r["epochs"], m["AP"], m["AP50"], m["AP75"]])
    fig, ax = plt.subplots(figsize=FIGSIZE)
    by_jitter: dict[tuple, list] = {}
    for r in results:
        by_jitter.setdefault(tuple(r["jitter"]), []).append((r["epochs"], r["metrics"]["AP"] or 0.0))
    for (lo, hi), pts in by_jitter.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"scale [{lo:g}, {hi:g}]")
    ax.set_xlabel("epochs")
    ax.set_ylabel("AP")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    _finish(fig, out / "sweep_ap.png")


# ---------------------------------------------------------------- export


def cmd_export_configs(out_dir) -> list[Path]:
    """One YAML per scaling-table row plus an index CSV.

    The cumulative ablation steps go to ``ablation/`` with their own index,
    which also records the inference precision of each step.
    """
    out = Path(out_dir)
    paths = []
    rows = all_table_rows()
    for sc in rows:
        cfg = table_run_config(sc.family, sc.scale_label)
        paths.append(save_config(cfg, out / f"{sc.config_id}.yaml"))
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_id", "family", "scale", "resolution", "depth", "file"])
        for sc, p in zip(rows, paths):
            w.writerow([sc.config_id, sc.family, sc.scale_label, sc.resolution, sc.backbone_depth, p.name])
    ablation = out / "ablation"
    with open(_mkdir(ablation) / "index.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["order", "step", "precision", "file"])
        for i, (step, cfg, precision) in enumerate(ablation_run_configs()):
            p = save_config(cfg, ablation / f"{i}_{step}.yaml")
            w.writerow([i, step, precision, p.name])
    return paths


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsdet", description="Train, evaluate and benchmark scaled detectors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("config")
    t.add_argument("--output-dir")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("config")
    e.add_argument("checkpoint")
    e.add_argument("--output-dir", default="eval")

    b = sub.add_parser("bench", help="batch-1 latency in each precision and postprocess mode")
    b.add_argument("config")
    b.add_argument("--output-dir", default="bench")
    b.add_argument("--checkpoint")
    b.add_argument("--precisions", default="single,half")
    b.add_argument("--repeats", type=int, default=MIN_REPEATS)
    b.add_argument("--warmups", type=int, default=MIN_WARMUPS)
    b.add_argument("--image-size", type=int, help="override the input size for quick runs")

    s = sub.add_parser("sweep", help="resumable grid of bench or train runs")
    s.add_argument("grid")
    s.add_argument("--output-dir", default="sweep")
    s.add_argument("--parallel", type=int, default=1)

    x = sub.add_parser("export-configs", help="write one config per scaling-table row")
    x.add_argument("--output-dir", default="configs/table")
    return p


def _run(args) -> int:
    if args.command == "train":
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = replace(cfg, output_dir=args.output_dir)
        if args.max_steps is not None:
            cfg = replace(cfg, max_steps=args.max_steps)
        out = cmd_train(cfg, args.resume)
        print(json.dumps({"output_dir": str(out)}))
    elif args.command == "eval":
        metrics = cmd_eval(load_config(args.config), args.checkpoint, args.output_dir)
        print(json.dumps(metrics, sort_keys=True))
    elif args.command == "bench":
        precisions = [s.strip() for s in args.precisions.split(",") if s.strip()]
        bad = [s for s in precisions if s not in PRECISIONS]
        if bad:
            raise UsageError(f"--precisions: unknown {bad}; choose from {sorted(PRECISIONS)}")
        if args.repeats < MIN_REPEATS or args.warmups < MIN_WARMUPS:
            raise UsageError(f"--repeats must be >= {MIN_REPEATS} and --warmups >= {MIN_WARMUPS}")
        reports = cmd_bench(load_config(args.config), args.output_dir, precisions, args.repeats, args.warmups,
                            args.checkpoint, args.image_size)
        print(json.dumps([r.row() for r in reports]))
    elif args.command == "sweep":
        path = Path(args.grid)
        try:
            grid = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise UsageError(f"cannot read grid {path}: {e}") from e
        summary = cmd_sweep(grid, args.output_dir, path, args.parallel)
        print(json.dumps(summary))
        if summary["failed"]:
            logger.error("%d of %d sweep entries failed; see failures.json", summary["failed"], summary["total"])
            return EXIT_FAILED
    elif args.command == "export-configs":
        paths = cmd_export_configs(args.output_dir)
        print(json.dumps({"written": len(paths), "output_dir": args.output_dir}))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, DatasetError, UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as e:
        print(f"error: {e} (state dumped to {e.dump_dir})", file=sys.stderr)
        return EXIT_FAILED
    except Exception as e:
        logger.debug("unhandled", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
