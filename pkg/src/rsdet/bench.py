"""Batch-size-1 latency benchmarking and speed/accuracy Pareto reports."""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .scaling import ScaleConfig

MIN_REPEATS = 30
MIN_WARMUPS = 10
PRECISIONS = {"half": torch.float16, "single": torch.float32}
REPORT_COLUMNS = ["config_id", "resolution", "depth", "precision", "with_postprocess", "median_ms", "mean_ms",
                  "p95_ms", "ap"]


class PrecisionUnsupportedError(RuntimeError):
    pass


def environment() -> dict:
    env = {
        "torch": torch.__version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "threads": torch.get_num_threads(),
    }
    if torch.cuda.is_available():
        env["device_name"] = torch.cuda.get_device_name()
    return env


@dataclass
class LatencyReport:
    config_id: str
    resolution: int
    depth: int
    precision: str
    include_postprocess: bool
    samples_ms: list[float]
    warmups: int
    transfer_ms: list[float] = field(default_factory=list)
    device: str = "cpu"
    environment: dict = field(default_factory=environment)
    ap: float | None = None

    @property
    def repeats(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    def row(self) -> dict:
        return {
            "config_id": self.config_id,
            "resolution": self.resolution,
            "depth": self.depth,
            "precision": self.precision,
            "with_postprocess": self.include_postprocess,
            "median_ms": round(self.median_ms, 4),
            "mean_ms": round(self.mean_ms, 4),
            "p95_ms": round(self.p95_ms, 4),
            "ap": self.ap,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(median_ms=self.median_ms, mean_ms=self.mean_ms, p95_ms=self.p95_ms, repeats=self.repeats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyReport":
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in keys})


def _sync(device: torch.device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def check_precision(precision: str, device="cpu") -> torch.dtype:
    """Dtype for ``precision`` after probing that a conv runs in it on ``device``."""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    dtype = PRECISIONS[precision]
    device = torch.device(device)
    try:
        conv = torch.nn.Conv2d(3, 4, 3).to(device=device, dtype=dtype)
        with torch.no_grad():
            conv(torch.zeros(1, 3, 8, 8, device=device, dtype=dtype))
    except (RuntimeError, TypeError) as e:
        raise PrecisionUnsupportedError(f"{precision} inference is not supported on {device}: {e}") from e
    return dtype


@torch.no_grad()
def benchmark(model, config: ScaleConfig, precision: str = "single", include_postprocess: bool = True,
              repeats: int = MIN_REPEATS, warmups: int = MIN_WARMUPS, device="cpu",
              image_size: int | None = None, seed: int = 0) -> LatencyReport:
    """Time batch-size-1 inference.

    Weights and the input image are cast to the requested precision. Host to
    device transfer of the input is timed separately and excluded from the
    samples. With ``include_postprocess`` each sample covers the forward pass
    plus decode/NMS/top-k; otherwise only the forward pass.

    Args:
        model: a detector exposing ``forward`` and ``postprocess``.
        config: the scale row the model was built for.
        image_size: overrides ``config.resolution`` (for reduced smoke runs).

    Raises:
        ValueError: fewer than 30 repeats or 10 warmups.
        PrecisionUnsupportedError: the device cannot run the precision.
    """
    if repeats < MIN_REPEATS or warmups < MIN_WARMUPS:
        raise ValueError(f"need repeats >= {MIN_REPEATS} and warmups >= {MIN_WARMUPS}, got {repeats}/{warmups}")
    device = torch.device(device)
    dtype = check_precision(precision, device)
    size = image_size or config.resolution
    was_training = model.training
    orig_dtype = next(model.parameters()).dtype
    model.eval().to(device=device, dtype=dtype)
    host = torch.randn(1, 3, size, size, generator=torch.Generator().manual_seed(seed))
    samples, transfers = [], []
    try:
        for i in range(warmups + repeats):
            _sync(device)
            t0 = time.perf_counter()
            x = host.to(device=device, dtype=dtype)
            _sync(device)
            t1 = time.perf_counter()
            raw = model.forward(x)
            if include_postprocess:
                model.postprocess(raw)
            _sync(device)
            t2 = time.perf_counter()
            if i >= warmups:
                samples.append((t2 - t1) * 1e3)
                transfers.append((t1 - t0) * 1e3)
    finally:
        model.to(dtype=orig_dtype).train(was_training)
    return LatencyReport(config.config_id, size, config.backbone_depth, precision, include_postprocess,
                         samples, warmups, transfers, str(device))


def postprocess_share(with_pp: LatencyReport, without_pp: LatencyReport) -> float:
    """Percentage of end-to-end median latency spent after the forward pass."""
    t_with, t_without = with_pp.median_ms, without_pp.median_ms
    return 100.0 * (t_with - t_without) / t_with


def precision_speedup(half: LatencyReport, single: LatencyReport) -> float:
    return single.median_ms / half.median_ms


@dataclass
class ParetoPoint:
    latency_ms: float
    quality: float
    config_id: str
    dominated: bool = False


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """``a`` is no slower and no less accurate than ``b`` and better in one."""
    return (a.latency_ms <= b.latency_ms and a.quality >= b.quality
            and (a.latency_ms < b.latency_ms or a.quality > b.quality))


def pareto_report(points: list[ParetoPoint]) -> tuple[list[ParetoPoint], list[ParetoPoint]]:
    """Mark dominated points; return (frontier sorted by latency, all points)."""
    if not points:
        raise ValueError("pareto_report needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i].latency_ms, -points[i].quality))
    marked = [ParetoPoint(p.latency_ms, p.quality, p.config_id) for p in points]
    best_quality = -np.inf
    best_latency = None
    for i in order:
        p = marked[i]
        if p.quality < best_quality or (p.quality == best_quality and p.latency_ms > best_latency):
            p.dominated = True
        elif p.quality > best_quality:
            best_quality, best_latency = p.quality, p.latency_ms
    frontier = [marked[i] for i in order if not marked[i].dominated]
    return frontier, marked


def write_reports(reports: list[LatencyReport], out_dir, stem: str = "latency") -> dict[str, Path]:
    """Write ``<stem>.csv`` (REPORT_COLUMNS) and ``<stem>.json`` (full reports)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    return {"csv": csv_path, "json": json_path}


def write_pareto(points: list[ParetoPoint], out_dir, stem: str = "pareto") -> dict[str, Path]:
    """Write every point with its dominated flag (CSV) and the frontier (JSON)."""
    frontier, marked = pareto_report(points)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["config_id", "latency_ms", "quality", "dominated"])
        w.writeheader()
        for p in sorted(marked, key=lambda p: p.latency_ms):
            w.writerow(asdict(p))
    json_path.write_text(json.dumps({"frontier": [asdict(p) for p in frontier],
                                     "points": [asdict(p) for p in marked]}, indent=2))
    return {"csv": csv_path, "json": json_path}


def summarize_modes(reports: list[LatencyReport]) -> list[dict]:
    """Per config: fp32/fp16 speedup and postprocess share for each precision."""
    by_cfg: dict[str, dict] = {}
    for r in reports:
        by_cfg.setdefault(r.config_id, {})[(r.precision, r.include_postprocess)] = r
    rows = []
    for cid, modes in by_cfg.items():
        row = {"config_id": cid}
        for prec in PRECISIONS:
            w, wo = modes.get((prec, True)), modes.get((prec, False))
            if w and wo:
                row[f"postprocess_share_pct_{prec}"] = round(postprocess_share(w, wo), 3)
        for pp in (True, False):
            h, s = modes.get(("half", pp)), modes.get(("single", pp))
            if h and s:
                row[f"fp16_speedup_{'e2e' if pp else 'model'}"] = round(precision_speedup(h, s), 4)
        rows.append(row)
    return rows
