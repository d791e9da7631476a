"""Matplotlib figures written next to the CSV/JSON benchmark reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import LatencyReport, ParetoPoint, pareto_report  # noqa: E402

FIGSIZE = (6.0, 4.0)
DPI = 120


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_pareto(points: list[ParetoPoint], path, xlabel="latency (ms)", ylabel="AP") -> Path:
    frontier, marked = pareto_report(points)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    dom = [p for p in marked if p.dominated]
    if dom:
        ax.scatter([p.latency_ms for p in dom], [p.quality for p in dom], c="0.6", s=18, label="dominated")
    ax.plot([p.latency_ms for p in frontier], [p.quality for p in frontier], "o-", c="C0", label="frontier")
    for p in frontier:
        ax.annotate(p.config_id, (p.latency_ms, p.quality), fontsize=6, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_latency_modes(reports: list[LatencyReport], path) -> Path:
    """Grouped bars of median latency per config for each precision/postprocess mode."""
    configs = list(dict.fromkeys(r.config_id for r in reports))
    modes = [("single", True), ("single", False), ("half", True), ("half", False)]
    lookup = {(r.config_id, r.precision, r.include_postprocess): r for r in reports}
    fig, ax = plt.subplots(figsize=(max(FIGSIZE[0], 1.6 * len(configs)), FIGSIZE[1]))
    width = 0.8 / len(modes)
    for k, (prec, pp) in enumerate(modes):
        xs, ys = [], []
        for i, cid in enumerate(configs):
            r = lookup.get((cid, prec, pp))
            if r is not None:
                xs.append(i + (k - 1.5) * width)
                ys.append(r.median_ms)
        if xs:
            label = f"{'fp16' if prec == 'half' else 'fp32'}{'' if pp else ' model only'}"
            ax.bar(xs, ys, width, label=label)
    ax.set_xticks(range(len(configs)))
    ax.set_xticklabels(configs, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("median latency (ms)")
    ax.legend(fontsize=7)
    return _finish(fig, path)


def plot_loss_curve(records: list[dict], path, key: str = "total") -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot([r["step"] for r in records], [r[key] for r in records], lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(f"{key} loss")
    ax.grid(alpha=0.3)
    return _finish(fig, path)
