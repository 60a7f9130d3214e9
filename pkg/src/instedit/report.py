"""Run and metrics reports: JSON, delimited CSV, and rendered figures.

Every figure is written next to the delimited output so a run can be
inspected without re-running anything.  JSON is emitted with sorted keys so
two runs of the same configuration produce byte-identical reports apart
from the wall-clock block.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dms import BACKGROUND_KEY


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _region_rows(report: dict):
    for row in report.get("region_trace", []):
        for region, mean in sorted(row["means"].items()):
            yield row["step"], row["timestep"], row["phase"], region, mean


def write_run_report(out_dir, report: dict, config: dict | None = None) -> Path:
    """report.json + report.csv + figures/ under ``out_dir``; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(report)
    if config is not None:
        payload["config"] = config
    json_path = out_dir / "report.json"
    _dump_json(json_path, payload)

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "timestep", "phase", "region", "mean"])
        for row in _region_rows(report):
            writer.writerow(row)

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    _plot_region_trace(report, fig_dir / "region_means.png")
    _plot_lambda_traces(report, fig_dir / "lambda_s.png")
    return json_path


def _plot_region_trace(report: dict, path: Path) -> None:
    trace = report.get("region_trace", [])
    if not trace:
        return
    regions = sorted(trace[0]["means"])
    steps = [row["step"] for row in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    for region in regions:
        label = "background" if region == BACKGROUND_KEY else region
        ax.plot(steps, [row["means"][region] for row in trace], label=label, linewidth=1.4)
    for row in trace:
        if row["phase"] == "pns":
            ax.axvline(row["step"], color="0.85", linewidth=0.8, zorder=0)
            break
    ax.set_xlabel("denoising step")
    ax.set_ylabel("region mean latent value")
    ax.set_title(f"region means ({report.get('mode_label', 'run')})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_lambda_traces(report: dict, path: Path) -> None:
    traces = report.get("lambda_s_traces", {})
    if not any(traces.values()):
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for iid, rows in sorted(traces.items()):
        if not rows:
            continue
        by_step: dict[int, list[float]] = {}
        for row in rows:
            by_step.setdefault(row["step"], []).append(row["lambda_s"])
        steps = sorted(by_step)
        ax.plot(steps, [float(np.mean(by_step[s])) for s in steps], marker="o", markersize=3, label=iid)
    ax.set_xlabel("denoising step")
    ax.set_ylabel("redistributed S mass (mean over frames)")
    ax.set_title("per-instance redistribution trace")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_report(out_dir, metrics: dict) -> Path:
    """metrics.json + metrics.csv + figures/metrics.png; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    _dump_json(json_path, metrics)

    rows = []
    for key in ("cia", "instance_accuracy", "ssim_background", "lpips"):
        rows.append((key, "", metrics.get(key)))
    for key, value in sorted((metrics.get("global") or {}).items()):
        rows.append((key, "", value))
    for iid, entry in sorted((metrics.get("instances") or {}).items()):
        for key in ("ltf", "ltc"):
            rows.append((key, iid, entry.get(key)))

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "instance", "value"])
        for metric, iid, value in rows:
            writer.writerow([metric, iid, "" if value is None else value])

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    scored = [(f"{m}:{i}" if i else m, v) for m, i, v in rows if isinstance(v, (int, float))]
    if scored:
        fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(scored)), 4))
        ax.bar(range(len(scored)), [v for _, v in scored], color="steelblue")
        ax.set_xticks(range(len(scored)))
        ax.set_xticklabels([n for n, _ in scored], rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("score")
        ax.set_title("evaluation scores")
        fig.tight_layout()
        fig.savefig(fig_dir / "metrics.png", dpi=120)
        plt.close(fig)
    return json_path
