"""SVG summaries of one or more run directories."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import MissingFile  # noqa: E402
from .runner import METRICS_FILE, TIMING_FILE, read_metrics, read_report  # noqa: E402

ACCURACY_FILE = "accuracy_vs_time.svg"
LOSS_FILE = "loss_curves.svg"


def training_seconds(run: Path) -> float:
    """Wall time of the run; taken from ``timing.csv`` when present since
    deterministic runs log 0.0 in ``metrics.csv``."""
    timing = run / TIMING_FILE
    if timing.exists():
        with open(timing, newline="", encoding="utf-8") as fh:
            times = [float(r["wall_time_s"]) for r in csv.DictReader(fh)]
        if times:
            return times[-1]
    rows = read_metrics(run / METRICS_FILE)
    return rows[-1]["wall_time_s"] if rows else 0.0


def collect(run: Path) -> dict:
    if not (run / METRICS_FILE).exists():
        raise MissingFile(f"{run} has no {METRICS_FILE}")
    reports = {p.stem[len("probe_"):]: read_report(p) for p in sorted(run.glob("probe_*.json"))}
    return {"name": run.name, "metrics": read_metrics(run / METRICS_FILE),
            "seconds": training_seconds(run), "reports": reports}


def plot_runs(run_dirs, out_dir) -> list[Path]:
    runs = [collect(Path(r)) for r in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # svg output embeds a date and random ids unless these are pinned
    plt.rcParams["svg.hashsalt"] = "convjepa"
    meta = {"Date": None}

    fig, ax = plt.subplots(figsize=(5, 4))
    for run in runs:
        for kind, rep in run["reports"].items():
            t = 0.0 if kind.endswith("_baseline") else run["seconds"]
            marker = "x" if kind.endswith("_baseline") else "o"
            ax.scatter([t], [100 * rep.top1], marker=marker, label=f"{run['name']} {kind}")
    ax.set_xlabel("pretraining wall time (s)")
    ax.set_ylabel("top-1 accuracy (%)")
    if ax.has_data():
        ax.legend(fontsize="small")
    fig.tight_layout()
    acc_path = out / ACCURACY_FILE
    fig.savefig(acc_path, format="svg", metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for run in runs:
        rows = run["metrics"]
        ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=run["name"], linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("masked L2 loss")
    ax.set_yscale("log")
    ax.legend(fontsize="small")
    fig.tight_layout()
    loss_path = out / LOSS_FILE
    fig.savefig(loss_path, format="svg", metadata=meta)
    plt.close(fig)
    return [acc_path, loss_path]
