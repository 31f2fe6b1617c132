"""Delimited reports plus rendered figures, written side by side."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalbench import ApReport, BenchResult, CostReport  # noqa: E402

METRICS_HEADER = ["step", "l_det", "l_mask", "total", "lr"]


def write_metrics_csv(path: str | Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for step, l_det, l_mask, total, lr in rows:
            w.writerow([step, repr(float(l_det)), repr(float(l_mask)),
                        repr(float(total)), repr(float(lr))])


def render_metrics_figure(rows: list[tuple], path: str | Path) -> None:
    steps = [r[0] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [r[1] for r in rows], label="detection", lw=0.8)
    ax1.plot(steps, [r[2] for r in rows], label="mask", lw=0.8)
    ax1.plot(steps, [r[3] for r in rows], label="total", lw=0.8, color="k")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax2.plot(steps, [r[4] for r in rows], color="tab:red")
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_ap_csv(report: ApReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(float(value))])
        w.writerow(["num_predictions", report.num_predictions])
        w.writerow(["num_gts", report.num_gts])


def render_ap_figure(report: ApReport, path: str | Path) -> None:
    names = ["AP", "AP50", "AP75"] + [f"class {c}" for c in sorted(report.per_class)]
    values = [report.ap, report.ap50, report.ap75] + \
        [report.per_class[c] for c in sorted(report.per_class)]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
    bars = ax.bar(names, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mask AP")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_cost_csv(reports: list[CostReport], path: str | Path,
                   config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "metric", "value", "config_hash"])
        for rep in reports:
            for name, value in rep.rows():
                w.writerow([rep.mode, name, value, config_hash])


def render_cost_figure(reports: list[CostReport], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.4))
    names = [r.mode for r in reports]
    feature = [r.multiply_adds for r in reports]
    heads = [r.head_multiply_adds for r in reports]
    x = range(len(names))
    ax.bar(x, feature, width=0.6, label="mask-feature path", color="tab:blue")
    ax.bar(x, heads, width=0.6, bottom=feature, label="mask heads", color="tab:orange")
    ax.set_xticks(list(x), names)
    ax.set_yscale("log")
    ax.set_ylabel("multiply-adds")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_bench_csv(results: list[BenchResult], path: str | Path,
                    config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_points", "metric", "value", "config_hash"])
        for res in results:
            for name, value in res.rows():
                w.writerow([res.sample_points, name, repr(float(value))
                            if isinstance(value, float) else value, config_hash])


def render_bench_figure(results: list[BenchResult], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    pts = [r.sample_points for r in results]
    med = [r.points_per_sec_median for r in results]
    iqr = [r.points_per_sec_iqr for r in results]
    ax.errorbar(pts, med, yerr=iqr, marker="o", capsize=3)
    ax.set_xlabel("sampled points per image")
    ax.set_ylabel("points / second (median, IQR)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
