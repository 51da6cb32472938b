"""Report rendering: confusion heatmaps, training curves, and the summary
table (baseline vs translated vs max-rule, with improvement multipliers),
written as PNG figures alongside CSV/text output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .authmetrics import format_improvement, improvement
from .config import RunConfig

_FIG_DPI = 120


def confusion_heatmap(counts, path, title: str):
    """Render one confusion matrix (rows true, columns predicted) to a PNG."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.shape[0]
    rows = counts.sum(axis=1, keepdims=True)
    pct = np.divide(100.0 * counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
    im = ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xlabel("predicted device")
    ax.set_ylabel("true device")
    ax.set_title(title)
    for i in range(n):
        for j in range(n):
            color = "white" if pct[i, j] > 50 else "black"
            ax.text(j, i, f"{pct[i, j]:.0f}", ha="center", va="center", color=color, fontsize=8)
    fig.colorbar(im, ax=ax, label="% of device's slices")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def impersonation_heatmap(matrix, path, chance_pct: float):
    """Adversarial grid: translator of device i applied to device j's slices."""
    m = np.asarray(
        [[np.nan if v is None else v for v in row] for row in matrix], dtype=np.float64
    )
    n = m.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * n, 1.0 + 0.6 * n))
    im = ax.imshow(m, cmap="Reds", vmin=0, vmax=100)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xlabel("source device j")
    ax.set_ylabel("impersonated device i (translator used)")
    ax.set_title(f"impersonation success rate (chance {chance_pct:.0f}%)")
    for i in range(n):
        for j in range(n):
            if not np.isnan(m[i, j]):
                color = "white" if m[i, j] > 50 else "black"
                ax.text(j, i, f"{m[i, j]:.0f}", ha="center", va="center", color=color, fontsize=8)
    fig.colorbar(im, ax=ax, label="% classified as device i")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def training_curves(log_csv, path, title: str):
    """Loss / validation-accuracy curves from a training-log CSV."""
    log_csv = Path(log_csv)
    with open(log_csv) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    if "val_acc" in rows[0]:
        epochs = [int(r["epoch"]) for r in rows]
        ax1.plot(epochs, [float(r["loss"]) for r in rows], color="tab:blue", label="train loss")
        ax2 = ax1.twinx()
        ax2.plot(
            epochs, [float(r["val_acc"]) for r in rows], color="tab:orange", label="val accuracy"
        )
        ax2.set_ylabel("validation accuracy")
        ax2.set_ylim(0, 1)
        ax1.set_xlabel("epoch")
    else:
        steps = [int(r["step"]) for r in rows]
        ax1.plot(steps, [float(r["l_full"]) for r in rows], color="tab:blue", label="l_full")
        ax1.plot(steps, [float(r["l_cyc"]) for r in rows], color="tab:green", label="l_cyc")
        ax1.legend(loc="upper right")
        ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def _summary_rows(base: dict, translated: dict | None) -> list[list]:
    """Rows mirroring the published summary-table layout: one metric block per
    column, baseline / after-translation / improvement per row."""
    rows = [["model", "TTOD_pct", "RRP_pct"]]
    ttod_raw = base.get("ttod_pct")
    rrp_raw = base.get("rrp_pct")
    rows.append(["baseline", _fmt(ttod_raw), _fmt(rrp_raw)])
    if translated is not None:
        extra = translated.get("extra", {})
        ttod_new = extra.get("ttod_maxrule", translated.get("ttod_pct"))
        rrp_new = extra.get("rrp_maxrule", translated.get("rrp_pct"))
        rows.append(["translated+maxrule", _fmt(ttod_new), _fmt(rrp_new)])
        imp_ttod = (
            format_improvement(improvement(ttod_raw, ttod_new))
            if ttod_raw and ttod_new is not None
            else ""
        )
        imp_rrp = (
            format_improvement(improvement(rrp_raw, rrp_new))
            if rrp_raw and rrp_new is not None
            else ""
        )
        rows.append(["improvement", imp_ttod, imp_rrp])
    return rows


def _fmt(v) -> str:
    return "" if v is None else f"{v:.1f}"


def render_run_report(config: RunConfig) -> list[Path]:
    """Render every figure and the summary table for a finished run."""
    out = config.out_dir / "report"
    figures = out / "figures"
    metrics_dir = config.out_dir / "metrics"
    written: list[Path] = []

    base = json.loads((metrics_dir / "metrics_baseline.json").read_text())
    translated_path = metrics_dir / "metrics_translated.json"
    translated = json.loads(translated_path.read_text()) if translated_path.exists() else None
    adversarial_path = metrics_dir / "metrics_adversarial.json"
    adversarial = (
        json.loads(adversarial_path.read_text()) if adversarial_path.exists() else None
    )

    rows = _summary_rows(base, translated)
    out.mkdir(parents=True, exist_ok=True)
    summary_csv = out / "summary.csv"
    with open(summary_csv, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    written.append(summary_csv)

    widths = [max(len(str(r[c])) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)) for row in rows]
    if base.get("ttsd_pct") is not None:
        lines.insert(0, f"TTSD (same-domain test): {base['ttsd_pct']:.1f}%")
    summary_txt = out / "summary.txt"
    summary_txt.write_text("\n".join(lines) + "\n")
    written.append(summary_txt)
    print("\n".join(lines))

    if base.get("confusion") is not None:
        written.append(
            confusion_heatmap(base["confusion"], figures / "confusion_ttod_raw.png", "raw TTOD")
        )
    if base.get("extra", {}).get("ttsd_confusion") is not None:
        written.append(
            confusion_heatmap(
                base["extra"]["ttsd_confusion"], figures / "confusion_ttsd.png", "TTSD"
            )
        )
    if translated is not None:
        written.append(
            confusion_heatmap(
                translated["extra"]["confusion_translated"],
                figures / "confusion_ttod_translated.png",
                "translated TTOD",
            )
        )
        written.append(
            confusion_heatmap(
                translated["confusion"], figures / "confusion_maxrule.png", "max-rule decisions"
            )
        )
    if adversarial is not None:
        written.append(
            impersonation_heatmap(
                adversarial["extra"]["impersonation_matrix"],
                figures / "impersonation.png",
                adversarial["extra"]["chance_pct"],
            )
        )

    log = config.out_dir / "baseline" / "baseline_training_log.csv"
    if log.exists():
        p = training_curves(log, figures / "baseline_training.png", "baseline training")
        if p:
            written.append(p)
    for loss_csv in sorted((config.out_dir / "reveal").glob("reveal_dev*_losses.csv")):
        name = loss_csv.stem.replace("_losses", "")
        p = training_curves(loss_csv, figures / f"{name}_losses.png", f"{name} translator losses")
        if p:
            written.append(p)
    return written
