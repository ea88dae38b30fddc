"""
Visualization Module.

Training-loss curves, metric-vs-patch-grid sweeps and parameter breakdowns
rendered to PNG.
"""

import csv
from pathlib import Path

import numpy as np
import matplotlib
matplotlib.use("Agg")  # Non-interactive backend
import matplotlib.pyplot as plt

from .ablation import AblationRow


# Colour per encoder variant (colorblind-friendly)
VARIANT_COLORS = {
    "baseline": "#0072B2",
    "resmlp": "#D55E00",
}

DEFAULT_COLOR = "#888888"


def _get_color(variant: str) -> str:
    return VARIANT_COLORS.get(variant, DEFAULT_COLOR)


def _read_log(log_path: str | Path) -> tuple[list[int], list[float]]:
    epochs, losses = [], []
    with open(log_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            epochs.append(int(row["epoch"]))
            losses.append(float(row["loss"]))
    return epochs, losses


def generate_loss_curve(
    log_paths: dict[str, str | Path],
    output_path: str = "results/reports/training_loss.png",
) -> str:
    """
    Plot per-epoch training loss for one or more runs.

    Args:
        log_paths: {run label: path to train_log.csv}
        output_path: Path to save the chart

    Returns:
        Path to the saved chart
    """
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(9, 5))
    for label, path in log_paths.items():
        epochs, losses = _read_log(path)
        variant = label.split("_")[0]
        ax.plot(epochs, losses, marker="o", markersize=3, linewidth=1.5, label=label, color=_get_color(variant))

    ax.set_xlabel("Epoch", size=12)
    ax.set_ylabel("Cross-entropy loss", size=12)
    ax.set_title("Training Loss", size=14, fontweight="bold")
    ax.grid(alpha=0.3)
    if len(log_paths) > 1:
        ax.legend(fontsize=9)

    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close()

    return output_path


def generate_patch_sweep(
    rows: list[AblationRow],
    metric: str,
    output_path: str = "results/reports/patch_sweep.png",
) -> str:
    """
    Plot ``metric`` against the number of visual tokens, one line per
    (variant, temporal) regime.

    Returns:
        Path to the saved chart
    """
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)

    regimes: dict[tuple[str, bool], list[AblationRow]] = {}
    for row in rows:
        regimes.setdefault((row.variant, row.temporal), []).append(row)

    fig, ax = plt.subplots(figsize=(9, 5))
    for (variant, temporal), cells in sorted(regimes.items()):
        cells = sorted(cells, key=lambda r: r.patches)
        x = [r.visual_tokens for r in cells]
        y = [r.metrics.get(metric, np.nan) for r in cells]
        label = f"{variant}{' (temporal)' if temporal else ''}"
        ax.plot(
            x, y, marker="o", linewidth=2, label=label,
            color=_get_color(variant), linestyle="--" if temporal else "-",
        )

    ax.set_xlabel("Visual tokens (n²)", size=12)
    ax.set_ylabel(metric.replace("_", "-").upper() if metric.startswith("bleu") else metric.title(), size=12)
    ax.set_title(f"{metric.replace('_', ' ').title()} vs Patch Grid", size=14, fontweight="bold")
    ax.set_xticks(sorted({r.visual_tokens for r in rows}))
    ax.legend(fontsize=10)
    ax.grid(alpha=0.3)

    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close()

    return output_path


def generate_parameter_chart(
    tables: dict[str, dict[str, int]],
    output_path: str = "results/reports/parameters.png",
) -> str:
    """
    Grouped bar chart of per-submodule parameter counts.

    Args:
        tables: {variant: parameter table as produced by ``parameter_table``}
        output_path: Path to save the chart
    """
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)

    groups = sorted({g for t in tables.values() for g in t if g != "total"})
    n_variants = len(tables)
    x = np.arange(len(groups))
    width = 0.8 / max(1, n_variants)

    fig, ax = plt.subplots(figsize=(max(10, len(groups) * 0.9), 6))
    for i, (variant, table) in enumerate(tables.items()):
        values = [table.get(g, 0) / 1e6 for g in groups]
        offset = (i - n_variants / 2 + 0.5) * width
        ax.bar(x + offset, values, width, label=f"{variant} ({table['total'] / 1e6:.2f}M)",
               color=_get_color(variant), alpha=0.85)

    ax.set_ylabel("Parameters (millions)", size=12)
    ax.set_title("Encoder Parameters by Submodule", size=14, fontweight="bold")
    ax.set_xticks(x)
    ax.set_xticklabels(groups, rotation=45, ha="right", size=9)
    ax.legend(fontsize=10)
    ax.grid(axis="y", alpha=0.3)

    plt.tight_layout()
    plt.savefig(output_path, dpi=150, bbox_inches="tight")
    plt.close()

    return output_path


def generate_ablation_charts(
    rows: list[AblationRow],
    metric: str,
    output_dir: str = "results/reports",
) -> list[str]:
    """Patch sweep plus the loss curve of every cell."""
    paths = [generate_patch_sweep(rows, metric, f"{output_dir}/patch_sweep_{metric}.png")]
    logs = {}
    for row in rows:
        log = Path(row.checkpoint).parent / "train_log.csv"
        if log.exists():
            logs[f"{row.variant}_n{row.patches}{'_t3' if row.temporal else ''}"] = log
    if logs:
        paths.append(generate_loss_curve(logs, f"{output_dir}/training_loss.png"))
    return paths
