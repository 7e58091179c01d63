"""Matplotlib renderings of reports, written straight to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .density import DensityMap  # noqa: E402
from .evaluation import CrossDomainReport, EvalReport, SweepPoint  # noqa: E402
from .training import LossReport  # noqa: E402


def plot_loss_curve(reports: list[LossReport], path) -> Path:
    """Training loss (log scale) with validation MAE where present."""
    path = Path(path)
    iterations = [r.iteration for r in reports]
    losses = [r.loss for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(iterations, losses, color="tab:blue", lw=1.2, label="training loss")
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    val_pts = [(r.iteration, r.val_mae) for r in reports if r.val_mae is not None]
    if val_pts:
        ax2 = ax.twinx()
        ax2.plot(
            [p[0] for p in val_pts],
            [p[1] for p in val_pts],
            color="tab:orange",
            lw=1.2,
            label="validation MAE",
        )
        ax2.set_ylabel("validation MAE")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
    else:
        ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_eval_scatter(report: EvalReport, path) -> Path:
    """True vs estimated counts with the identity line."""
    path = Path(path)
    truth = [r.true_count for r in report.rows]
    estimated = [r.estimated for r in report.rows]
    fig, ax = plt.subplots(figsize=(5.2, 5))
    ax.scatter(truth, estimated, s=18, alpha=0.7, color="tab:blue")
    lim = max([1.0] + truth + estimated) * 1.05
    ax.plot([0, lim], [0, lim], color="grey", lw=1, ls="--")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("true count")
    ax.set_ylabel("estimated count")
    ax.set_title(f"MAE {report.mae:.2f}, MSE {report.mse:.2f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_cross_domain(cross: CrossDomainReport, path) -> Path:
    """In-domain baseline vs cross-domain MAE/MSE bars."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = ["MAE", "MSE"]
    baseline = [cross.baseline_mae, cross.baseline_mse]
    observed = [cross.mae, cross.mse]
    xs = np.arange(2)
    ax.bar(xs - 0.18, baseline, width=0.36, label=f"{cross.target_domain} (in-domain)")
    ax.bar(xs + 0.18, observed, width=0.36, label=f"{cross.source_domain} (cross)")
    for x, value, pct in zip(
        xs + 0.18, observed, [cross.pct_increase_mae, cross.pct_increase_mse]
    ):
        ax.annotate(
            f"{pct:+.1f}%", (x, value), ha="center", va="bottom", fontsize=9
        )
    ax.set_xticks(xs)
    ax.set_xticklabels(labels)
    ax.set_ylabel("count error")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_tradeoff(points: list[SweepPoint], path) -> Path:
    """Accuracy and latency against the inference scale factor."""
    path = Path(path)
    scales = [p.scale for p in points]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(scales, [p.mae for p in points], "o-", color="tab:blue", label="MAE")
    ax.set_xlabel("inference scale")
    ax.set_ylabel("MAE")
    ax.invert_xaxis()
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(
        scales,
        [p.mean_latency_ms for p in points],
        "s--",
        color="tab:red",
        label="mean latency",
    )
    ax2.set_ylabel("mean latency (ms)")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_density_heatmap(density: DensityMap, path, title: str | None = None) -> Path:
    """Density map as a colormapped image with its count in the title."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.6, 5))
    im = ax.imshow(density.values, cmap="jet", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title or f"count {density.count():.1f}")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
