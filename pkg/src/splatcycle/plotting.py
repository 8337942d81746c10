"""Matplotlib figures written next to the key=value and CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

# fixed metadata keeps the PNG bytes independent of the matplotlib build
_META = {"Software": None}


def _hwc(img: torch.Tensor) -> np.ndarray:
    img = img.detach().cpu().double().clamp(0, 1)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.permute(1, 2, 0)
    return img.numpy()


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def image_grid(rows: Sequence[tuple[str, torch.Tensor]], path, col_labels: Sequence[str] | None = None) -> Path:
    """One labelled row per ``(label, (V, 3, H, W))`` entry."""
    n_rows = len(rows)
    n_cols = max(r[1].shape[0] for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.4 * n_cols, 1.4 * n_rows + 0.3), squeeze=False)
    for r, (label, views) in enumerate(rows):
        for c in range(n_cols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < views.shape[0]:
                ax.imshow(_hwc(views[c]), interpolation="nearest")
            else:
                ax.axis("off")
            if c == 0:
                ax.set_ylabel(label, fontsize=7)
            if r == 0 and col_labels is not None and c < len(col_labels):
                ax.set_title(col_labels[c], fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def step_strip(trajectory: list[dict], path, max_rows: int = 8) -> Path:
    """Clean estimates and their re-renders at a spread of recorded steps."""
    if not trajectory:
        raise ValueError("empty trajectory")
    picks = np.unique(np.linspace(0, len(trajectory) - 1, min(max_rows, len(trajectory))).round().astype(int))
    rows = []
    for i in picks:
        step = trajectory[int(i)]
        rows.append((f"t={step['t']} x0", (step["x0_hat"] + 1) / 2))
        rows.append((f"t={step['t']} render", (step["x0_rendered"] + 1) / 2))
    return image_grid(rows, path)


def metric_bars(report, path) -> Path:
    """Per-view PSNR and SSIM bars for an :class:`EvalReport`."""
    views = np.arange(len(report.psnr))
    fig, (a, b) = plt.subplots(2, 1, figsize=(max(4, 0.25 * len(views) + 2), 4), sharex=True)
    a.bar(views, report.psnr, color="tab:blue")
    a.set_ylabel("PSNR (dB)")
    a.axhline(report.mean_psnr, color="k", lw=0.8, ls="--")
    b.bar(views, report.ssim, color="tab:green")
    b.set_ylabel("SSIM")
    b.set_xlabel("held-out view")
    fig.tight_layout()
    return _save(fig, path)


def loss_curve(steps: Sequence[int], series: dict[str, Sequence[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, values in series.items():
        ax.plot(steps, values, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def paired_scatter(baseline: Sequence[float], treated: Sequence[float], path, label="held-out PSNR (dB)") -> Path:
    """Per-seed pairs; points above the diagonal favor ``treated``."""
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.scatter(baseline, treated, s=12)
    lo = min(min(baseline), min(treated))
    hi = max(max(baseline), max(treated))
    ax.plot([lo, hi], [lo, hi], color="k", lw=0.8)
    ax.set_xlabel(f"single pass, {label}", fontsize=7)
    ax.set_ylabel(f"cycle, {label}", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
