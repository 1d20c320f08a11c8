"""Report figures, rendered straight to image files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _moving_average(y: np.ndarray, width: int) -> np.ndarray:
    if y.size < width:
        return y
    kernel = np.ones(width) / width
    return np.convolve(y, kernel, mode="valid")


def loss_curve(history: Sequence, path: str | Path, smooth: int = 20) -> Path:
    """Log-scale training loss per step; ``history`` holds ``(step, StepLoss)`` pairs."""
    path = Path(path)
    steps = np.array([s for s, _ in history])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for field, color in (("l_mag", "tab:blue"), ("l_ri", "tab:orange"), ("l_total", "black")):
            y = np.array([getattr(l, field) for _, l in history])
            ax.plot(steps, y, color=color, lw=0.6, alpha=0.35)
            avg = _moving_average(y, smooth)
            ax.plot(steps[steps.size - avg.size :], avg, color=color, lw=1.4, label=field)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def metrics_figure(report, path: str | Path, baseline=None) -> Path:
    """Per-clip STOI, SSNR and SI-SDR bars; ``baseline`` overlays unprocessed scores."""
    path = Path(path)
    rows = report.records
    labels = [r.clip for r in rows]
    x = np.arange(len(rows))
    panels = (("stoi", "STOI"), ("ssnr", "SSNR (dB)"), ("si_sdr", "SI-SDR (dB)"))
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.4))
        for ax, (field, title) in zip(axes, panels):
            width = 0.4 if baseline is not None else 0.8
            vals = [getattr(r, field) for r in rows]
            ax.bar(x, vals, width, color="tab:blue", label="enhanced")
            if baseline is not None:
                base = [getattr(r, field) for r in baseline.records]
                ax.bar(x - width, base, width, color="tab:gray", label="noisy", align="edge")
            ax.axhline(report.means()[field], color="black", lw=0.8, ls="--")
            ax.set_title(title)
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        if baseline is not None:
            axes[0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
