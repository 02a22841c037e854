"""Report figures rendered alongside the machine-readable metric files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(metrics: list[dict], path) -> None:
    """Two-panel figure: training loss and held-out PSNR against step."""
    loss_pts = [(m["step"], m["loss"]) for m in metrics if "loss" in m]
    psnr_pts = [(m["step"], m["psnr"]) for m in metrics if "psnr" in m]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    if loss_pts:
        s, v = zip(*loss_pts)
        axes[0].plot(s, v, lw=1)
        axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("training loss")
    if psnr_pts:
        s, v = zip(*psnr_pts)
        axes[1].plot(s, v, marker="o", ms=3, lw=1)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("test PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_report(rows: list[dict], out_dir) -> None:
    """Per-view CSV plus a PSNR bar chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_per_view.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["view", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows)
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(rows)), 3))
    ax.bar([r["view"] for r in rows], [r["psnr"] for r in rows])
    ax.set_xlabel("test view")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out / "eval_psnr.png", dpi=120)
    plt.close(fig)
