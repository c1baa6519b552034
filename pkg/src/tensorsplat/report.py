"""Rendered training/evaluation reports: figures saved next to the CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import write_eval_csv, write_metrics_csv
from .train import Metrics, TrainHistory


def save_training_report(history: TrainHistory, out_dir) -> list[Path]:
    """Write metrics.csv plus loss/PSNR curve figures; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv"]
    write_metrics_csv(paths[0], history)

    if len(history.iteration) == 0:
        return paths

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(history.iteration, history.loss_total, label="total", lw=1.2)
    ax.semilogy(history.iteration, history.loss_l1, label="l1", lw=0.8, alpha=0.8)
    ax.semilogy(history.iteration, history.loss_mask, label="mask", lw=0.8, alpha=0.8)
    ax.semilogy(history.iteration, np.maximum(history.loss_isopos, 1e-12), label="isopos", lw=0.8, alpha=0.8)
    ax.semilogy(history.iteration, np.maximum(history.loss_isocov, 1e-12), label="isocov", lw=0.8, alpha=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    loss_path = out / "loss_curves.png"
    fig.savefig(loss_path, dpi=110)
    plt.close(fig)
    paths.append(loss_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(history.iteration, history.psnr, lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("current-frame PSNR")
    fig.tight_layout()
    psnr_path = out / "psnr.png"
    fig.savefig(psnr_path, dpi=110)
    plt.close(fig)
    paths.append(psnr_path)
    return paths


def save_eval_report(metrics: Metrics, split: str, out_dir) -> list[Path]:
    """Write eval CSV plus a per-frame PSNR figure grouped by identity."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"eval_{split}.csv"
    write_eval_csv(csv_path, metrics, split)
    paths = [csv_path]

    if not metrics.frames:
        return paths
    fig, ax = plt.subplots(figsize=(7, 4))
    for ident in sorted(metrics.per_identity):
        xs = [fm.frame for fm in metrics.frames if fm.identity == ident]
        ys = [fm.psnr for fm in metrics.frames if fm.identity == ident]
        ax.plot(xs, ys, marker="o", ms=3, lw=0.8, label=f"identity {ident}")
    ax.axhline(metrics.mean_psnr, color="k", lw=0.8, ls="--", label="mean")
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"{split} split")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig_path = out / f"eval_{split}_psnr.png"
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)
    paths.append(fig_path)
    return paths
