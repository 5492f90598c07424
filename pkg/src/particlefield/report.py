"""Training-report figures, written next to the metrics CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import WriteError


def _save(fig, path):
    try:
        fig.savefig(path, dpi=110, bbox_inches="tight")
    except OSError as exc:
        raise WriteError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def save_loss_figure(losses, path) -> None:
    """Training loss against the global step, frame boundaries implicit."""
    rows = np.asarray([(s, l) for _, s, l in losses], np.float64).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    if len(rows):
        ax.plot(rows[:, 0], rows[:, 1], lw=0.9, color="tab:blue")
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("photometric loss")
    ax.grid(alpha=0.3)
    _save(fig, path)


def save_eval_figure(evals, path) -> None:
    """Median PSNR and SSIM over held-out views, per frame."""
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    if evals:
        rows = np.asarray([(f, p, s) for f, _, p, s in evals], np.float64)
        frames = np.unique(rows[:, 0])
        med = np.array(
            [np.median(rows[rows[:, 0] == f, 1:], axis=0) for f in frames]
        )
        axes[0].plot(frames, med[:, 0], "o-", ms=3, color="tab:blue")
        axes[1].plot(frames, med[:, 1], "o-", ms=3, color="tab:orange")
    for ax, label in zip(axes, ("PSNR (dB)", "SSIM")):
        ax.set_xlabel("frame")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_view_figure(rows, path) -> None:
    """Per-view PSNR bars for a single evaluated frame; rows (view, psnr, ssim)."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    if rows:
        views = [r[0] for r in rows]
        ax.bar(views, [r[1] for r in rows], color="tab:blue", width=0.7)
        ax.set_xticks(views)
    ax.set_xlabel("view")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)


def write_report(log, out_dir) -> list:
    """Render all applicable figures for a finished run; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "loss.png"]
    save_loss_figure(log.losses, paths[0])
    if log.evals:
        paths.append(out / "eval.png")
        save_eval_figure(log.evals, paths[-1])
    return paths
