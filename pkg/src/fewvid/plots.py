"""Static plot rendering from logged metrics and diagnostic dumps.

Read-only over a run directory: curves come from metrics.jsonl, panels from
the per-episode .npz diagnostics written by `eval --dump-diagnostics`.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _load_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_training_curves(run_dir, out_dir) -> list[Path]:
    """Accuracy and loss-component curves from the metrics log."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    records = [r for r in _load_metrics(run_dir) if "loss_total" in r]
    if not records:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    step = np.arange(len(records))
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(step, [r["accuracy"] for r in records], lw=0.8, alpha=0.4, label="episode")
    window = max(1, len(records) // 40)
    smooth = np.convolve([r["accuracy"] for r in records],
                         np.ones(window) / window, mode="valid")
    ax.plot(step[: len(smooth)], smooth, lw=1.8, label=f"moving avg ({window})")
    ax.set_xlabel("episode")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "accuracy.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("loss_total", "loss_cls", "loss_intra", "loss_inter"):
        ax.plot(step, [r[key] for r in records], lw=0.9, label=key)
    ax.set_xlabel("episode")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "losses.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    return written


def plot_sampler_panels(run_dir, out_dir, max_episodes: int = 3) -> list[Path]:
    """Selected-frame strips with their saliency maps, one panel per episode."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    dumps = sorted((run_dir / "diagnostics").glob("episode_*.npz"))[:max_episodes]
    written = []
    for dump in dumps:
        with np.load(dump) as z:
            if "frames" not in z:
                continue
            frames = z["frames"]  # [B, T, C, H, W]
            saliency = z.get("saliency")  # [B, T, H, W]
        out_dir.mkdir(parents=True, exist_ok=True)
        t = frames.shape[1]
        rows = 2 if saliency is not None else 1
        fig, axes = plt.subplots(rows, t, figsize=(1.4 * t, 1.5 * rows), squeeze=False)
        for j in range(t):
            axes[0][j].imshow(np.clip(frames[0, j].transpose(1, 2, 0), 0, 1))
            axes[0][j].set_axis_off()
            if saliency is not None:
                axes[1][j].imshow(saliency[0, j], cmap="magma")
                axes[1][j].set_axis_off()
        fig.suptitle(dump.stem)
        fig.tight_layout()
        path = out_dir / f"{dump.stem}_sampler.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def plot_alignment_diagnostics(run_dir, out_dir) -> list[Path]:
    """Histogram of alignment costs and offsets across dumped episodes."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    costs, offsets = [], []
    for dump in sorted((run_dir / "diagnostics").glob("episode_*.npz")):
        with np.load(dump) as z:
            if "align_costs" in z:
                costs.extend(z["align_costs"].ravel().tolist())
            if "offsets" in z:
                offsets.append(z["offsets"].reshape(-1, 2))
    if not costs:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2 if offsets else 1, figsize=(9, 3.5), squeeze=False)
    axes[0][0].hist(costs, bins=30)
    axes[0][0].set_xlabel("alignment cost")
    axes[0][0].set_ylabel("pairs")
    if offsets:
        o = np.concatenate(offsets)
        axes[0][1].scatter(o[:, 0], o[:, 1], s=4, alpha=0.4)
        axes[0][1].set_xlim(-1, 1)
        axes[0][1].set_ylim(-1, 1)
        axes[0][1].set_xlabel("offset x")
        axes[0][1].set_ylabel("offset y")
    fig.tight_layout()
    path = out_dir / "alignment.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return [path]


def render_all(run_dir, out_dir) -> list[Path]:
    written = plot_training_curves(run_dir, out_dir)
    written += plot_sampler_panels(run_dir, out_dir)
    written += plot_alignment_diagnostics(run_dir, out_dir)
    return written
