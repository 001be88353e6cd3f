"""Figure and image writers for the CLI reports.

Figures are written as SVG with a fixed hash salt and no date metadata so that
identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "sparsedit",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def plot_loss(steps: Sequence[int], losses: Sequence[float], path: str | Path, window: int = 20) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, losses, lw=0.8, alpha=0.5, label="loss")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, lw=1.5, label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("MSE")
        ax.legend()
        return _save(fig, path)


def plot_flops(per_timestep: dict[int, int], path: str | Path, dense_reference: float | None = None,
               convention: str = "") -> Path:
    ts = sorted(per_timestep)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.step(ts, [per_timestep[t] / 1e9 for t in ts], where="post", label="per timestep")
        if dense_reference is not None:
            ax.axhline(dense_reference / 1e9, color="0.4", ls="--", lw=1, label="dense")
        ax.set_xlabel("timestep t")
        ax.set_ylabel(f"GFLOPs ({convention})" if convention else "GFLOPs")
        ax.legend()
        return _save(fig, path)


def plot_variance_profile(layers: Sequence[str], timesteps: Sequence[int], normalized: np.ndarray,
                          path: str | Path) -> Path:
    """One line per timestep across layers."""
    x = np.arange(len(layers))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5, 0.25 * len(layers)), 3))
        colors = plt.cm.viridis(np.linspace(0, 1, max(len(timesteps), 2)))
        for j, t in enumerate(timesteps):
            ax.plot(x, normalized[:, j], marker="o", ms=2.5, lw=1, color=colors[j], label=f"t={t}")
        ax.set_xticks(x)
        ax.set_xticklabels([name.split(".", 1)[1] for name in layers], rotation=90, fontsize=6)
        ax.set_ylabel("normalized attention variance")
        ax.set_ylim(-0.02, 1.05)
        ax.legend(fontsize=6, ncol=2)
        return _save(fig, path)


def plot_ablation(layers: Sequence[str], layer_mse: Sequence[float], k: int, path: str | Path) -> Path:
    x = np.arange(len(layers))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5, 0.25 * len(layers)), 3))
        ax.bar(x, layer_mse, color=["C3" if i < k else "C0" for i in x])
        ax.set_xticks(x)
        ax.set_xticklabels([name.split(".", 1)[1] for name in layers], rotation=90, fontsize=6)
        ax.set_ylabel("block output MSE")
        ax.set_title(f"first {k} attention maps uniform", fontsize=9)
        return _save(fig, path)


def write_pgm(img: np.ndarray, path: str | Path, lo: float = -1.0, hi: float = 1.0) -> Path:
    """8-bit binary PGM of an ``(H, W)`` or ``(H, W, C)`` image (channels averaged)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    pixels = np.clip(np.round((img - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode() + pixels.tobytes())
    return path
