"""Figure output: binary PGM images and matplotlib summary plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402

__all__ = [
    "to_gray",
    "write_pgm",
    "read_pgm",
    "plot_loss_curve",
    "plot_metric_bars",
    "plot_reconstruction",
]

# fixed metadata keeps PNG bytes stable between runs
_PNG_META = {"Software": None}


def to_gray(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Scale non-negative values to uint8 with ``vmax`` mapped to 255."""
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if vmax is None else float(vmax)
    if top <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.clip(np.rint(values / top * 255.0), 0, 255).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path: str | Path) -> None:
    """Binary P5 graymap, maxval 255, row-major."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def _style(ax) -> None:
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=8)


def plot_loss_curve(losses, path: str | Path, smooth: int = 10) -> None:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, losses.size + 1), losses, color="0.7", lw=0.8, label="step")
    if losses.size >= smooth > 1:
        kernel = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth, losses.size + 1), np.convolve(losses, kernel, "valid"),
                color="C0", lw=1.5, label=f"mean of {smooth}")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_metric_bars(rows: dict[str, MetricReport], path: str | Path, title: str = "") -> None:
    """PSNR and SSIM side by side, one bar per row with a PSNR std whisker."""
    names = list(rows)
    x = np.arange(len(names))
    psnrs = [rows[n].psnr_db for n in names]
    stds = [rows[n].psnr_std for n in names]
    ssims = [rows[n].mean_ssim for n in names]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(max(6, 1.1 * len(names) + 3), 3.4))
    a1.bar(x, psnrs, yerr=stds, color="C0", capsize=2)
    a1.set_ylabel("PSNR (dB)")
    a2.bar(x, ssims, color="C1")
    a2.set_ylabel("SSIM")
    finite = [p for p in psnrs if np.isfinite(p)]
    if finite:
        a1.set_ylim(min(finite) - 2, max(finite) + 2)
    if ssims:
        a2.set_ylim(max(0.0, min(ssims) - 0.05), min(1.0, max(ssims) + 0.02))
    for ax in (a1, a2):
        ax.set_xticks(x, names, rotation=35, ha="right", fontsize=7)
        _style(ax)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_reconstruction(images: dict[str, np.ndarray], gt: np.ndarray, path: str | Path) -> None:
    """Top row: magnitudes; bottom row: absolute error against ``gt``."""
    names = list(images)
    vmax = float(np.max(gt)) or 1.0
    emax = max(float(np.max(np.abs(images[n] - gt))) for n in names) or 1.0
    fig, axes = plt.subplots(2, len(names) + 1, figsize=(2.2 * (len(names) + 1), 4.4), squeeze=False)
    axes[0, 0].imshow(gt, cmap="gray", vmin=0, vmax=vmax)
    axes[0, 0].set_title("ground truth", fontsize=8)
    axes[1, 0].axis("off")
    for j, name in enumerate(names, start=1):
        axes[0, j].imshow(images[name], cmap="gray", vmin=0, vmax=vmax)
        axes[0, j].set_title(name, fontsize=8)
        axes[1, j].imshow(np.abs(images[name] - gt), cmap="magma", vmin=0, vmax=emax)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
