"""Matplotlib figures written next to the numeric outputs."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# keeps PNG bytes independent of the matplotlib version string
_PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_PNG_METADATA, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_detection_maps(maps: Sequence[tuple[str, np.ndarray]], legend: Mapping[str, tuple[int, int, int]],
                        path: str | Path) -> Path:
    """Panel of four-colour outcome maps, one per scene, with a shared legend."""
    n = max(len(maps), 1)
    ncols = min(n, 2)
    nrows = int(np.ceil(n / ncols))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.6 * ncols, 2.9 * nrows), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, (name, img) in zip(axes.ravel(), maps):
            ax.imshow(img, interpolation="nearest")
            ax.set_title(name)
        handles = [
            matplotlib.patches.Patch(color=np.asarray(rgb) / 255.0, label=label)
            for label, rgb in legend.items()
        ]
        fig.legend(handles=handles, loc="lower center", ncol=len(handles), frameon=False)
        fig.tight_layout(rect=(0, 0.06, 1, 1))
        return _save(fig, path)


def plot_roc(curves: Mapping[str, tuple[np.ndarray, np.ndarray, float | None]], path: str | Path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        for name, (fpr, tpr, auc) in curves.items():
            label = name if auc is None else f"{name} (AUC {auc:.3f})"
            ax.step(fpr, tpr, where="post", lw=1.2, label=label)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false-positive rate")
        ax.set_ylabel("true-positive rate")
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_mean_spectra(wavelengths: np.ndarray, spectra: Mapping[str, np.ndarray], path: str | Path) -> Path:
    """Mean reflectance per class against wavelength."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for name, s in spectra.items():
            ax.plot(wavelengths, s, lw=1.2, marker=".", ms=3, label=name)
        ax.set_xlabel("wavelength (nm)")
        ax.set_ylabel("reflectance")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_latency(samples_ms: Sequence[float], budget_ms: float, path: str | Path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.4))
        ax.plot(np.arange(1, len(samples_ms) + 1), samples_ms, marker="o", lw=1)
        ax.axhline(float(np.median(samples_ms)), color="C1", lw=1, label="median")
        ax.axhline(budget_ms, color="C3", ls="--", lw=1, label=f"budget {budget_ms:.0f} ms")
        ax.set_xlabel("repetition")
        ax.set_ylabel("full-cube inference (ms)")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
