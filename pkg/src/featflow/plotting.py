"""Figures written next to CSV/JSON outputs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from featflow.bench import BenchmarkRecord, fit_power_law  # noqa: E402
from featflow.errors import FitError  # noqa: E402


def runtime_figure(records: Sequence[BenchmarkRecord], path) -> Path:
    """Wall time against chain length per mode, log-log, with power-law fits where possible."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for mode in sorted({r.mode for r in records}):
        rows = sorted((r for r in records if r.mode == mode), key=lambda r: r.chain_length)
        lengths = np.array([r.chain_length for r in rows], dtype=float)
        times = np.array([r.wall_time for r in rows])
        (line,) = ax.plot(lengths, times, "o", label=mode)
        try:
            fit = fit_power_law(rows)
        except FitError:
            continue
        grid = np.geomspace(lengths.min(), lengths.max(), 50)
        ax.plot(grid, fit.predict(grid), "-", color=line.get_color(),
                label=f"{mode} fit: L^{fit.exponent:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("chain length (residues)")
    ax.set_ylabel("wall time (s)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def rmsf_figure(profiles: Mapping[str, Sequence[float]], path, title: str = "") -> Path:
    """Per-residue RMSF profiles (one line per label)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3))
    for label, prof in profiles.items():
        prof = np.asarray(prof, dtype=float)
        ax.plot(np.arange(1, len(prof) + 1), prof, label=label)
    ax.set_xlabel("residue")
    ax.set_ylabel("RMSF (Å)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def dccm_figure(maps: Mapping[str, np.ndarray], path) -> Path:
    """Side-by-side DCCM heatmaps on a shared [-1, 1] colour scale."""
    path = Path(path)
    k = len(maps)
    fig, axes = plt.subplots(1, k, figsize=(3.6 * k, 3.2), squeeze=False)
    im = None
    for ax, (label, m) in zip(axes[0], maps.items()):
        im = ax.imshow(np.asarray(m), vmin=-1.0, vmax=1.0, cmap="RdBu_r", origin="lower")
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("residue")
    axes[0][0].set_ylabel("residue")
    if im is not None:
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
