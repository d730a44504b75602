"""Optional PNG figures for the CLI's ``--plots`` flag (matplotlib, Agg backend)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Mapping, Sequence


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=100, metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def plot_losses(path, curves: Mapping[str, Sequence[float]], title: str = "") -> None:
    """One line per named per-epoch series."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in curves.items():
        ax.plot(range(len(values)), values, marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def _bars(path, items: Sequence[tuple[str, float]], ylabel: str) -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(items) + 2), 4))
    ax.bar(range(len(items)), [v for _, v in items])
    ax.set_xticks(range(len(items)))
    ax.set_xticklabels([k for k, _ in items], rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_subsets(path, items: Sequence[tuple[str, float]]) -> None:
    """mIoU per evaluated modality subset."""
    _bars(path, items, "mIoU")


def plot_flops(path, items: Sequence[tuple[str, float]]) -> None:
    """Forward FLOPs per fusion strategy."""
    _bars(path, items, "FLOPs")
