"""Matplotlib figure emitters for loss curves and ground-plane trajectories.

All figures go to SVG with a fixed hash salt and no embedded date so the
output bytes depend only on the plotted data.  Polylines carry stable ``id``
attributes (via gid) so downstream checks can locate them in the markup.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .geometry import PoseSE3  # noqa: E402

__all__ = ["save_loss_curves", "save_trajectory_plot"]

_RC = {
    "svg.hashsalt": "rcnnvo",
    "svg.fonttype": "path",
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def save_loss_curves(epochs: Sequence[int], train_losses: Sequence[float],
                     val_losses: Sequence[float], path) -> None:
    """Two-curve training/validation loss plot; the gap between the curves is
    the overfitting diagnostic."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        (line_tr,) = ax.plot(epochs, train_losses, label="training", color="tab:blue")
        line_tr.set_gid("train-loss")
        (line_va,) = ax.plot(epochs, val_losses, label="validation", color="tab:orange")
        line_va.set_gid("val-loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def save_trajectory_plot(labeled: Sequence[tuple[str, Sequence[PoseSE3]]], path) -> None:
    """Ground-plane (x-z) paths with a legend, one polyline per trajectory."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, poses in labeled:
            xs = [p.t[0] for p in poses]
            zs = [p.t[2] for p in poses]
            (line,) = ax.plot(xs, zs, label=label)
            line.set_gid(f"trajectory-{label}")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
