"""Training-curve plots (requires ``diffscene[viz]``)."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import pandas as pd

from diffscene.core.errors import ConfigurationError, require_extra
from diffscene.core.logging import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def plot_training_log(log_path: PathLike, out: PathLike, *, title: str | None = None) -> Path:
    """Plot loss (and learning rate on a twin axis) per stage from a JSON-lines training log."""
    log_path = Path(log_path)
    if not log_path.exists():
        raise ConfigurationError(f"Training log not found: {log_path}")
    frame = pd.read_json(log_path, lines=True)
    if frame.empty:
        raise ConfigurationError(f"Training log is empty: {log_path}")

    matplotlib = require_extra("matplotlib", "viz")
    matplotlib.use("Agg")
    plt = require_extra("matplotlib.pyplot", "viz")

    fig, ax = plt.subplots(1, 1, figsize=(8, 5))
    lr_ax = ax.twinx()
    for stage, group in frame.groupby("stage", sort=False):
        ax.plot(group["step"], group["loss"], label=f"{stage} loss")
        lr_ax.plot(group["step"], group["lr"], linestyle="--", alpha=0.5, label=f"{stage} lr")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    lr_ax.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    ax.set_title(title or log_path.stem)

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info("Plot saved -> %s", out)
    return out
