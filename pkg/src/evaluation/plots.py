"""
Report figures
"""

from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.utils.error_handling import ErrorHandler, safe_execute  # noqa: E402
from src.utils.logging_config import get_logger  # noqa: E402

logger = get_logger(__name__)

PathLike = Union[str, Path]


@safe_execute("plot_spectrum", logger, ErrorHandler(logger))
def plot_spectrum(singular_values: Sequence[float], explained_variance_ratio: Sequence[float], path: PathLike) -> Path:
    """Singular values and cumulative explained variance of a shape space"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = np.arange(1, len(singular_values) + 1)

    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    axes[0].semilogy(k, np.maximum(np.asarray(singular_values, dtype=float), 1e-16), marker="o")
    axes[0].set_xlabel("Component")
    axes[0].set_ylabel("Singular value")
    axes[0].set_title("Shape space spectrum")
    axes[0].grid(True, alpha=0.3)

    axes[1].plot(k, np.cumsum(explained_variance_ratio), marker="o")
    axes[1].set_xlabel("Components")
    axes[1].set_ylabel("Cumulative explained variance")
    axes[1].set_ylim(0.0, 1.05)
    axes[1].grid(True, alpha=0.3)

    plt.tight_layout()
    plt.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Spectrum plot saved to {path}")
    return path


@safe_execute("plot_overlap", logger, ErrorHandler(logger))
def plot_overlap(table: pd.DataFrame, path: PathLike) -> Path:
    """Per-frame silhouette overlap, one line per view plus the frame mean"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(10, 5))
    if len(table):
        per_view = table.pivot(index="frame", columns="view", values="overlap")
        for view in per_view.columns:
            ax.plot(per_view.index, per_view[view], alpha=0.4, label=f"view {view}")
        ax.plot(per_view.index, per_view.mean(axis=1), color="black", linewidth=2, label="mean")
        ax.legend(loc="lower right", fontsize="small")
    ax.set_xlabel("Frame")
    ax.set_ylabel("Silhouette overlap (%)")
    ax.set_title("Silhouette accuracy")
    ax.grid(True, alpha=0.3)

    plt.tight_layout()
    plt.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Overlap plot saved to {path}")
    return path


@safe_execute("plot_overlap_comparison", logger, ErrorHandler(logger))
def plot_overlap_comparison(frame_scores: Mapping[str, pd.Series], path: PathLike) -> Path:
    """Mean silhouette overlap per frame, one line per fitting method"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(10, 5))
    for method, series in frame_scores.items():
        if len(series):
            ax.plot(series.index, series.to_numpy(), marker="o", label=f"{method} ({series.mean():.2f} %)")
    if any(len(series) for series in frame_scores.values()):
        ax.legend(loc="lower right", fontsize="small")
    ax.set_xlabel("Frame")
    ax.set_ylabel("Silhouette overlap (%)")
    ax.set_title("Silhouette accuracy by method")
    ax.grid(True, alpha=0.3)

    plt.tight_layout()
    plt.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Comparison plot saved to {path}")
    return path
