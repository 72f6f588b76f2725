"""Overlay panels and curve plots.

The heat colormap is a documented piecewise-linear ramp
black -> red -> yellow -> white: r = min(3v, 1), g = min(max(3v-1, 0), 1),
b = min(max(3v-2, 0), 1). Overlays blend with a per-pixel opacity of
alpha x value, so zero-valued map pixels show the untouched image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from voice.data import ImageTensor


def apply_colormap(values: np.ndarray) -> np.ndarray:
    """Map (H, W) values in [0, 1] to (H, W, 3) heat-ramp RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3.0 * v, 0.0, 1.0)
    g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=2)


def blend_overlay(base_rgb: np.ndarray, values: np.ndarray,
                  alpha: float = 0.5) -> np.ndarray:
    """Heat overlay with per-pixel opacity alpha x value."""
    base = np.asarray(base_rgb, dtype=np.float64)
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    heat = apply_colormap(v)
    a = (alpha * v)[:, :, None]
    return base * (1.0 - a) + heat * a


def _to_rgb(pixels: np.ndarray) -> np.ndarray:
    if pixels.shape[2] == 1:
        return np.repeat(pixels, 3, axis=2)
    return pixels[:, :, :3]


def render_overlay(
    x: ImageTensor,
    m,
    u,
    path: str | Path,
    alpha: float = 0.5,
    upscale: int = 4,
) -> Path:
    """Write a three-panel PNG: input, explanation overlay, uncertainty overlay.

    Output bytes are a pure function of the inputs (no timestamps or text
    rendering), so repeated calls produce identical files.
    """
    base = _to_rgb(np.asarray(x.pixels, dtype=np.float64))
    h, w = base.shape[:2]
    mv = np.asarray(getattr(m, "values", m), dtype=np.float64)
    uv = np.asarray(getattr(u, "values", u), dtype=np.float64)
    if mv.shape != (h, w) or uv.shape != (h, w):
        raise ValueError(
            f"maps must match image shape {(h, w)}, got {mv.shape} and {uv.shape}"
        )
    panels = [base, blend_overlay(base, mv, alpha), blend_overlay(base, uv, alpha)]
    sep = np.ones((h, 2, 3))
    strip = np.concatenate(
        [p for pair in zip(panels, [sep, sep, None]) for p in pair if p is not None],
        axis=1,
    )
    arr = np.round(np.clip(strip, 0.0, 1.0) * 255.0).astype(np.uint8)
    if upscale > 1:
        arr = np.repeat(np.repeat(arr, upscale, axis=0), upscale, axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    return path


def plot_curves(curves: list[dict], path: str | Path) -> Path:
    """Line plots of per-level metric means from a curves.json payload."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    aggregates = [c for c in curves if c.get("seed") == "aggregate"]
    if not aggregates:
        aggregates = curves
    metrics = ("iou", "snr", "nll")
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    for ax, metric in zip(np.atleast_1d(axes), metrics):
        for c in aggregates:
            series = c.get("mean", c.get("raw", {})).get(metric)
            if isinstance(series, dict):
                series = series.get("all")
            if not series:
                continue
            ys = [np.nan if v is None else v for v in series]
            ax.plot(c["levels"], ys, marker="o",
                    label=f"{c['challenge']}/{c['explainer']}")
        ax.set_xlabel("challenge level")
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
    handles, labels = np.atleast_1d(axes)[0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="upper center",
                   ncol=min(4, len(labels)), fontsize=7)
    fig.tight_layout(rect=(0, 0, 1, 0.9))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
