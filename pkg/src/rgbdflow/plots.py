"""Flow visualizations and report figures.

The two PPM visualizations are pure array transforms (testable pixel by
pixel): an error heatmap on a linear white-to-magenta ramp, and the
standard direction-hue / magnitude-saturation color wheel. The PNG
figures are rendered headlessly through matplotlib.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")  # headless; must precede pyplot import

import matplotlib.pyplot as plt
import numpy as np

DEFAULT_ERROR_RAMP_MAX = 10.0


def error_heatmap_rgb(pred2d, gt2d, max_error: float = DEFAULT_ERROR_RAMP_MAX):
    """Per-pixel end-point error on a linear white->magenta ramp.

    Zero error is white; errors at or above ``max_error`` saturate to
    full magenta (the green channel falls linearly from 1 to 0 while red
    and blue stay at 1). Returns a (3, H, W) image in [0, 1].
    """
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    if pred2d.shape != gt2d.shape or pred2d.ndim != 3 or pred2d.shape[0] != 2:
        raise ValueError(
            f"flows must both be (2, H, W), got {pred2d.shape} vs {gt2d.shape}"
        )
    if max_error <= 0:
        raise ValueError("max_error must be positive")
    diff = pred2d - gt2d
    epe = np.sqrt((diff * diff).sum(axis=0))
    t = np.clip(epe / max_error, 0.0, 1.0)
    out = np.ones((3,) + epe.shape)
    out[1] = 1.0 - t
    return out


def _hsv_to_rgb(h, s, v):
    """Vectorized hue/saturation/value in [0,1] to RGB in [0,1]."""
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def flow_wheel_rgb(flow2d, max_magnitude: float | None = None):
    """Direction as hue, magnitude as saturation, full value.

    ``max_magnitude`` fixes the saturation scale; by default the field's
    own maximum is used. Zero flow renders white everywhere (an all-zero
    field gives a plain white image).
    """
    flow2d = np.asarray(flow2d, dtype=np.float64)
    if flow2d.ndim != 3 or flow2d.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow2d.shape}")
    mag = np.hypot(flow2d[0], flow2d[1])
    scale = float(mag.max()) if max_magnitude is None else float(max_magnitude)
    sat = np.clip(mag / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(mag)
    hue = np.arctan2(flow2d[1], flow2d[0]) / (2.0 * np.pi)
    return _hsv_to_rgb(hue, sat, np.ones_like(mag))


# ---------------------------------------------------------------------------
# matplotlib report figures


def save_loss_curve_png(rows, path) -> None:
    """Loss and learning-rate trajectories from training log rows."""
    steps = [r.step for r in rows]
    losses = [r.loss for r in rows]
    lrs = [r.lr for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4), dpi=120)
    ax.plot(steps, losses, lw=0.9, color="#2266aa")
    ax.set_xlabel("step")
    ax.set_ylabel("sequence loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=0.9, color="#aa6622", alpha=0.7)
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_epe_histogram_png(epe_values, path, title: str = "end-point error") -> None:
    """Histogram of pooled per-pixel 2-D EPE values."""
    epe_values = np.asarray(epe_values, dtype=np.float64).ravel()
    fig, ax = plt.subplots(figsize=(7, 4), dpi=120)
    if epe_values.size:
        ax.hist(epe_values, bins=50, color="#2266aa")
    ax.set_xlabel("EPE (px)")
    ax.set_ylabel("pixels")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_plot_summary_png(pred2d, gt2d, max_error, path) -> None:
    """Side-by-side heat map and color wheel figure."""
    heat = np.moveaxis(error_heatmap_rgb(pred2d, gt2d, max_error), 0, -1)
    wheel = np.moveaxis(flow_wheel_rgb(pred2d), 0, -1)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), dpi=120)
    axes[0].imshow(heat)
    axes[0].set_title(f"EPE, white to magenta at {max_error:g} px")
    axes[1].imshow(wheel)
    axes[1].set_title("flow direction / magnitude")
    for ax in axes:
        ax.set_xticks(())
        ax.set_yticks(())
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
