"""Rendered outputs: loss curves, ablation charts, and detection overlays.

Matplotlib figures go to PNG files (Agg backend, no display needed); the
per-sample detection overlay is a plain P6 PPM so it round-trips through
the package's own image reader.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .detect import _rounded_span
from .errors import ShapeError
from .formats import write_ppm

HEAT_COLOR = (1.0, 0.25, 0.0)
GT_COLOR = (1.0, 0.0, 0.0)
DET_COLOR = (0.0, 1.0, 0.0)
HEAT_ALPHA = 0.6


def render_loss_curve(loss_curve, path, f1_history=()):
    """Loss against optimizer step; F1 checkpoints on a second axis if given."""
    if not loss_curve:
        raise ShapeError("cannot plot an empty loss curve")
    steps, losses = zip(*loss_curve)
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=120)
    ax.plot(steps, losses, lw=0.8, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    if f1_history:
        ax2 = ax.twinx()
        pts = [(s, f) for s, f, _ in f1_history]
        ax2.plot(*zip(*pts), lw=1.0, color="tab:orange", marker=".", ms=3)
        ax2.set_ylabel("validation F1", color="tab:orange")
        ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_ablation_chart(rows, path):
    """Bar chart of validation recall/precision/F1 per input configuration."""
    if not rows:
        raise ShapeError("cannot plot an empty ablation table")
    names = [name for name, _, _ in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=120)
    for off, (field, color) in enumerate(
            [("recall", "tab:blue"), ("precision", "tab:green"), ("f1", "tab:orange")]):
        vals = [getattr(rep, field) for _, _, rep in rows]
        ax.bar(x + (off - 1) * 0.25, vals, width=0.25, color=color, label=field)
    ax.set_xticks(x, names)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("validation score")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _draw_box(canvas, box, color):
    # 1-px border just inside the half-open box, clipped to the frame
    h, w = canvas.shape[:2]
    x0, x1 = _rounded_span(box[0], box[2], w)
    y0, y1 = _rounded_span(box[1], box[3], h)
    if x1 <= x0 or y1 <= y0:
        return
    canvas[y0, x0:x1] = color
    canvas[y1 - 1, x0:x1] = color
    canvas[y0:y1, x0] = color
    canvas[y0:y1, x1 - 1] = color


def render_overlay(rgb, prob, gt_boxes, detections, path):
    """Detection overlay PPM: heat-blended probability, red GT, green boxes.

    rgb is [H,W,3] in [0,1] (None for an all-black base), prob is a [H,W]
    probability map blended in as translucent heat.
    """
    prob = np.asarray(prob, dtype=np.float32)
    prob = prob.reshape(prob.shape[-2:])
    h, w = prob.shape
    if rgb is None:
        canvas = np.zeros((h, w, 3), dtype=np.float32)
    else:
        canvas = np.array(rgb, dtype=np.float32)
        if canvas.shape != (h, w, 3):
            raise ShapeError(f"overlay rgb {canvas.shape} does not match map {prob.shape}")
    alpha = (HEAT_ALPHA * prob)[..., None]
    canvas = (1.0 - alpha) * canvas + alpha * np.asarray(HEAT_COLOR, dtype=np.float32)
    for box in gt_boxes:
        _draw_box(canvas, box, GT_COLOR)
    for det in detections:
        _draw_box(canvas, det.box, DET_COLOR)
    write_ppm(path, np.clip(canvas, 0.0, 1.0))
    return path
