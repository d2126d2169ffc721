"""Best-effort figures and annotated detection dumps.

Every figure here has a CSV twin written by the CLI, so a failing or missing
matplotlib only costs the PNG.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .synth import CLASS_NAMES, to_uint8

log = logging.getLogger(__name__)

_COLORS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48)]


def _pyplot():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception as e:  # pragma: no cover - depends on the environment
        log.warning("matplotlib unavailable (%s); skipping figure", e)
        return None
    return plt


def _save(fig, plt, path) -> Path | None:
    try:
        fig.savefig(path, dpi=100, metadata={"Software": None})
        return Path(path)
    except Exception as e:  # pragma: no cover
        log.warning("could not write %s: %s", path, e)
        return None
    finally:
        plt.close(fig)


def loss_curves(metrics: dict, path, window: int = 50) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    k = np.ones(window) / window
    for col in ("loss_total", "loss_source", "loss_target_like", "loss_distill", "loss_conf"):
        y = metrics[col]
        if not np.any(y):
            continue
        smooth = np.convolve(y, k, mode="valid") if len(y) >= window else y
        ax.plot(metrics["step"][len(y) - len(smooth):], smooth, label=col)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss ({window}-step mean)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, plt, path)


def sweep_curve(rows, path) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    t, m = zip(*rows)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(t, m, marker="o")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, plt, path)


def ladder_bars(medians: dict, path) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    names = list(medians)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(names, [100 * medians[n] for n in names])
    ax.set_ylabel("median target mAP (%)")
    ax.tick_params(axis="x", labelsize=8)
    fig.tight_layout()
    return _save(fig, plt, path)


def dump_detections(image, boxes, scores, labels, path, threshold: float = 0.6,
                    scale: int = 8) -> Path:
    """Upscaled image with every detection scoring at least ``threshold`` drawn."""
    img = Image.fromarray(to_uint8(image)).resize(
        (image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for b, s, c in zip(boxes, scores, labels):
        if s < threshold or c < 1:
            continue
        x, y, w, h = (float(v) * scale for v in b)
        col = _COLORS[(int(c) - 1) % len(_COLORS)]
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=col, width=2)
        name = CLASS_NAMES[int(c) - 1] if int(c) <= len(CLASS_NAMES) else str(int(c))
        draw.text((x + 2, y + 1), f"{name} {s:.2f}", fill=col)
    img.save(path)
    return Path(path)
