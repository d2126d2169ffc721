"""Paired-view augmentation: shared crop/pad geometry, independent colour jitter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .config import AugConfig
from .params import ConfigError


@dataclass(frozen=True)
class ViewTransform:
    """Square window ``(x0, y0, size)`` in source pixels resampled to ``out``.

    A window larger than the image pads, a smaller one crops.
    """

    x0: float
    y0: float
    size: float
    out: int

    @property
    def scale(self) -> float:
        return self.out / self.size

    def map_boxes(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        s = self.scale
        return np.stack([(b[:, 0] - self.x0) * s, (b[:, 1] - self.y0) * s,
                         b[:, 2] * s, b[:, 3] * s], axis=1)

    def unmap_boxes(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        s = self.scale
        return np.stack([b[:, 0] / s + self.x0, b[:, 1] / s + self.y0,
                         b[:, 2] / s, b[:, 3] / s], axis=1)

    def is_identity(self) -> bool:
        return self.x0 == 0 and self.y0 == 0 and self.size == self.out

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.is_identity():
            return image.copy()
        n = self.out
        c = (np.arange(n) + 0.5) / self.scale - 0.5
        yy, xx = np.meshgrid(c + self.y0, c + self.x0, indexing="ij")
        fill = image.mean(axis=(0, 1))
        return np.stack([map_coordinates(image[:, :, k], [yy, xx], order=1, mode="constant",
                                         cval=fill[k]) for k in range(3)], axis=2)


@dataclass
class AugmentedView:
    image: np.ndarray
    transform: ViewTransform


def sample_transform(n: int, rng: np.random.Generator, cfg: AugConfig) -> ViewTransform:
    mode = rng.random()
    if mode < 0.5:
        size = n * (1.0 - rng.uniform(0.0, cfg.crop_fraction))
    else:
        size = n * (1.0 + rng.uniform(0.0, cfg.pad_fraction))
    if size <= 1:
        raise ConfigError("crop fraction leaves an empty image")
    lo, hi = min(0.0, n - size), max(0.0, n - size)
    x0 = rng.uniform(lo, hi) if hi > lo else 0.0
    y0 = rng.uniform(lo, hi) if hi > lo else 0.0
    return ViewTransform(float(x0), float(y0), float(size), n)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def color_jitter(image: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter; neutral draws are skipped."""
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    out = image
    if b != 1:
        out = out * b
    if c != 1:
        m = out.mean()
        out = (out - m) * c + m
    if s != 1:
        gray = (out @ _YIQ[0])[:, :, None]
        out = gray + (out - gray) * s
    if h != 0:
        a = 2 * np.pi * h
        rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
        out = out @ (_YIQ_INV @ rot @ _YIQ).T
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)


def augment_pair(image: np.ndarray, rng: np.random.Generator, cfg: AugConfig,
                 teacher_image: np.ndarray | None = None):
    """Teacher and student views sharing one geometric transform.

    ``teacher_image`` (e.g. the source-like translation of ``image``) feeds the
    teacher view when given; it must be pixel-aligned with ``image``.
    """
    image = np.asarray(image, dtype=np.float64)
    src_t = image if teacher_image is None else np.asarray(teacher_image, dtype=np.float64)
    if src_t.shape != image.shape:
        raise ConfigError("teacher and student images must have the same shape")
    tf = sample_transform(image.shape[0], rng, cfg)
    teacher = AugmentedView(color_jitter(tf.apply(src_t), rng, cfg), tf)
    student = AugmentedView(color_jitter(tf.apply(image), rng, cfg), tf)
    return teacher, student
