"""Box geometry, overlap, non-maximum suppression and greedy matching.

Boxes use the top-left + width/height convention ``(x, y, w, h)``.  The
vectorised helpers operate on ``(N, 4)`` float arrays in that layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive extent, got w={self.w} h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    """One scored detection.

    ``class_probs`` covers background (index 0) plus the C foreground classes;
    ``score`` is the largest foreground probability and ``confidence`` the
    in-distribution estimate from the confidence branch.
    """

    box: Box
    class_id: int
    score: float
    class_probs: np.ndarray = field(default=None, compare=False, repr=False)
    confidence: float = 1.0

    @classmethod
    def from_probs(cls, box: Box, class_probs: np.ndarray, confidence: float) -> "Detection":
        probs = np.asarray(class_probs, dtype=np.float64)
        k = int(np.argmax(probs[1:]))
        return cls(box, k + 1, float(probs[k + 1]), probs,
                   float(min(max(confidence, 0.0), 1.0)))


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


def iou(a: Box, b: Box) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    # areas from corner differences so identical boxes give exactly 1
    area_a = ((a.x + a.w) - a.x) * ((a.y + a.h) - a.y)
    area_b = ((b.x + b.w) - b.x) * ((b.y + b.h) - b.y)
    return min(1.0, inter / (area_a + area_b - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = (np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
          - np.maximum(a[:, None, 0], b[None, :, 0]))
    iy = (np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
          - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = ((a[:, 0] + a[:, 2]) - a[:, 0]) * ((a[:, 1] + a[:, 3]) - a[:, 1])
    area_b = ((b[:, 0] + b[:, 2]) - b[:, 0]) * ((b[:, 1] + b[:, 3]) - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(inter / union, 1.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices kept by greedy NMS, in descending score order.

    Score ties keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ov = iou_matrix(boxes[order], boxes[order])
    n = len(order)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ov[i] > iou_threshold
    return order[np.array(keep, dtype=np.int64)]


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    keep = nms_indices(boxes, np.array([d.score for d in dets]), iou_threshold)
    return [dets[i] for i in keep]


def match_greedy(dets: Sequence[Detection], gts: Sequence[tuple[Box, int]],
                 iou_threshold: float) -> tuple[list[bool], list[bool]]:
    """VOC-style greedy matching for one image and one class.

    Returns ``(tp_flags, gt_matched)``; ``tp_flags`` follows the input order of
    ``dets``.  Ties on IoU go to the lowest gt index.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    boxes = boxes_to_array([d.box for d in dets])
    gt_boxes = boxes_to_array([g[0] for g in gts])
    gt_cls = np.array([g[1] for g in gts], dtype=np.int64)
    det_cls = np.array([d.class_id for d in dets], dtype=np.int64)
    tp, matched = match_arrays(boxes, scores, gt_boxes, iou_threshold,
                               det_cls, gt_cls)
    return tp.tolist(), matched.tolist()


def match_arrays(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                 iou_threshold: float, det_cls=None, gt_cls=None):
    n, m = len(scores), len(gt_boxes)
    tp = np.zeros(n, dtype=bool)
    matched = np.zeros(m, dtype=bool)
    if n == 0 or m == 0:
        return tp, matched
    ov = iou_matrix(boxes, gt_boxes)
    if det_cls is not None and gt_cls is not None:
        ov = np.where(det_cls[:, None] == gt_cls[None, :], ov, -1.0)
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(matched, -1.0, ov[i])
        j = int(np.argmax(cand))  # first max -> lowest gt index
        if cand[j] >= iou_threshold:
            tp[i] = True
            matched[j] = True
    return tp, matched
