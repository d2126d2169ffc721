"""Teacher pseudo-label selection.

Both rules run per foreground class: sort by class score, NMS, then gate.
The plain rule keeps ``p > T``; the confidence-aware rule keeps
``sqrt(tau * p) > T`` so the teacher's in-distribution estimate can veto a
confident-looking but unfamiliar prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, boxes_to_array, nms_indices


@dataclass
class PseudoLabelSet:
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray
    confidences: np.ndarray
    gates: np.ndarray
    candidates: int = 0  # entries surviving NMS, before gating

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def empty(cls) -> "PseudoLabelSet":
        z = np.zeros(0)
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), z, z.copy(), z.copy())

    def pairs(self) -> list[tuple[Box, int]]:
        return [(Box.from_array(b), int(c)) for b, c in zip(self.boxes, self.classes)]

    def key(self) -> list:
        return [(tuple(b), int(c)) for b, c in zip(self.boxes.tolist(), self.classes.tolist())]


def select_arrays(boxes, scores, labels, confidences, threshold: float, nms_iou: float,
                  use_confidence: bool) -> PseudoLabelSet:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    confidences = np.clip(np.asarray(confidences, dtype=np.float64), 0.0, 1.0)
    keep, gates, n_cand = [], [], 0
    for c in np.unique(labels):
        if c <= 0:
            continue
        idx = np.where(labels == c)[0]
        for i in idx[nms_indices(boxes[idx], scores[idx], nms_iou)]:
            n_cand += 1
            gate = np.sqrt(confidences[i] * scores[i]) if use_confidence else scores[i]
            if gate > threshold:
                keep.append(i)
                gates.append(gate)
    if not keep:
        out = PseudoLabelSet.empty()
        out.candidates = n_cand
        return out
    keep = np.array(keep, dtype=np.int64)
    return PseudoLabelSet(boxes[keep], labels[keep], scores[keep], confidences[keep],
                          np.array(gates), n_cand)


def _unpack(dets: Sequence[Detection]):
    return (boxes_to_array([d.box for d in dets]), np.array([d.score for d in dets]),
            np.array([d.class_id for d in dets], dtype=np.int64),
            np.array([d.confidence for d in dets]))


def select_pseudo_labels(dets: Sequence[Detection], threshold: float, nms_iou: float) -> PseudoLabelSet:
    return select_arrays(*_unpack(dets), threshold, nms_iou, use_confidence=False)


def select_pseudo_labels_conf(dets: Sequence[Detection], threshold: float,
                              nms_iou: float) -> PseudoLabelSet:
    return select_arrays(*_unpack(dets), threshold, nms_iou, use_confidence=True)
