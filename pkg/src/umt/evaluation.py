"""VOC-style evaluation, IoU sweeps, error taxonomies and the bias check."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .detector import predict
from .geometry import iou_matrix, match_arrays, nms_indices
from .params import DetectorParams
from .synth import AnnotatedScene

log = logging.getLogger(__name__)

CORRECT, MISLOC, BACKGROUND, MISCLS = "correct", "mis_localized", "background", "mis_classified"
LOC_CATEGORIES = (CORRECT, MISLOC, BACKGROUND, MISCLS)


@dataclass
class ImageDets:
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    iou_threshold: float = 0.5
    localization: dict = field(default_factory=dict)
    classification: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    bias: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def average_precision(scores, tp, n_gt: int) -> float:
    """All-points interpolated AP from per-detection TP flags.

    ``n_gt`` is the recall denominator.  Score ties keep input order.
    """
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hit = tp[order].astype(np.float64)
    ctp = np.cumsum(hit)
    cfp = np.cumsum(1.0 - hit)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def detect(params: DetectorParams, scenes: Sequence[AnnotatedScene],
           nms_iou: float = 0.3) -> list[ImageDets]:
    """Forward every scene and apply per-class NMS."""
    out = []
    for sc in scenes:
        p = predict(params, sc.image)
        out.append(postprocess(p.boxes, p.scores, p.labels, p.confidence, nms_iou))
    return out


def postprocess(boxes, scores, labels, confidence, nms_iou: float) -> ImageDets:
    keep = []
    for c in np.unique(labels):
        idx = np.where(labels == c)[0]
        keep.extend(idx[nms_indices(boxes[idx], scores[idx], nms_iou)])
    keep = np.array(sorted(keep, key=lambda i: (-scores[i], i)), dtype=np.int64)
    return ImageDets(boxes[keep], scores[keep], labels[keep], confidence[keep])


def class_ap(dets: Sequence[ImageDets], scenes: Sequence[AnnotatedScene], cls: int,
             iou_threshold: float) -> float | None:
    scores, flags, n_gt = [], [], 0
    for d, sc in zip(dets, scenes):
        gmask = sc.classes == cls
        n_gt += int(gmask.sum())
        m = d.labels == cls
        tp, _ = match_arrays(d.boxes[m], d.scores[m], sc.boxes[gmask], iou_threshold)
        scores.append(d.scores[m])
        flags.append(tp)
    if n_gt == 0:
        return None
    return average_precision(np.concatenate(scores), np.concatenate(flags), n_gt)


def evaluate_detections(dets: Sequence[ImageDets], scenes: Sequence[AnnotatedScene],
                        num_classes: int, iou_threshold: float = 0.5) -> EvalReport:
    if len(scenes) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    per_class = {}
    for c in range(1, num_classes + 1):
        ap = class_ap(dets, scenes, c, iou_threshold)
        if ap is None:
            log.warning("class %d has no ground truth; excluded from mAP", c)
            continue
        per_class[c] = ap
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class, m, iou_threshold)


def mean_ap(params: DetectorParams, scenes: Sequence[AnnotatedScene], iou_threshold: float = 0.5,
            nms_iou: float = 0.3) -> EvalReport:
    if len(scenes) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    dets = detect(params, scenes, nms_iou)
    return evaluate_detections(dets, scenes, params.arch.num_classes, iou_threshold)


def iou_sweep(params: DetectorParams, scenes, thresholds, nms_iou: float = 0.3,
              dets=None) -> list[tuple[float, float]]:
    thresholds = [float(t) for t in thresholds]
    if any(not 0 < t < 1 for t in thresholds) or thresholds != sorted(thresholds):
        raise ValueError("sweep thresholds must be ascending in (0, 1)")
    if dets is None:
        dets = detect(params, scenes, nms_iou)
    return [(t, evaluate_detections(dets, scenes, params.arch.num_classes, t).map)
            for t in thresholds]


def classify_overlap(same_iou: float, other_iou: float) -> str:
    """Taxonomy bucket for one detection from its best same/other-class IoU."""
    if same_iou >= 0.5:
        return CORRECT
    if other_iou > max(same_iou, 0.3):
        return MISCLS
    if same_iou > 0.3:
        return MISLOC
    return BACKGROUND


def localization_errors(dets: Sequence[ImageDets], scenes: Sequence[AnnotatedScene],
                        num_classes: int, top_k_rule: str = "gt_count") -> dict:
    """Fractions of the top-ranked detections per error category.

    ``gt_count`` keeps, per class, as many detections as that class has
    ground-truth boxes; ``all`` keeps every detection.
    """
    if top_k_rule not in ("gt_count", "all"):
        raise ValueError(f"unknown top_k_rule {top_k_rule!r}")
    counts = dict.fromkeys(LOC_CATEGORIES, 0)
    for c in range(1, num_classes + 1):
        rows = []
        for i, (d, sc) in enumerate(zip(dets, scenes)):
            for j in np.where(d.labels == c)[0]:
                rows.append((-d.scores[j], i, j))
        rows.sort()
        if top_k_rule == "gt_count":
            rows = rows[:sum(int((sc.classes == c).sum()) for sc in scenes)]
        for _, i, j in rows:
            sc, box = scenes[i], dets[i].boxes[j:j + 1]
            ov = iou_matrix(box, sc.boxes)[0] if len(sc.boxes) else np.zeros(0)
            same = ov[sc.classes == c].max(initial=0.0)
            other = ov[sc.classes != c].max(initial=0.0)
            counts[classify_overlap(same, other)] += 1
    total = sum(counts.values())
    fr = {k: (v / total if total else 0.0) for k, v in counts.items()}
    if not total:
        fr[BACKGROUND] = 1.0
    return {"counts": counts, "fractions": fr, "total": total, "rule": top_k_rule}


def classification_errors(dets: Sequence[ImageDets], scenes: Sequence[AnnotatedScene],
                          num_classes: int) -> dict:
    """For each gt, judge the class of its maximum-overlap detection."""
    conf = np.zeros((num_classes, num_classes + 1), dtype=np.int64)  # column 0: missed
    for d, sc in zip(dets, scenes):
        if len(sc.boxes) == 0:
            continue
        ov = iou_matrix(sc.boxes, d.boxes) if len(d.boxes) else np.zeros((len(sc.boxes), 0))
        for g, c in enumerate(sc.classes):
            if ov.shape[1] == 0 or ov[g].max() <= 0:
                conf[c - 1, 0] += 1
            else:
                conf[c - 1, int(d.labels[int(np.argmax(ov[g]))])] += 1
    n = int(conf.sum())
    correct = int(np.trace(conf[:, 1:]))
    missed = int(conf[:, 0].sum())
    wrong = n - correct - missed
    judged = correct + wrong
    return {
        "accuracy": correct / judged if judged else 0.0,
        "fractions": {"correct": correct / n if n else 0.0,
                      "mis_classified": wrong / n if n else 0.0,
                      "missed": missed / n if n else 0.0},
        "confusion": conf.tolist(),
        "total": n,
    }


def localization_error_analysis(params, scenes, top_k_rule="gt_count", nms_iou=0.3) -> dict:
    return localization_errors(detect(params, scenes, nms_iou), scenes,
                               params.arch.num_classes, top_k_rule)


def classification_error_analysis(params, scenes, nms_iou=0.3) -> dict:
    return classification_errors(detect(params, scenes, nms_iou), scenes, params.arch.num_classes)


def bias_diagnostic(teacher: DetectorParams, target_scenes: Sequence[AnnotatedScene],
                    sourcelike_scenes: Sequence[AnnotatedScene], iou_threshold: float = 0.5,
                    nms_iou: float = 0.3) -> dict:
    """Teacher mAP on target scenes vs. their source-like translations."""
    if len(target_scenes) != len(sourcelike_scenes):
        raise ValueError("target and source-like sets are not paired (different sizes)")
    for t, s in zip(target_scenes, sourcelike_scenes):
        if not (np.array_equal(t.boxes, s.boxes) and np.array_equal(t.classes, s.classes)):
            raise ValueError(f"scenes {t.id!r} and {s.id!r} are not translation pairs")
    m_t = mean_ap(teacher, target_scenes, iou_threshold, nms_iou).map
    m_s = mean_ap(teacher, sourcelike_scenes, iou_threshold, nms_iou).map
    return {"map_target": m_t, "map_sourcelike": m_s, "difference": m_s - m_t}
