"""A tiny two-stage detector with hand-written backpropagation.

Pipeline: a 2-3 layer tanh conv backbone, an RPN head (1x1 conv producing
objectness and box deltas per anchor), greedy proposal selection, and a
per-proposal head that reads the feature cell under the proposal centre and
predicts class logits, box deltas and a confidence logit.

Proposals used as ROI training samples are treated as constants, the same
way two-stage detectors stop gradients through proposal coordinates.
Passing ``rois`` explicitly fixes that sampling, which is what finite
difference checks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, iou_matrix, nms_indices
from .params import ArchConfig, ConfigError, DetectorParams, split_vector

LOSS_KINDS = ("det", "det_soft", "confidence", "distill-composite")


# -- small numerics ---------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softplus(x):
    return np.logaddexp(0.0, x)


def smooth_l1(d, beta):
    a = np.abs(d)
    return np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)


def smooth_l1_grad(d, beta):
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


# -- box coding -------------------------------------------------------------

def encode(ref: np.ndarray, gt: np.ndarray, weights) -> np.ndarray:
    wx, wy, ww, wh = weights
    rcx = ref[:, 0] + 0.5 * ref[:, 2]
    rcy = ref[:, 1] + 0.5 * ref[:, 3]
    gcx = gt[:, 0] + 0.5 * gt[:, 2]
    gcy = gt[:, 1] + 0.5 * gt[:, 3]
    return np.stack([
        wx * (gcx - rcx) / ref[:, 2],
        wy * (gcy - rcy) / ref[:, 3],
        ww * np.log(gt[:, 2] / ref[:, 2]),
        wh * np.log(gt[:, 3] / ref[:, 3]),
    ], axis=1)


def decode(ref: np.ndarray, deltas: np.ndarray, weights, image_size: int) -> np.ndarray:
    wx, wy, ww, wh = weights
    clamp = np.log(1000.0 / 16)
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, clamp)
    dh = np.minimum(deltas[:, 3] / wh, clamp)
    cx = ref[:, 0] + 0.5 * ref[:, 2] + dx * ref[:, 2]
    cy = ref[:, 1] + 0.5 * ref[:, 3] + dy * ref[:, 3]
    w = ref[:, 2] * np.exp(dw)
    h = ref[:, 3] * np.exp(dh)
    x1 = np.clip(cx - 0.5 * w, 0, image_size - 1.0)
    y1 = np.clip(cy - 0.5 * h, 0, image_size - 1.0)
    x2 = np.clip(cx + 0.5 * w, 0, image_size)
    y2 = np.clip(cy + 0.5 * h, 0, image_size)
    return np.stack([x1, y1, np.maximum(x2 - x1, 1.0), np.maximum(y2 - y1, 1.0)], axis=1)


def make_anchors(arch: ArchConfig) -> np.ndarray:
    """Dense anchor grid, ordered (row, col, anchor)."""
    s, n = arch.stride, arch.feat_size
    shapes = []
    for size in arch.anchor_sizes:
        for r in arch.aspect_ratios:
            shapes.append((size * np.sqrt(r), size / np.sqrt(r)))
    out = np.zeros((n, n, len(shapes), 4))
    for iy in range(n):
        for ix in range(n):
            cx, cy = (ix + 0.5) * s, (iy + 0.5) * s
            for a, (w, h) in enumerate(shapes):
                out[iy, ix, a] = (cx - w / 2, cy - h / 2, w, h)
    return out.reshape(-1, 4)


_ANCHOR_CACHE: dict = {}


def anchors_for(arch: ArchConfig) -> np.ndarray:
    a = _ANCHOR_CACHE.get(arch)
    if a is None:
        a = _ANCHOR_CACHE[arch] = make_anchors(arch)
    return a


# -- conv layers ------------------------------------------------------------

def _im2col(x: np.ndarray, stride: int):
    H, W, C = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ho, wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    cols = np.stack([xp[ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
                     for ky in range(3) for kx in range(3)], axis=2)
    return cols.reshape(ho * wo, 9 * C), (ho, wo)


def _col2im(dcols: np.ndarray, shape, stride: int, out_hw):
    H, W, C = shape
    ho, wo = out_hw
    d = dcols.reshape(ho, wo, 9, C)
    dxp = np.zeros((H + 2, W + 2, C))
    k = 0
    for ky in range(3):
        for kx in range(3):
            dxp[ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += d[:, :, k]
            k += 1
    return dxp[1:-1, 1:-1]


# -- forward pieces ---------------------------------------------------------

@dataclass
class _Trace:
    """Intermediate values kept for the backward pass."""

    arch: ArchConfig
    image_shape: tuple
    cols: list = field(default_factory=list)
    outs: list = field(default_factory=list)
    shapes: list = field(default_factory=list)
    hw: list = field(default_factory=list)
    feat: np.ndarray = None


def _check_image(arch: ArchConfig, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (arch.image_size, arch.image_size, 3):
        raise ConfigError(
            f"image shape {image.shape} does not match architecture "
            f"({arch.image_size}, {arch.image_size}, 3)")
    return image


def _backbone(t: dict, arch: ArchConfig, image: np.ndarray) -> _Trace:
    tr = _Trace(arch, image.shape)
    x = image - 0.5
    for i, s in enumerate(arch.strides):
        w = t[f"conv{i}.w"]
        cols, hw = _im2col(x, s)
        z = cols @ w.reshape(-1, w.shape[-1]) + t[f"conv{i}.b"]
        a = np.tanh(z)
        tr.cols.append(cols)
        tr.outs.append(a)
        tr.shapes.append(x.shape)
        tr.hw.append(hw)
        x = a.reshape(hw[0], hw[1], -1)
    tr.feat = x
    return tr


def _backbone_backward(t: dict, g: dict, tr: _Trace, dfeat: np.ndarray) -> None:
    d = dfeat.reshape(-1, dfeat.shape[-1])
    for i in reversed(range(len(tr.cols))):
        dz = d * (1.0 - tr.outs[i] ** 2)
        w = t[f"conv{i}.w"]
        g[f"conv{i}.w"] += (tr.cols[i].T @ dz).reshape(w.shape)
        g[f"conv{i}.b"] += dz.sum(axis=0)
        if i == 0:
            break
        dcols = dz @ w.reshape(-1, w.shape[-1]).T
        d = _col2im(dcols, tr.shapes[i], tr.arch.strides[i], tr.hw[i]).reshape(-1, tr.shapes[i][2])


def _rpn(t: dict, arch: ArchConfig, feat: np.ndarray):
    f = feat.reshape(-1, feat.shape[-1])
    out = (f @ t["rpn.w"] + t["rpn.b"]).reshape(-1, 5)
    return out[:, 0].copy(), out[:, 1:].copy()


def _propose(arch: ArchConfig, obj_logits: np.ndarray, rpn_deltas: np.ndarray):
    anchors = anchors_for(arch)
    boxes = decode(anchors, rpn_deltas, arch.rpn_delta_weights, arch.image_size)
    scores = sigmoid(obj_logits)
    keep = nms_indices(boxes, scores, arch.rpn_nms_iou)[:arch.num_proposals]
    return boxes[keep], scores[keep]


def _roi_inputs(arch: ArchConfig, feat: np.ndarray, rois: np.ndarray):
    s, n = arch.stride, arch.feat_size
    cx = rois[:, 0] + 0.5 * rois[:, 2]
    cy = rois[:, 1] + 0.5 * rois[:, 3]
    ix = np.clip(np.floor(cx / s), 0, n - 1).astype(np.int64)
    iy = np.clip(np.floor(cy / s), 0, n - 1).astype(np.int64)
    ref = arch.anchor_sizes[0]
    geom = np.stack([(cx - (ix + 0.5) * s) / s, (cy - (iy + 0.5) * s) / s,
                     np.log(rois[:, 2] / ref), np.log(rois[:, 3] / ref)], axis=1)
    u = np.concatenate([feat[iy, ix], geom], axis=1)
    return u, iy, ix


def _roi_head(t: dict, arch: ArchConfig, feat: np.ndarray, rois: np.ndarray):
    u, iy, ix = _roi_inputs(arch, feat, rois)
    h = np.tanh(u @ t["fc.w"] + t["fc.b"])
    cls = h @ t["cls.w"] + t["cls.b"]
    box = h @ t["box.w"] + t["box.b"]
    z = (h @ t["conf.w"] + t["conf.b"])[:, 0]
    return dict(u=u, iy=iy, ix=ix, h=h, cls=cls, box=box, conf_raw=z,
                conf=np.clip(z, -arch.conf_clamp, arch.conf_clamp))


def _roi_backward(t, g, cache, dfeat, dcls, dbox, dconf, clamp):
    h = cache["h"]
    if dconf is not None:
        dconf = np.where(np.abs(cache["conf_raw"]) <= clamp, dconf, 0.0)
    dh = dcls @ t["cls.w"].T + dbox @ t["box.w"].T
    g["cls.w"] += h.T @ dcls
    g["cls.b"] += dcls.sum(axis=0)
    g["box.w"] += h.T @ dbox
    g["box.b"] += dbox.sum(axis=0)
    if dconf is not None:
        g["conf.w"] += h.T @ dconf[:, None]
        g["conf.b"] += dconf.sum(keepdims=True)
        dh = dh + dconf[:, None] @ t["conf.w"].T
    dz = dh * (1.0 - h * h)
    g["fc.w"] += cache["u"].T @ dz
    g["fc.b"] += dz.sum(axis=0)
    du = dz @ t["fc.w"].T
    c = dfeat.shape[-1]
    np.add.at(dfeat, (cache["iy"], cache["ix"]), du[:, :c])


# -- public forward ---------------------------------------------------------

@dataclass
class Prediction:
    """Array form of a forward pass."""

    proposals: np.ndarray
    objectness: np.ndarray
    boxes: np.ndarray
    class_probs: np.ndarray
    confidence: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return self.class_probs[:, 1:].max(axis=1) if len(self.boxes) else np.zeros(0)

    @property
    def labels(self) -> np.ndarray:
        return self.class_probs[:, 1:].argmax(axis=1) + 1 if len(self.boxes) else np.zeros(0, int)


@dataclass
class DetectorOutput:
    proposals: list
    detections: list


def predict(params: DetectorParams, image: np.ndarray) -> Prediction:
    arch = params.arch
    image = _check_image(arch, image)
    t = params.tensors()
    tr = _backbone(t, arch, image)
    obj, deltas = _rpn(t, arch, tr.feat)
    rois, objectness = _propose(arch, obj, deltas)
    if len(rois) == 0:
        k = arch.num_classes + 1
        return Prediction(rois, objectness, rois, np.zeros((0, k)), np.zeros(0))
    c = _roi_head(t, arch, tr.feat, rois)
    probs = np.exp(log_softmax(c["cls"]))
    boxes = decode(rois, c["box"], arch.roi_delta_weights, arch.image_size)
    return Prediction(rois, objectness, boxes, probs, sigmoid(c["conf"]))


def forward(params: DetectorParams, image: np.ndarray) -> DetectorOutput:
    p = predict(params, image)
    proposals = [(Box.from_array(b), float(s)) for b, s in zip(p.proposals, p.objectness)]
    dets = [Detection.from_probs(Box.from_array(b), pr, tau)
            for b, pr, tau in zip(p.boxes, p.class_probs, p.confidence)]
    return DetectorOutput(proposals, dets)


def compute_rois(params: DetectorParams, image: np.ndarray) -> np.ndarray:
    """Proposal boxes the current parameters would sample for training."""
    return predict(params, image).proposals


# -- losses -----------------------------------------------------------------

def confidence_loss(taus: Sequence[float]) -> float:
    taus = np.asarray(taus, dtype=np.float64)
    return float(-np.log(taus).sum())


def interpolate(probs, onehot, tau):
    """Soft label ``tau * p + (1 - tau) * y`` with ``tau`` clipped to [0, 1]."""
    tau = np.clip(np.asarray(tau, dtype=np.float64), 0.0, 1.0)
    if tau.ndim == 1:
        tau = tau[:, None]
    return tau * np.asarray(probs) + (1.0 - tau) * np.asarray(onehot)


def label_anchors(arch: ArchConfig, gt_boxes: np.ndarray):
    """Per-anchor labels (1 pos, 0 neg, -1 ignore) and matched gt index."""
    anchors = anchors_for(arch)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ov = iou_matrix(anchors, gt_boxes)
    best = ov.max(axis=1)
    arg = ov.argmax(axis=1)
    labels[best <= arch.rpn_neg_iou] = 0
    gt_best = ov.max(axis=0)
    for j in range(len(gt_boxes)):
        if gt_best[j] > 0:
            labels[ov[:, j] == gt_best[j]] = 1
    labels[best >= arch.rpn_pos_iou] = 1
    return labels, arg


def label_rois(arch: ArchConfig, rois: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray):
    if len(gt_boxes) == 0:
        return np.zeros(len(rois), dtype=np.int64), np.zeros(len(rois), dtype=np.int64)
    ov = iou_matrix(rois, gt_boxes)
    arg = ov.argmax(axis=1)
    cls = np.where(ov.max(axis=1) >= arch.roi_fg_iou, gt_classes[arg], 0)
    return cls.astype(np.int64), arg


@dataclass
class LossResult:
    total: float
    parts: dict
    grad: np.ndarray | None
    rois: np.ndarray
    taus: np.ndarray | None = None


def detection_loss(params: DetectorParams, image, gt_boxes, gt_classes, *,
                   rois=None, soft: bool = False, taus=None,
                   det_weight: float = 1.0, conf_weight: float = 0.0,
                   need_grad: bool = True, grad_out: np.ndarray | None = None) -> LossResult:
    """Faster-RCNN style loss on one image, optionally with soft labels.

    ``soft`` swaps the ROI classification target for the confidence
    interpolation of prediction and one-hot label; ``taus`` overrides the
    network confidence (then no gradient flows through it).  A positive
    ``conf_weight`` adds ``conf_weight * sum(-log tau)`` over sampled ROIs.
    ``grad_out`` accumulates the gradient in place when given.
    """
    arch = params.arch
    image = _check_image(arch, image)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(gt_classes) and (gt_classes.min() < 1 or gt_classes.max() > arch.num_classes):
        raise ConfigError(f"class labels must be in 1..{arch.num_classes}")
    t = params.tensors()
    tr = _backbone(t, arch, image)
    obj, deltas = _rpn(t, arch, tr.feat)
    if rois is None:
        rois, _ = _propose(arch, obj, deltas)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)

    if need_grad:
        gvec = grad_out if grad_out is not None else np.zeros_like(params.vector)
        g = split_vector(arch, gvec)
        dfeat = np.zeros_like(tr.feat)
        dobj = np.zeros_like(obj)
        ddel = np.zeros_like(deltas)

    # RPN terms
    labels, arg = label_anchors(arch, gt_boxes)
    valid = labels >= 0
    n_valid = max(int(valid.sum()), 1)
    y = labels[valid].astype(np.float64)
    x = obj[valid]
    rpn_cls = float((softplus(x) - y * x).sum() / n_valid)
    pos = labels == 1
    n_pos = max(int(pos.sum()), 1)
    rpn_reg = 0.0
    if pos.any():
        tgt = encode(anchors_for(arch)[pos], gt_boxes[arg[pos]], arch.rpn_delta_weights)
        r = deltas[pos] - tgt
        rpn_reg = float(smooth_l1(r, arch.smooth_l1_beta).sum() / n_pos)

    # ROI terms
    samples = np.concatenate([rois, gt_boxes], axis=0)
    cls_t, garg = label_rois(arch, samples, gt_boxes, gt_classes)
    k = arch.num_classes + 1
    onehot = np.eye(k)[cls_t]
    c = _roi_head(t, arch, tr.feat, samples)
    logp = log_softmax(c["cls"])
    p = np.exp(logp)
    n_s = len(samples)
    net_tau = sigmoid(c["conf"])
    if soft:
        tau = net_tau if taus is None else np.broadcast_to(
            np.clip(np.asarray(taus, dtype=np.float64), 0.0, 1.0), (n_s,))
        target = interpolate(p, onehot, tau)
    else:
        target = onehot
    roi_cls = float(-(target * logp).sum() / n_s)
    fg = cls_t > 0
    n_fg = max(int(fg.sum()), 1)
    roi_reg = 0.0
    if fg.any():
        tgt = encode(samples[fg], gt_boxes[garg[fg]], arch.roi_delta_weights)
        rr = c["box"][fg] - tgt
        roi_reg = float(smooth_l1(rr, arch.smooth_l1_beta).sum() / n_fg)
    conf = float(-np.log(net_tau).sum()) if conf_weight else 0.0

    parts = dict(rpn_cls=rpn_cls, rpn_reg=rpn_reg, roi_cls=roi_cls, roi_reg=roi_reg, conf=conf)
    det = rpn_cls + rpn_reg + roi_cls + roi_reg
    total = det_weight * det + conf_weight * conf
    if not need_grad:
        return LossResult(total, parts, None, rois, net_tau)

    w = det_weight
    dobj[valid] = w * (sigmoid(x) - y) / n_valid
    if pos.any():
        ddel[pos] = w * smooth_l1_grad(r, arch.smooth_l1_beta) / n_pos
    if soft:
        # L = -sum_c (tau p_c + (1 - tau) y_c) log p_c, differentiated through p and tau
        tcol = np.asarray(tau)[:, None]
        pg = -tcol * p * logp - target
        dcls = w * (pg - p * pg.sum(axis=1, keepdims=True)) / n_s
    else:
        dcls = w * (p - onehot) / n_s
    dbox = np.zeros_like(c["box"])
    if fg.any():
        dbox[fg] = w * smooth_l1_grad(rr, arch.smooth_l1_beta) / n_fg
    dconf = None
    if soft and taus is None:
        dtau = -w * ((p - onehot) * logp).sum(axis=1) / n_s
        dconf = dtau * net_tau * (1.0 - net_tau)
    if conf_weight:
        extra = -conf_weight * (1.0 - net_tau)
        dconf = extra if dconf is None else dconf + extra
    _roi_backward(t, g, c, dfeat, dcls, dbox, dconf, arch.conf_clamp)

    f = tr.feat.reshape(-1, tr.feat.shape[-1])
    drpn = np.concatenate([dobj[:, None], ddel], axis=1).reshape(f.shape[0], -1)
    g["rpn.w"] += f.T @ drpn
    g["rpn.b"] += drpn.sum(axis=0)
    dfeat += (drpn @ t["rpn.w"].T).reshape(dfeat.shape)
    _backbone_backward(t, g, tr, dfeat)
    return LossResult(total, parts, gvec, rois, net_tau)


def loss_det(params, image, gt_boxes, gt_classes, rois=None) -> float:
    return detection_loss(params, image, gt_boxes, gt_classes, rois=rois, need_grad=False).total


def loss_det_soft(params, image, gt_boxes, gt_classes, rois=None, taus=None) -> float:
    return detection_loss(params, image, gt_boxes, gt_classes, rois=rois, soft=True,
                          taus=taus, need_grad=False).total


def loss_confidence(params, image, gt_boxes, gt_classes, rois=None) -> float:
    r = detection_loss(params, image, gt_boxes, gt_classes, rois=rois, det_weight=0.0,
                       conf_weight=1.0, need_grad=False)
    return r.parts["conf"]


def grad(loss_kind: str, params: DetectorParams, batch: dict) -> np.ndarray:
    """Analytic gradient of a named loss with respect to every parameter.

    ``batch`` holds ``image``, ``boxes``, ``classes`` and optionally ``rois``
    and ``taus``.  ``distill-composite`` expects a ``terms`` list of such
    dicts, each with ``weight`` and optional ``soft`` / ``conf_weight``.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    return value_and_grad(loss_kind, params, batch)[1]


def value_and_grad(loss_kind: str, params: DetectorParams, batch: dict):
    if loss_kind == "distill-composite":
        total, gvec = 0.0, np.zeros_like(params.vector)
        for term in batch["terms"]:
            r = _term(params, term, gvec)
            total += r.total
        return total, gvec
    term = dict(batch)
    if loss_kind == "det_soft":
        term["soft"] = True
    elif loss_kind == "confidence":
        term["weight"] = 0.0
        term["conf_weight"] = 1.0
    r = _term(params, term, None)
    return r.total, r.grad


def _term(params, term, gvec):
    return detection_loss(params, term["image"], term["boxes"], term["classes"],
                          rois=term.get("rois"), soft=term.get("soft", False),
                          taus=term.get("taus"), det_weight=term.get("weight", 1.0),
                          conf_weight=term.get("conf_weight", 0.0), grad_out=gvec)
