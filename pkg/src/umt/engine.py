"""Mean-teacher training engine: EMA, objectives, train step and loop.

Variants map to objectives as follows (``L_det`` is the detector loss,
``dist`` the distillation loss on the student view of the target image):

============  =====================================================================
SourceOnly    L_det(source)
UMT_S         L_det(source) + lambda * dist(teacher sees augmented target)
UMT_SC        L_det(source) + lambda * dist(teacher sees augmented source-like)
UMT_SCA       UMT_SC + L_det(target-like)
UMT           L_det_soft(source) + L_det(target-like)
              + lambda * dist(source-like teacher, confidence gate) + gamma * L_conf
============  =====================================================================
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .augment import AugmentedView, augment_pair
from .config import TrainConfig
from .detector import detection_loss, predict
from .params import ConfigError, DetectorParams
from .pseudo import PseudoLabelSet, select_arrays
from .synth import AnnotatedScene

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "lr", "lambda_eff", "loss_total", "loss_source", "loss_target_like",
    "loss_distill", "loss_conf", "rpn_cls", "rpn_reg", "roi_cls", "roi_reg",
    "n_teacher_candidates", "n_pseudo", "gate_mean", "tau_mean",
)


class NumericalError(RuntimeError):
    """A loss term became non-finite."""


def ema_update(teacher: DetectorParams, student: DetectorParams, alpha: float) -> DetectorParams:
    teacher.check_compatible(student)
    return DetectorParams(teacher.arch, alpha * teacher.vector + (1.0 - alpha) * student.vector)


def combine_mt(det: float, dist: float, lam: float) -> float:
    return det + lam * dist


def combine_umt(source_soft: float, target_like: float, dist: float, conf: float,
                lam: float, gamma: float) -> float:
    return source_soft + target_like + lam * dist + gamma * conf


@dataclass
class FourWayBatch:
    """One sample per domain role.

    ``target`` and ``source_like`` show the same scene; ``target_like`` is the
    translation of ``source``.
    """

    source: AnnotatedScene | None = None
    target: np.ndarray | None = None
    source_like: np.ndarray | None = None
    target_like: AnnotatedScene | None = None

    def require(self, *names: str) -> None:
        for n in names:
            if getattr(self, n) is None:
                raise ConfigError(f"batch is missing its '{n}' component")


@dataclass
class TrainState:
    student: DetectorParams
    teacher: DetectorParams
    velocity: np.ndarray
    step: int = 0

    @classmethod
    def initial(cls, arch, seed: int) -> "TrainState":
        p = DetectorParams.init(arch, seed)
        return cls(p, p.copy(), np.zeros_like(p.vector), 0)


@dataclass
class StepResult:
    value: float
    grad: np.ndarray
    metrics: dict
    pseudo: PseudoLabelSet = field(default_factory=PseudoLabelSet.empty)
    student_view: AugmentedView | None = None
    teacher_view: AugmentedView | None = None


def distill_loss(student: DetectorParams, student_view: np.ndarray, pseudo: PseudoLabelSet,
                 rois=None) -> float:
    """Student detection loss on its view with teacher pseudo labels as targets."""
    if len(pseudo) == 0:
        return 0.0
    return detection_loss(student, student_view, pseudo.boxes, pseudo.classes, rois=rois,
                          need_grad=False).total


def teacher_pseudo_labels(teacher: DetectorParams, view: np.ndarray, cfg: TrainConfig,
                          use_confidence: bool) -> PseudoLabelSet:
    p = predict(teacher, view)
    return select_arrays(p.boxes, p.scores, p.labels, p.confidence, cfg.threshold,
                         cfg.nms_iou, use_confidence)


def _finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite value in loss term '{name}'")


def objective(state: TrainState, batch: FourWayBatch, cfg: TrainConfig, step: int,
              rng: np.random.Generator, rois: dict | None = None) -> StepResult:
    """Value and student gradient of the variant's objective for one batch.

    ``rois`` optionally pins the ROI samples per term (keys ``source``,
    ``target_like``, ``distill``) for reproducible finite-difference checks.
    """
    rois = rois or {}
    variant = cfg.variant
    student, teacher = state.student, state.teacher
    g = np.zeros_like(student.vector)
    lam = cfg.lambda_ if step >= cfg.warmup_steps else 0.0
    m = dict.fromkeys(METRIC_COLUMNS, 0.0)
    m.update(step=step, lr=cfg.lr_at(step), lambda_eff=lam)
    batch.require("source")

    soft = variant == "UMT"
    conf_w = cfg.gamma if soft else 0.0
    r = detection_loss(student, batch.source.image, batch.source.boxes, batch.source.classes,
                       rois=rois.get("source"), soft=soft, conf_weight=conf_w, grad_out=g)
    det_src = r.total - conf_w * r.parts["conf"]
    _finite("source detection", det_src)
    _finite("confidence", r.parts["conf"])
    m.update(loss_source=det_src, loss_conf=r.parts["conf"] if soft else 0.0,
             tau_mean=float(np.mean(r.taus)) if soft else 0.0,
             **{k: r.parts[k] for k in ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg")})
    total = r.total

    if variant in ("UMT_SCA", "UMT"):
        batch.require("target_like")
        tl = batch.target_like
        r2 = detection_loss(student, tl.image, tl.boxes, tl.classes,
                            rois=rois.get("target_like"), grad_out=g)
        _finite("target-like detection", r2.total)
        m["loss_target_like"] = r2.total
        total += r2.total

    pseudo, sv, tv = PseudoLabelSet.empty(), None, None
    if variant != "SourceOnly":
        batch.require("target")
        cross = variant in ("UMT_SC", "UMT_SCA", "UMT")
        if cross:
            batch.require("source_like")
        if lam > 0:
            tv, sv = augment_pair(batch.target, rng, cfg.augment,
                                  teacher_image=batch.source_like if cross else None)
            pseudo = teacher_pseudo_labels(teacher, tv.image, cfg, use_confidence=soft)
            m["n_teacher_candidates"] = pseudo.candidates
            m["n_pseudo"] = len(pseudo)
            m["gate_mean"] = float(pseudo.gates.mean()) if len(pseudo) else 0.0
            if len(pseudo):
                r3 = detection_loss(student, sv.image, pseudo.boxes, pseudo.classes,
                                    rois=rois.get("distill"), det_weight=lam, grad_out=g)
                dist = r3.total / lam
                _finite("distillation", dist)
                m["loss_distill"] = dist
                total += r3.total
    _finite("total", total)
    m["loss_total"] = total
    return StepResult(total, g, m, pseudo, sv, tv)


def train_step(state: TrainState, batch: FourWayBatch, cfg: TrainConfig) -> tuple[TrainState, dict]:
    step = state.step
    rng = np.random.default_rng([cfg.seed, step, 1])
    res = objective(state, batch, cfg, step, rng)
    g = res.grad
    if cfg.weight_decay:
        g = g + cfg.weight_decay * state.student.vector
    vel = cfg.momentum * state.velocity + g
    student = DetectorParams(state.student.arch, state.student.vector - cfg.lr_at(step) * vel)
    teacher = ema_update(state.teacher, student, cfg.alpha)
    return TrainState(student, teacher, vel, step + 1), res.metrics


@dataclass
class TrainData:
    source: Sequence[AnnotatedScene]
    target: Sequence[AnnotatedScene]
    source_like: Sequence[AnnotatedScene]
    target_like: Sequence[AnnotatedScene]

    @classmethod
    def from_splits(cls, splits: dict) -> "TrainData":
        # target annotations never reach the training path
        strip = [AnnotatedScene(s.image, np.zeros((0, 4)), np.zeros(0, int), s.domain, s.id)
                 for s in splits["target_train"]]
        return cls(splits["source_train"], strip, splits["source_like"], splits["target_like"])

    def batch(self, seed: int, step: int) -> FourWayBatch:
        rng = np.random.default_rng([seed, step, 0])
        i = int(rng.integers(len(self.source)))
        j = int(rng.integers(len(self.target)))
        return FourWayBatch(self.source[i], self.target[j].image, self.source_like[j].image,
                            self.target_like[i])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def run_training(cfg: TrainConfig, data: TrainData, out_dir, arch, *, resume: bool = True,
                 stop_at: int | None = None) -> TrainState:
    """Train for ``cfg.total_steps`` steps writing checkpoints and a metrics CSV.

    Resumes from ``out_dir/last.ckpt`` when present.  ``stop_at`` halts early
    (used to simulate an interrupted run).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    last = out / "last.ckpt"
    if resume and last.exists():
        state = ckpt.load(last, arch)
        _truncate_metrics(metrics_path, state.step)
        log.info("resuming from step %d", state.step)
    else:
        state = TrainState.initial(arch, cfg.seed)
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)
    if state.step == 0:
        ckpt.save(out / "init.ckpt", state, cfg)
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    with open(metrics_path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        while state.step < end:
            state, met = train_step(state, data.batch(cfg.seed, state.step), cfg)
            w.writerow([_fmt(met[c]) for c in METRIC_COLUMNS])
            if state.step % cfg.checkpoint_every == 0:
                fh.flush()
                ckpt.save(last, state, cfg)
    ckpt.save(last, state, cfg)
    if state.step >= cfg.total_steps:
        ckpt.save(out / "final.ckpt", state, cfg)
    return state


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)
        return
    lines = path.read_bytes().split(b"\n")
    path.write_bytes(b"\n".join(lines[:1 + step]) + b"\n")


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}
