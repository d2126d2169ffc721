"""Experiment configuration: dataclasses, TOML loading and env overrides.

TOML layout (every section optional, unknown keys rejected)::

    seeds = [0, 1, 2]
    out = "runs"

    [scene]   image_size, num_classes, min_objects, max_objects, min_size, max_size, background
    [shift]   preset = "strong"   or explicit color_matrix, color_offset, noise_amplitude,
              noise_cell, texture, texture_strength, epsilon (explicit keys override the preset)
    [data]    root, n_source, n_target, n_eval, seed
    [model]   any ArchConfig field (channels, hidden, anchor_sizes, num_proposals, ...)
    [train]   lambda, gamma, threshold, alpha, lr1, lr1_steps, lr2, lr2_steps, momentum,
              weight_decay, nms_iou, warmup_fraction, variant, checkpoint_every, eval_model
    [train.augment]  crop_fraction, pad_fraction, brightness, contrast, hue, saturation
    [eval]    iou_threshold, nms_iou, sweep, dump_threshold, top_k_rule

Environment overrides use ``UMT_<SECTION>__<KEY>`` (``UMT_TRAIN__LAMBDA=0.05``,
``UMT_TRAIN__AUGMENT__HUE=0``); top-level keys use ``UMT_<KEY>``.  Values are
parsed as TOML literals, falling back to plain strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .params import ArchConfig, ConfigError
from .synth import DomainShiftSpec, SceneSpec, shift_preset

VARIANTS = ("SourceOnly", "UMT_S", "UMT_SC", "UMT_SCA", "UMT")
ENV_PREFIX = "UMT_"


@dataclass(frozen=True)
class AugConfig:
    crop_fraction: float = 0.15
    pad_fraction: float = 0.15
    brightness: float = 0.2
    contrast: float = 0.2
    hue: float = 0.05
    saturation: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ConfigError(f"train.augment.{f.name} must be >= 0")
        if self.crop_fraction >= 1:
            raise ConfigError("train.augment.crop_fraction must be < 1 (crop would be empty)")


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 0.01
    gamma: float = 0.1
    threshold: float = 0.8
    alpha: float = 0.99
    lr1: float = 0.01
    lr1_steps: int = 1500
    lr2: float = 0.001
    lr2_steps: int = 500
    momentum: float = 0.9
    weight_decay: float = 0.0
    nms_iou: float = 0.3
    warmup_fraction: float = 0.1
    variant: str = "UMT"
    seed: int = 0
    checkpoint_every: int = 500
    eval_model: str = "teacher"
    augment: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError("train.lambda must be >= 0")
        if self.gamma < 0:
            raise ConfigError("train.gamma must be >= 0")
        if not 0 < self.threshold < 1:
            raise ConfigError("train.threshold must be in (0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("train.alpha must be in [0, 1]")
        if self.lr1_steps < 0 or self.lr2_steps < 0:
            raise ConfigError("train.lr1_steps / train.lr2_steps must be >= 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("train.warmup_fraction must be in [0, 1]")
        if not 0 <= self.nms_iou <= 1:
            raise ConfigError("train.nms_iou must be in [0, 1]")
        if self.variant not in VARIANTS:
            raise ConfigError(f"train.variant {self.variant!r} is not one of {', '.join(VARIANTS)}")
        if self.eval_model not in ("teacher", "student"):
            raise ConfigError("train.eval_model must be 'teacher' or 'student'")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.lr1_steps + self.lr2_steps

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def lr_at(self, step: int) -> float:
        return self.lr1 if step < self.lr1_steps else self.lr2

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    n_source: int = 200
    n_target: int = 200
    n_eval: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.n_source, self.n_target, self.n_eval) < 1:
            raise ConfigError("data.n_source / n_target / n_eval must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    nms_iou: float = 0.3
    sweep: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    dump_threshold: float = 0.6
    top_k_rule: str = "gt_count"

    def __post_init__(self):
        object.__setattr__(self, "sweep", tuple(float(v) for v in self.sweep))
        if not 0 < self.iou_threshold < 1:
            raise ConfigError("eval.iou_threshold must be in (0, 1)")
        if self.top_k_rule not in ("gt_count", "all"):
            raise ConfigError("eval.top_k_rule must be 'gt_count' or 'all'")


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShiftSpec = field(default_factory=lambda: shift_preset("strong"))
    shift_preset: str | None = "strong"
    data: DataConfig = field(default_factory=DataConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple = (0, 1, 2)
    out: str = "runs"

    def __post_init__(self):
        if self.model.image_size != self.scene.image_size:
            raise ConfigError("model.image_size must equal scene.image_size")
        if self.model.num_classes != self.scene.num_classes:
            raise ConfigError("model.num_classes must equal scene.num_classes")

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "out": self.out,
            "scene": dataclasses.asdict(self.scene),
            "shift": {"preset": self.shift_preset, **self.shift.to_dict()},
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "train": _train_dict(self.train),
            "eval": {**dataclasses.asdict(self.eval), "sweep": list(self.eval.sweep)},
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _train_dict(t: TrainConfig) -> dict:
    d = dataclasses.asdict(t)
    d["lambda"] = d.pop("lambda_")
    return d


def _strict(section: str, cls, raw: dict, rename: dict | None = None) -> dict:
    rename = rename or {}
    known = {f.name for f in fields(cls)}
    out = {}
    for k, v in raw.items():
        name = rename.get(k, k)
        if name not in known or name in rename.values() and k not in rename:
            raise ConfigError(f"unknown key '{section}.{k}'")
        out[name] = v
    return out


def _build(section: str, cls, raw: dict, rename=None):
    kw = _strict(section, cls, raw, rename)
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"invalid [{section}] section: {e}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    top = {"scene", "shift", "data", "model", "train", "eval", "seeds", "out"}
    for k in raw:
        if k not in top:
            raise ConfigError(f"unknown key '{k}'")
    scene = _build("scene", SceneSpec, raw.get("scene", {}))

    shift_raw = dict(raw.get("shift", {}))
    preset = shift_raw.pop("preset", "strong" if not shift_raw else None)
    base = shift_preset(preset).to_dict() if preset else {}
    _strict("shift", DomainShiftSpec, shift_raw)
    shift = _build("shift", DomainShiftSpec, {**base, **shift_raw})
    if shift_raw:
        preset = None if preset is None else f"{preset}+overrides"

    data = _build("data", DataConfig, raw.get("data", {}))
    model_raw = {"image_size": scene.image_size, "num_classes": scene.num_classes,
                 **raw.get("model", {})}
    model = _build("model", ArchConfig, model_raw)

    train_raw = dict(raw.get("train", {}))
    aug = _build("train.augment", AugConfig, train_raw.pop("augment", {}))
    train = _build("train", TrainConfig, {**train_raw, "augment": aug}, {"lambda": "lambda_"})
    ev = _build("eval", EvalConfig, raw.get("eval", {}))
    seeds = tuple(int(s) for s in raw.get("seeds", (0, 1, 2)))
    if not seeds:
        raise ConfigError("seeds must be a non-empty list")
    return ExperimentConfig(scene, shift, preset, data, model, train, ev, seeds,
                            str(raw.get("out", "runs")))


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_env(raw: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    raw = json.loads(json.dumps(raw))  # deep copy
    for key, val in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = raw
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {key} does not name a config key")
        node[path[-1]] = _parse_value(val)
    return raw


def load_config(path=None, environ=None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_dict(apply_env(raw, environ))
