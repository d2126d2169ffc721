"""Architecture config and the flat, block-partitioned parameter vector."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

BLOCKS = ("backbone", "rpn_head", "roi_head", "conf_head")


class ConfigError(ValueError):
    """Raised for invalid or incompatible configuration."""


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    num_classes: int = 3
    channels: tuple = (12, 16, 24)
    strides: tuple = (2, 2, 1)
    hidden: int = 32
    anchor_sizes: tuple = (12.0,)
    aspect_ratios: tuple = (1.0,)
    num_proposals: int = 12
    rpn_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    rpn_delta_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    roi_delta_weights: tuple = (5.0, 5.0, 2.5, 2.5)
    conf_clamp: float = 15.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        for name in ("channels", "strides", "anchor_sizes", "aspect_ratios",
                     "rpn_delta_weights", "roi_delta_weights"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not 2 <= len(self.channels) <= 3 or len(self.strides) != len(self.channels):
            raise ConfigError("model.channels needs 2-3 layers with matching strides")
        if self.num_classes < 1:
            raise ConfigError("model.num_classes must be >= 1")
        if self.image_size % self.stride != 0:
            raise ConfigError(f"model.image_size must be divisible by total stride {self.stride}")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feat_size(self) -> int:
        return self.image_size // self.stride

    @property
    def num_anchors_per_cell(self) -> int:
        return len(self.anchor_sizes) * len(self.aspect_ratios)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def layout(self) -> list[tuple[str, str, tuple]]:
        """Ordered ``(block, tensor_name, shape)`` triples."""
        out = []
        cin = 3
        for i, c in enumerate(self.channels):
            out.append(("backbone", f"conv{i}.w", (3, 3, cin, c)))
            out.append(("backbone", f"conv{i}.b", (c,)))
            cin = c
        a = self.num_anchors_per_cell
        out.append(("rpn_head", "rpn.w", (cin, 5 * a)))
        out.append(("rpn_head", "rpn.b", (5 * a,)))
        k = self.num_classes + 1
        out.append(("roi_head", "fc.w", (cin + 4, self.hidden)))
        out.append(("roi_head", "fc.b", (self.hidden,)))
        out.append(("roi_head", "cls.w", (self.hidden, k)))
        out.append(("roi_head", "cls.b", (k,)))
        out.append(("roi_head", "box.w", (self.hidden, 4)))
        out.append(("roi_head", "box.b", (4,)))
        out.append(("conf_head", "conf.w", (self.hidden, 1)))
        out.append(("conf_head", "conf.b", (1,)))
        return out


@dataclass
class DetectorParams:
    arch: ArchConfig
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64)
        if self.vector.shape != (param_count(self.arch),):
            raise ConfigError(
                f"parameter vector has {self.vector.size} entries, "
                f"architecture needs {param_count(self.arch)}")

    @classmethod
    def zeros(cls, arch: ArchConfig) -> "DetectorParams":
        return cls(arch, np.zeros(param_count(arch)))

    @classmethod
    def init(cls, arch: ArchConfig, seed: int) -> "DetectorParams":
        rng = np.random.default_rng(seed)
        p = cls.zeros(arch)
        t = p.tensors()
        for _, name, shape in arch.layout():
            if not name.endswith(".w"):
                continue
            fan_in = int(np.prod(shape[:-1]))
            std = 1.0 / np.sqrt(fan_in)
            if name.startswith(("cls", "box", "conf")):
                std = 0.01
            t[name][...] = rng.normal(0.0, std, size=shape)
        return p

    def tensors(self) -> dict[str, np.ndarray]:
        """Named views into ``vector`` (writes go through)."""
        return split_vector(self.arch, self.vector)

    def block_slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for block, _, shape in self.arch.layout():
            n = int(np.prod(shape))
            s = out.get(block)
            out[block] = slice(s.start if s else off, off + n)
            off += n
        return out

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.arch, self.vector.copy())

    def check_compatible(self, other: "DetectorParams") -> None:
        if self.arch != other.arch or self.vector.shape != other.vector.shape:
            raise ConfigError("parameter sets have different architectures")


def param_count(arch: ArchConfig) -> int:
    return int(sum(np.prod(shape) for _, _, shape in arch.layout()))


def split_vector(arch: ArchConfig, vec: np.ndarray) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for _, name, shape in arch.layout():
        n = int(np.prod(shape))
        out[name] = vec[off:off + n].reshape(shape)
        off += n
    return out
