"""Synthetic two-domain shapes benchmark and a parametric invertible translator.

Source scenes are light, noisy backgrounds with dark filled shapes (circle,
square, triangle).  The target domain is produced by :func:`apply_shift`, an
affine colour map plus texture overlay and low-frequency noise;
:func:`invert_shift` maps target images back ("source-like") with a
controllable imperfection ``epsilon``.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import iou_matrix
from .params import ConfigError

log = logging.getLogger(__name__)

DOMAINS = ("Source", "Target", "SourceLike", "TargetLike")
SPLITS = ("source_train", "target_train", "target_test", "source_like", "target_like")
CLASS_NAMES = ("circle", "square", "triangle")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 8
    max_size: int = 14
    background: str = "gradient"

    def __post_init__(self):
        if self.num_classes < 1 or self.num_classes > len(CLASS_NAMES):
            raise ConfigError(f"scene.num_classes must be in 1..{len(CLASS_NAMES)}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("scene.min_objects must be <= scene.max_objects")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ConfigError("scene object sizes must fit inside the image")
        if self.background not in ("gradient", "flat"):
            raise ConfigError("scene.background must be 'gradient' or 'flat'")


@dataclass(frozen=True)
class DomainShiftSpec:
    color_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    color_offset: tuple = (0.0, 0.0, 0.0)
    noise_amplitude: float = 0.0
    noise_cell: int = 8
    texture: str = "none"
    texture_strength: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.color_matrix, dtype=np.float64)
        if m.shape != (3, 3) or len(self.color_offset) != 3:
            raise ConfigError("shift.color_matrix must be 3x3 and shift.color_offset length 3")
        object.__setattr__(self, "color_matrix", tuple(map(tuple, m.tolist())))
        object.__setattr__(self, "color_offset", tuple(float(v) for v in self.color_offset))
        if self.epsilon < 0:
            raise ConfigError("shift.epsilon must be >= 0")
        if self.noise_amplitude < 0 or self.texture_strength < 0:
            raise ConfigError("shift noise/texture amplitudes must be >= 0")
        if self.texture not in TEXTURES:
            raise ConfigError(f"shift.texture must be one of {sorted(TEXTURES)}")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.color_matrix, dtype=np.float64)

    @property
    def offset(self) -> np.ndarray:
        return np.asarray(self.color_offset, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["color_matrix"] = [list(r) for r in self.color_matrix]
        d["color_offset"] = list(self.color_offset)
        return d


def _stripes(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.sin(2 * np.pi * (xx + yy) / 6.0)


def _checker(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.where(((xx // 4) + (yy // 4)) % 2 == 0, 1.0, -1.0)


TEXTURES = {"none": None, "stripes": _stripes, "checker": _checker}

# channel cycle with the red output inverted; dark shapes turn reddish-light
_STRONG = (
    (0.0, 0.0, -0.8),
    (0.8, 0.0, 0.0),
    (0.0, 0.8, 0.0),
)
PRESETS = {
    "identity": DomainShiftSpec(),
    "mild": DomainShiftSpec(
        color_matrix=((0.85, 0.10, 0.05), (0.05, 0.85, 0.10), (0.10, 0.05, 0.85)),
        color_offset=(0.02, 0.0, 0.05), noise_amplitude=0.02, epsilon=0.02),
    "strong": DomainShiftSpec(
        color_matrix=_STRONG, color_offset=(0.98, 0.2, 0.0), noise_amplitude=0.04,
        texture="stripes", texture_strength=0.08, epsilon=0.02),
}


def shift_preset(name: str) -> DomainShiftSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown shift preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class AnnotatedScene:
    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    domain: str = "Source"
    id: str = ""
    parent: str | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    def annotation(self) -> dict:
        d = {"id": self.id, "boxes": self.boxes.tolist(),
             "classes": self.classes.tolist(), "domain": self.domain}
        if self.parent is not None:
            d["parent"] = self.parent
        return d

    def translated(self, image, domain, id, parent=None) -> "AnnotatedScene":
        return AnnotatedScene(image, self.boxes.copy(), self.classes.copy(), domain, id,
                              parent if parent is not None else self.id)


# -- rendering --------------------------------------------------------------

def _shape_mask(cls: int, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if cls == 1:
        r = size / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if cls == 2:
        return np.ones((size, size), dtype=bool)
    # isosceles triangle, apex at top centre, base on the bottom row
    half = 0.5 * size * yy / size
    return np.abs(xx - size / 2.0) <= half + 0.5


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    base = rng.uniform(0.6, 0.85, size=3)
    img = np.broadcast_to(base, (n, n, 3)).copy()
    if spec.background == "gradient":
        gy, gx = rng.uniform(-0.1, 0.1, size=2)
        ramp = (np.arange(n) / (n - 1) - 0.5)
        img += gy * ramp[:, None, None] + gx * ramp[None, :, None]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def render_scene(spec: SceneSpec, rng_seed, max_retries: int = 50) -> AnnotatedScene:
    """Render one source-domain scene; deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    n = spec.image_size
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    while True:
        placed, ok = [], True
        for _ in range(n_obj):
            for _ in range(max_retries):
                size = int(rng.integers(spec.min_size, spec.max_size + 1))
                x = int(rng.integers(0, n - size + 1))
                y = int(rng.integers(0, n - size + 1))
                cand = np.array([[x - 1, y - 1, size + 2, size + 2]], dtype=np.float64)
                if not placed or iou_matrix(cand, np.array([p[:4] for p in placed])).max() == 0:
                    placed.append((x, y, size, size, int(rng.integers(1, spec.num_classes + 1))))
                    break
            else:
                ok = False
                break
        if ok:
            break
        n_obj -= 1  # unplaceable: regenerate with fewer objects

    img = _background(spec, rng)
    boxes, classes = [], []
    for x, y, size, _, cls in placed:
        mask = _shape_mask(cls, size)
        color = rng.uniform(0.05, 0.45, size=3)
        img[y:y + size, x:x + size][mask] = color + rng.normal(0, 0.02, size=(int(mask.sum()), 3))
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        boxes.append((x + cols[0], y + rows[0], cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1))
        classes.append(cls)
    return AnnotatedScene(np.clip(img, 0.0, 1.0), np.array(boxes, dtype=np.float64).reshape(-1, 4),
                          np.array(classes, dtype=np.int64), "Source")


# -- translation ------------------------------------------------------------

def structured_noise(shape, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-scale low-frequency noise by bilinear upsampling."""
    h, w, c = shape
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.normal(0.0, 1.0, size=(gh, gw, c))
    fy = (np.arange(h) + 0.5) / cell
    fx = (np.arange(w) + 0.5) / cell
    y0, x0 = np.floor(fy).astype(int), np.floor(fx).astype(int)
    ty, tx = (fy - y0)[:, None, None], (fx - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - ty) * ((1 - tx) * g00 + tx * g01) + ty * ((1 - tx) * g10 + tx * g11)


def _texture(shift: DomainShiftSpec, h: int, w: int) -> np.ndarray:
    fn = TEXTURES[shift.texture]
    if fn is None or shift.texture_strength == 0:
        return np.zeros((h, w, 1))
    return shift.texture_strength * fn(h, w)[:, :, None]


def apply_shift(image: np.ndarray, shift: DomainShiftSpec, rng_seed) -> np.ndarray:
    """Translate a source-style image into the target style."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    out = image @ shift.matrix.T + shift.offset + _texture(shift, h, w)
    if shift.noise_amplitude > 0:
        rng = np.random.default_rng(rng_seed)
        out = out + shift.noise_amplitude * structured_noise(image.shape, shift.noise_cell, rng)
    return np.clip(out, 0.0, 1.0)


def invert_shift(image: np.ndarray, shift: DomainShiftSpec, rng_seed) -> np.ndarray:
    """Map a target-style image back to the source style.

    The colour map is inverted analytically and the texture removed; the
    additive noise has zero mean so nothing is subtracted for it.  Fresh
    structured noise of amplitude ``shift.epsilon`` models imperfect
    translation.
    """
    m = shift.matrix
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > 1e3:
        raise ConfigError(f"shift.color_matrix is ill-conditioned (cond={cond:.3g})")
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    out = (image - shift.offset - _texture(shift, h, w)) @ np.linalg.inv(m).T
    if shift.epsilon > 0:
        rng = np.random.default_rng(rng_seed)
        out = out + shift.epsilon * structured_noise(image.shape, shift.noise_cell, rng)
    return np.clip(out, 0.0, 1.0)


# -- datasets on disk -------------------------------------------------------

_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
_PREFIX = {"source_train": "src", "target_train": "tgt", "target_test": "tst",
           "source_like": "slk", "target_like": "tlk"}


def _seed(seed: int, split: str, index: int, salt: int = 0) -> list[int]:
    return [int(seed), _SPLIT_CODE[split], int(index), salt]


def build_splits(spec: SceneSpec, shift: DomainShiftSpec, n_source: int, n_target: int,
                 n_eval: int, seed: int) -> dict[str, list[AnnotatedScene]]:
    if min(n_source, n_target, n_eval) < 1:
        raise ConfigError("dataset sizes must all be >= 1")
    out: dict[str, list[AnnotatedScene]] = {s: [] for s in SPLITS}
    for i in range(n_source):
        sc = render_scene(spec, _seed(seed, "source_train", i))
        sc.id = f"src_{i:05d}"
        out["source_train"].append(sc)
        img = apply_shift(sc.image, shift, _seed(seed, "target_like", i))
        out["target_like"].append(sc.translated(img, "TargetLike", f"tlk_{i:05d}"))
    for split, n in (("target_train", n_target), ("target_test", n_eval)):
        for i in range(n):
            sc = render_scene(spec, _seed(seed, split, i))
            img = apply_shift(sc.image, shift, _seed(seed, split, i, 1))
            out[split].append(AnnotatedScene(img, sc.boxes, sc.classes, "Target",
                                             f"{_PREFIX[split]}_{i:05d}"))
    for i, sc in enumerate(out["target_train"]):
        img = invert_shift(sc.image, shift, _seed(seed, "source_like", i))
        out["source_like"].append(sc.translated(img, "SourceLike", f"slk_{i:05d}"))
    return out


def source_like_of(scenes: Sequence[AnnotatedScene], shift: DomainShiftSpec,
                   seed: int = 0) -> list[AnnotatedScene]:
    """Source-like translations of a target split, paired scene-for-scene."""
    return [sc.translated(invert_shift(sc.image, shift, [seed, 99, i]), "SourceLike",
                          f"slk_{sc.id}")
            for i, sc in enumerate(scenes)]


def write_split(root: Path, split: str, scenes: Sequence[AnnotatedScene]) -> None:
    d = root / split
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "raw").mkdir(exist_ok=True)
    with open(d / "annotations.jsonl", "w") as fh:
        for sc in scenes:
            fh.write(json.dumps(sc.annotation()) + "\n")
            (d / "raw" / f"{sc.id}.bin").write_bytes(sc.image.astype("<f8").tobytes())
            Image.fromarray(to_uint8(sc.image)).save(d / "images" / f"{sc.id}.png")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def generate_datasets(root, spec: SceneSpec, shift: DomainShiftSpec, n_source: int,
                      n_target: int, n_eval: int, seed: int, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} already exists; pass --force to overwrite")
        shutil.rmtree(root)
    splits = build_splits(spec, shift, n_source, n_target, n_eval, seed)
    root.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_split(root, name, splits[name])
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "scene": asdict(spec),
        "shift": shift.to_dict(),
        "counts": {k: len(v) for k, v in splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote dataset to %s (%s)", root, manifest["counts"])
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run gen-data first")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list[AnnotatedScene]:
    man = read_manifest(root)
    n = man["scene"]["image_size"]
    d = Path(root) / split
    scenes = []
    with open(d / "annotations.jsonl") as fh:
        for line in fh:
            a = json.loads(line)
            img = np.frombuffer((d / "raw" / f"{a['id']}.bin").read_bytes(), dtype="<f8")
            scenes.append(AnnotatedScene(img.reshape(n, n, 3).copy(), a["boxes"], a["classes"],
                                         a["domain"], a["id"], a.get("parent")))
    return scenes


def load_datasets(root) -> dict[str, list[AnnotatedScene]]:
    return {s: load_split(root, s) for s in SPLITS}
