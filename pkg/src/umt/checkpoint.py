"""Versioned binary checkpoint container.

Layout (little-endian)::

    8s   magic  b"UMTCKPT\\0"
    u32  format version
    32s  sha256 digest of the architecture config
    u32  header length, then a UTF-8 JSON header (step, arch, rng scheme, config)
    f8[n] student parameters, f8[n] teacher parameters, f8[n] optimizer velocity
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

from .params import ArchConfig, ConfigError, DetectorParams, param_count

MAGIC = b"UMTCKPT\0"
VERSION = 1


def save(path, state, cfg=None) -> None:
    arch = state.student.arch
    header = {
        "step": int(state.step),
        "arch": arch.to_dict(),
        "n_params": param_count(arch),
        # batches and augmentation draw from generators keyed on (seed, step)
        "rng": {"scheme": "default_rng([seed, step, stream])",
                "seed": None if cfg is None else int(cfg.seed)},
        "config": None if cfg is None else _jsonable(dataclasses.asdict(cfg)),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(bytes.fromhex(arch.digest()))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in (state.student.vector, state.teacher.vector, state.velocity):
            fh.write(np.asarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


def read(path) -> tuple[dict, str, np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[12:44].hex()
    (hlen,) = struct.unpack_from("<I", raw, 44)
    header = json.loads(raw[48:48 + hlen])
    n = header["n_params"]
    arrs = np.frombuffer(raw, dtype="<f8", offset=48 + hlen, count=3 * n).reshape(3, n)
    return header, digest, arrs[0].copy(), arrs[1].copy(), arrs[2].copy()


def arch_of(header: dict) -> ArchConfig:
    return ArchConfig(**header["arch"])


def load(path, arch: ArchConfig | None = None):
    from .engine import TrainState

    header, digest, student, teacher, vel = read(path)
    stored = arch_of(header)
    if digest != stored.digest():
        raise ConfigError(f"{path}: header architecture does not match its digest")
    if arch is not None and arch.digest() != digest:
        raise ConfigError(
            f"architecture digest mismatch: checkpoint {digest} vs config {arch.digest()}")
    return TrainState(DetectorParams(stored, student), DetectorParams(stored, teacher), vel,
                      header["step"])
