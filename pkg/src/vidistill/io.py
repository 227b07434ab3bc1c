"""Checkpoint files, PPM image export and the plain-text run configuration."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import BadMagicError, ConfigError, FormatError, TruncatedFileError, VersionError
from .training import TrainConfig

CKPT_MAGIC = b"AVDC"
CKPT_VERSION = 1
_NON_TRAINABLE_SUFFIXES = (".bn_mean", ".bn_var")


def checkpoint_bytes(params: Dict[str, T.Tensor]) -> bytes:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        data = np.require(t.data, dtype="<f4", requirements="C")  # keeps 0-d arrays 0-d
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def save_checkpoint(params: Dict[str, T.Tensor], path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> "OrderedDict[str, T.Tensor]":
    """Read an ``AVDC`` file.  Batch-norm running statistics come back non-trainable."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not an AVDC checkpoint")
    r = _Reader(raw, path)
    r.take(4)
    version, count = r.unpack("<II")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    params: "OrderedDict[str, T.Tensor]" = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name in params:
            raise FormatError(f"{path}: duplicate entry {name!r}")
        params[name] = T.Tensor(data, requires_grad=not name.endswith(_NON_TRAINABLE_SUFFIXES), dtype=np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return params


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """[3,H,W] floats in [0,1] -> uint8 [H,W,3] with round-half-up."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def ppm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM export needs a [3,H,W] image, got {image.shape}")
    h, w = image.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(quantize(image)).tobytes()


def write_ppm(image: np.ndarray, path) -> None:
    Path(path).write_bytes(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    """Parse a P6 file written by :func:`write_ppm`; returns uint8 [H,W,3]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise FormatError(f"{path}: unsupported PPM header")
    w, h = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != w * h * 3:
        raise TruncatedFileError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    train_data: Optional[str] = None
    test_data: Optional[str] = None
    output_dir: str = "."
    pool_size: int = 0
    widths: Tuple[int, ...] = (3, 16, 32, 32, 16, 3)


def _float(v: str) -> float:
    return float(v)


def _widths(v: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in v.replace(",", " ").split())


# key -> (attribute path, parser).  Defaults come from the dataclasses.
_KEYS = {
    "lambda": ("train.lam", _float),
    "lr": ("train.lr", _float),
    "teacher_lr": ("train.teacher_lr", _float),
    "momentum": ("train.momentum", _float),
    "lr_decay": ("train.lr_decay", _float),
    "epochs": ("train.epochs", int),
    "batch_size": ("train.batch_size", int),
    "seed": ("train.seed", int),
    "teacher_updates": ("train.teacher_updates_per_batch", int),
    "train_data": ("train_data", str),
    "test_data": ("test_data", str),
    "output_dir": ("output_dir", str),
    "pool_size": ("pool_size", int),
    "widths": ("widths", _widths),
}


def parse_run_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Unknown or repeated keys and malformed values raise :class:`ConfigError`.
    """
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        seen.add(key)
        attr, parse = _KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        target = cfg
        *path, last = attr.split(".")
        for p in path:
            target = getattr(target, p)
        setattr(target, last, parsed)
    cfg.train.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_run_config(text)
