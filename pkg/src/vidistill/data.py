"""Synthetic motion-only video datasets, clip sampling and the AVDD file format.

Each source video shows one shape drifting across a static textured
background.  The class is the drift direction (up, down, left, right) and
nothing else: shape, colour, size, start position and background are drawn
independently of the label, and the torus wrap-around keeps every frame's
position uniformly distributed.  A single frame therefore says nothing about
the class; only motion does.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import BadMagicError, ConfigError, DimensionError, FormatError, TruncatedFileError, VersionError

CLASS_NAMES = ("up", "down", "left", "right")
# unit displacement (dy, dx) per class
DIRECTIONS = {0: (-1.0, 0.0), 1: (1.0, 0.0), 2: (0.0, -1.0), 3: (0.0, 1.0)}
HFLIP_LABEL = {0: 0, 1: 1, 2: 3, 3: 2}

MAGIC = b"AVDD"
VERSION = 1
_HEADER = struct.Struct("<4s7I")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    clips_per_class: int = 16
    frames_per_source: int = 48
    height: int = 32
    width: int = 32
    shape_kinds: Tuple[str, ...] = ("square", "disc")
    size_range: Tuple[float, float] = (6.0, 10.0)
    speed_range: Tuple[float, float] = (0.1, 0.2)
    noise_sigma: float = 0.05
    seed: int = 0
    variant_id: str = "A"

    def validate(self) -> None:
        if not 2 <= self.num_classes <= 4:
            raise ConfigError(f"num_classes must be 2..4, got {self.num_classes}")
        if self.clips_per_class < 0:
            raise ConfigError(f"clips_per_class must be >= 0, got {self.clips_per_class}")
        if self.frames_per_source < 1:
            raise ConfigError("frames_per_source must be >= 1")
        if self.variant_id not in BACKGROUNDS:
            raise ConfigError(f"unknown variant {self.variant_id!r}; known: {sorted(BACKGROUNDS)}")
        for kind in self.shape_kinds:
            if kind not in ("square", "disc"):
                raise ConfigError(f"unknown shape kind {kind!r}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid size range {self.size_range}")
        if hi >= min(self.height, self.width):
            raise ConfigError(f"shape size {hi} does not fit a {self.height}x{self.width} frame")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            raise ConfigError(f"invalid speed range {self.speed_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class VideoDataset:
    """Labelled source videos [N, 3, F, H, W] in [0, 1]."""

    videos: np.ndarray
    labels: np.ndarray
    num_classes: int = 4
    source_ids: Optional[np.ndarray] = None
    variant: str = ""

    def __post_init__(self):
        self.videos = np.asarray(self.videos, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.videos.ndim != 5 or (len(self.videos) and self.videos.shape[1] != 3):
            raise DimensionError(f"videos must be [N, 3, F, H, W], got {self.videos.shape}")
        if len(self.labels) != len(self.videos):
            raise DimensionError(f"{len(self.labels)} labels for {len(self.videos)} videos")
        if self.source_ids is None:
            self.source_ids = np.arange(len(self.videos), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.videos)

    def subset(self, idx) -> "VideoDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return VideoDataset(self.videos[idx], self.labels[idx], self.num_classes, self.source_ids[idx], self.variant)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _background_smooth(rng, h, w):
    """Low-frequency colour gradients."""
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    base = rng.uniform(0.25, 0.45, size=3)
    img = np.empty((3, h, w))
    for c in range(3):
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[c] = base[c] + 0.08 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return img


def _background_checker(rng, h, w):
    """Low-contrast checkerboard with random cell size, offset and palette."""
    cell = int(rng.integers(3, 7))
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    parity = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(float)
    c0 = rng.uniform(0.2, 0.4, size=3).reshape(3, 1, 1)
    c1 = c0 + rng.uniform(0.08, 0.16, size=3).reshape(3, 1, 1)
    return c0 + (c1 - c0) * parity


BACKGROUNDS = {"A": _background_smooth, "B": _background_checker}


def _coverage(kind: str, size: float, cy: float, cx: float, h: int, w: int) -> np.ndarray:
    """Anti-aliased occupancy of a shape centred at (cy, cx) on an h x w torus."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy = (yy - cy + h / 2) % h - h / 2
    dx = (xx - cx + w / 2) % w - w / 2
    if kind == "disc":
        dist = np.sqrt(dy * dy + dx * dx) - size / 2
    else:
        dist = np.maximum(np.abs(dy), np.abs(dx)) - size / 2
    return np.clip(0.5 - dist, 0.0, 1.0)


def render_video(rng: np.random.Generator, label: int, spec: SyntheticDatasetSpec) -> np.ndarray:
    """One source video [3, F, H, W].  Only the drift direction depends on ``label``."""
    h, w, f = spec.height, spec.width, spec.frames_per_source
    # all label-independent draws happen first, in a fixed order
    background = BACKGROUNDS[spec.variant_id](rng, h, w)
    kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
    size = rng.uniform(*spec.size_range)
    color = rng.uniform(0.7, 1.0, size=3)
    color[rng.integers(3)] = rng.uniform(0.0, 0.3)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    speed = rng.uniform(*spec.speed_range)
    noise = rng.standard_normal((3, f, h, w)) * spec.noise_sigma
    dy, dx = DIRECTIONS[int(label)]
    video = np.empty((3, f, h, w))
    for t in range(f):
        cov = _coverage(kind, size, cy + dy * speed * t, cx + dx * speed * t, h, w)
        video[:, t] = background * (1 - cov) + color.reshape(3, 1, 1) * cov
    return np.clip(video + noise, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: SyntheticDatasetSpec) -> VideoDataset:
    """Render ``num_classes * clips_per_class`` labelled videos, deterministic in ``spec.seed``."""
    spec.validate()
    n = spec.num_classes * spec.clips_per_class
    videos = np.empty((n, 3, spec.frames_per_source, spec.height, spec.width), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.clips_per_class)
    variant_key = ord(spec.variant_id[0])
    for i in range(n):
        # per-clip streams make generation order-independent
        rng = np.random.default_rng([spec.seed, variant_key, i])
        videos[i] = render_video(rng, labels[i], spec)
    return VideoDataset(videos, labels, spec.num_classes, np.arange(n), spec.variant_id)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def uniform_indices(num_frames: int, length: int) -> np.ndarray:
    """Round-half-up of ``k * (F - 1) / (T - 1)`` for k = 0..T-1."""
    if num_frames < 1:
        raise DimensionError("cannot sample from an empty video")
    if length == 1:
        return np.zeros(1, dtype=np.int64)
    pos = np.arange(length) * (num_frames - 1) / (length - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def sample_clip(video: np.ndarray, length: int = 32, mode: str = "uniform", seed=None) -> np.ndarray:
    """Select ``length`` frames of ``video`` [3, F, H, W] in temporal order."""
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[1] < 1:
        raise DimensionError(f"video must be [3, F, H, W] with F >= 1, got {video.shape}")
    f = video.shape[1]
    if mode == "uniform":
        idx = uniform_indices(f, length)
    elif mode == "random_window":
        if f < length:
            raise DimensionError(f"random_window needs at least {length} frames, video has {f}")
        start = int(np.random.default_rng(seed).integers(0, f - length + 1))
        idx = np.arange(start, start + length)
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    return np.ascontiguousarray(video[:, idx])


def sample_clips(dataset: VideoDataset, length: int = 32, mode: str = "uniform", seed: int = 0) -> np.ndarray:
    """Clips [N, 3, length, H, W] for every video of ``dataset``."""
    out = np.empty((len(dataset), 3, length, *dataset.videos.shape[3:]), dtype=np.float32)
    for i, v in enumerate(dataset.videos):
        out[i] = sample_clip(v, length, mode, seed=[seed, i])
    return out


def build_frame_pool(videos: np.ndarray, pool_size: int, seed: int = 0, replace: bool = False) -> np.ndarray:
    """Uniform sample of single frames [P, 3, H, W] over all (video, frame) pairs."""
    videos = np.asarray(videos)
    if videos.ndim != 5 or len(videos) == 0 or videos.shape[2] == 0:
        raise DimensionError(f"frame pool needs a non-empty [N, 3, F, H, W] array, got {videos.shape}")
    n, _, f = videos.shape[:3]
    total = n * f
    if pool_size > total and not replace:
        raise ConfigError(f"pool_size {pool_size} exceeds {total} available frames; pass replace=True")
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=pool_size, replace=replace)
    return np.ascontiguousarray(videos[flat // f, :, flat % f])


def augment(clip: np.ndarray, label: Optional[int] = None, hflip: bool = True, seed=None,
            force: Optional[bool] = None):
    """Horizontal flip with probability 0.5 (or as ``force`` says).

    Returns ``(clip, label)``; left/right labels swap when the clip is flipped.
    """
    flip = hflip and (force if force is not None else bool(np.random.default_rng(seed).random() < 0.5))
    if not flip:
        return clip, label
    out = np.ascontiguousarray(clip[..., ::-1])
    return out, (HFLIP_LABEL[int(label)] if label is not None else None)


# ---------------------------------------------------------------------------
# AVDD file format
# ---------------------------------------------------------------------------

def save_dataset(dataset: VideoDataset, path) -> None:
    """Write ``AVDD`` v1: header, u32 labels, f32 little-endian pixels."""
    v = dataset.videos
    n = len(v)
    dims = v.shape[1:]
    header = _HEADER.pack(MAGIC, VERSION, n, dataset.num_classes, *[int(d) for d in dims])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(dataset.labels, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_dataset(path) -> VideoDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an AVDD file")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, n, num_classes, c, t, h, w = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported AVDD version {version}")
    label_bytes = 4 * n
    payload = n * c * t * h * w * 4
    expected = _HEADER.size + label_bytes + payload
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    off = _HEADER.size
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    videos = np.frombuffer(raw, dtype="<f4", count=n * c * t * h * w, offset=off + label_bytes)
    videos = videos.astype(np.float32).reshape(n, c, t, h, w)
    return VideoDataset(videos, labels, num_classes)
