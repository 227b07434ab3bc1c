"""Encoder, decoder and teacher networks.

The encoder halves the temporal axis in each of its five 3D-conv blocks
(32 -> 16 -> 8 -> 4 -> 2 -> 1) while keeping full spatial resolution, so its
output is a 3-channel image the size of the input frames.  The decoder mirrors
it with transposed convolutions; the teacher is a five-layer perceptron that
scores images as real frames or distilled ones.

Parameters are plain ordered dicts of :class:`~vidistill.tensor.Tensor`, keyed
``"<network>.<block>.<name>"``.  Block geometry is recovered from kernel
shapes, so the forward functions need no separate architecture object.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

Params = Dict[str, T.Tensor]

CLIP_FRAMES = 32
TEMPORAL_STRIDE = 2
LEAKY_ALPHA = 0.2
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ArchConfig:
    height: int = 32
    width: int = 32
    widths: Tuple[int, ...] = (3, 16, 32, 32, 16, 3)
    kernel_hw: int = 5
    kernel_t: int = 3
    teacher_hidden: Tuple[int, ...] = (256, 128, 64, 32)

    def validate(self) -> None:
        if len(self.widths) != 6 or self.widths[0] != 3 or self.widths[-1] != 3:
            raise ConfigError(f"encoder widths must be 6 values starting and ending with 3, got {self.widths}")
        if len(self.teacher_hidden) != 4:
            raise ConfigError(f"teacher needs 4 hidden widths (5 layers), got {self.teacher_hidden}")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"frames must be at least 8x8, got {self.height}x{self.width}")
        if self.kernel_hw % 2 != 1:
            raise ConfigError("spatial kernel size must be odd for same padding")


def block_temporal_kernels(arch: ArchConfig):
    """Temporal kernel per encoder block; the last block maps 2 frames to 1."""
    return [arch.kernel_t] * 4 + [2]


def _conv_geometry(kshape):
    kt, kh, kw = kshape[2:]
    return (TEMPORAL_STRIDE, 1, 1), ((kt - 1) // 2, kh // 2, kw // 2)


def _normal(rng, shape, std, dtype):
    return T.Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def init_params(seed: int, arch: ArchConfig = ArchConfig(), dtype=np.float32) -> Tuple[Params, Params, Params]:
    """Deterministic initialisation of (encoder, decoder, teacher).

    He scaling for layers followed by (leaky) ReLU, Xavier for the sigmoid
    output layers, zero biases, batch-norm gamma 1 and beta 0.
    """
    arch.validate()
    counter = iter(range(10_000))

    def rng():
        return np.random.default_rng([seed, next(counter)])

    enc: Params = OrderedDict()
    dec: Params = OrderedDict()
    tea: Params = OrderedDict()
    w, k = arch.widths, arch.kernel_hw
    kts = block_temporal_kernels(arch)
    for i in range(5):
        cin, cout, kt = w[i], w[i + 1], kts[i]
        fan_in, fan_out = cin * kt * k * k, cout * kt * k * k
        std = np.sqrt(2.0 / fan_in) if i < 4 else np.sqrt(2.0 / (fan_in + fan_out))
        enc[f"encoder.{i}.kernel"] = _normal(rng(), (cout, cin, kt, k, k), std, dtype)
        enc[f"encoder.{i}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        if i < 4:
            _add_bn(enc, f"encoder.{i}", cout, dtype)

    dw = w[::-1]
    dkts = kts[::-1]
    for i in range(5):
        cin, cout, kt = dw[i], dw[i + 1], dkts[i]
        # each output voxel of a temporally strided transposed conv sees about kt/stride input taps
        taps = cin * max(kt // TEMPORAL_STRIDE, 1) * k * k
        std = np.sqrt(2.0 / taps) if i < 4 else np.sqrt(2.0 / (taps + cout * k * k))
        dec[f"decoder.{i}.kernel"] = _normal(rng(), (cin, cout, kt, k, k), std, dtype)
        dec[f"decoder.{i}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        if i < 4:
            _add_bn(dec, f"decoder.{i}", cout, dtype)

    sizes = (3 * arch.height * arch.width, *arch.teacher_hidden, 1)
    for i in range(5):
        fi, fo = sizes[i], sizes[i + 1]
        std = np.sqrt(2.0 / fi) if i < 4 else np.sqrt(2.0 / (fi + fo))
        tea[f"teacher.{i}.weight"] = _normal(rng(), (fi, fo), std, dtype)
        tea[f"teacher.{i}.bias"] = T.Tensor(np.zeros(fo), requires_grad=True, dtype=dtype)
    return enc, dec, tea


def _add_bn(params: Params, prefix: str, c: int, dtype) -> None:
    params[f"{prefix}.bn_gamma"] = T.Tensor(np.ones(c), requires_grad=True, dtype=dtype)
    params[f"{prefix}.bn_beta"] = T.Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
    params[f"{prefix}.bn_mean"] = T.Tensor(np.zeros(c), dtype=dtype)
    params[f"{prefix}.bn_var"] = T.Tensor(np.ones(c), dtype=dtype)


def trainable(params: Params) -> Params:
    return OrderedDict((k, v) for k, v in params.items() if v.requires_grad)


def _bn(params: Params, prefix: str, x: T.Tensor, training: bool, momentum: float) -> T.Tensor:
    return T.batchnorm(x, params[f"{prefix}.bn_gamma"], params[f"{prefix}.bn_beta"],
                       params[f"{prefix}.bn_mean"], params[f"{prefix}.bn_var"], training=training,
                       momentum=momentum)


def _as_batch(x, ndim: int, what: str):
    x = T.as_tensor(x)
    if x.ndim == ndim - 1:
        return T.reshape(x, (1, *x.shape)), True
    if x.ndim != ndim:
        raise DimensionError(f"{what}: expected {ndim - 1}-d or batched {ndim}-d input, got {x.shape}")
    return x, False


def encode(params: Params, clip, training: bool = False, bn_momentum: float = BN_MOMENTUM) -> T.Tensor:
    """Distil clip(s) [3,32,H,W] or [N,3,32,H,W] into image(s) [3,H,W] / [N,3,H,W].

    ``training`` selects batch statistics in the batch-norm layers (and
    updates their running estimates with weight ``bn_momentum``).
    """
    x, single = _as_batch(clip, 5, "encode")
    n, c, t, h, w = x.shape
    if c != 3 or t != CLIP_FRAMES:
        raise DimensionError(f"encode: clips must be [3, {CLIP_FRAMES}, H, W], got {x.shape[1:]}")
    if h < 8 or w < 8:
        raise DimensionError(f"encode: frames must be at least 8x8, got {h}x{w}")
    for i in range(5):
        kernel = params[f"encoder.{i}.kernel"]
        stride, padding = _conv_geometry(kernel.shape)
        x = T.conv3d(x, kernel, params[f"encoder.{i}.bias"], stride, padding)
        if i < 4:
            x = T.relu(_bn(params, f"encoder.{i}", x, training, bn_momentum))
        else:
            x = T.sigmoid(x)
    if x.shape[1:3] != (3, 1):
        raise DimensionError(f"encoder produced {x.shape}; expected 3 channels and 1 frame")
    x = T.reshape(x, (n, 3, h, w))
    return T.reshape(x, (3, h, w)) if single else x


def decode(params: Params, image, training: bool = False, bn_momentum: float = BN_MOMENTUM) -> T.Tensor:
    """Reconstruct [3,32,H,W] volume(s) from distilled image(s)."""
    x, single = _as_batch(image, 4, "decode")
    n, c, h, w = x.shape
    first = params["decoder.0.kernel"]
    if c != first.shape[0]:
        raise DimensionError(f"decode: image has {c} channels, decoder expects {first.shape[0]}")
    x = T.reshape(x, (n, c, 1, h, w))
    for i in range(5):
        kernel = params[f"decoder.{i}.kernel"]
        stride, padding = _conv_geometry(kernel.shape)
        # restore an exact doubling of the temporal length
        out_pad = (TEMPORAL_STRIDE - kernel.shape[2] + 2 * padding[0], 0, 0)
        x = T.conv3d_transpose(x, kernel, params[f"decoder.{i}.bias"], stride, padding, out_pad)
        if i < 4:
            x = T.leaky_relu(_bn(params, f"decoder.{i}", x, training, bn_momentum), LEAKY_ALPHA)
        else:
            x = T.sigmoid(x)
    if x.shape[2] != CLIP_FRAMES:
        raise DimensionError(f"decoder produced {x.shape[2]} frames, expected {CLIP_FRAMES}")
    return T.reshape(x, x.shape[1:]) if single else x


def discriminate(params: Params, image) -> T.Tensor:
    """Probability that each image is a real frame; returns shape [N] (or [] for one image)."""
    x, single = _as_batch(image, 4, "discriminate")
    n = x.shape[0]
    x = T.reshape(x, (n, -1))
    first = params["teacher.0.weight"]
    if x.shape[1] != first.shape[0]:
        raise DimensionError(f"teacher expects input width {first.shape[0]}, got {x.shape[1]}")
    for i in range(5):
        x = T.bias_add(T.matmul(x, params[f"teacher.{i}.weight"]), params[f"teacher.{i}.bias"])
        x = T.relu(x) if i < 4 else T.sigmoid(x)
    return T.reshape(x, ()) if single else T.reshape(x, (n,))


@dataclass
class AVDModel:
    """The three parameter sets trained together."""

    encoder: Params = field(default_factory=OrderedDict)
    decoder: Params = field(default_factory=OrderedDict)
    teacher: Params = field(default_factory=OrderedDict)

    @classmethod
    def create(cls, seed: int, arch: ArchConfig = ArchConfig(), dtype=np.float32) -> "AVDModel":
        return cls(*init_params(seed, arch, dtype))

    def all_params(self) -> Params:
        out: Params = OrderedDict()
        for group in (self.encoder, self.decoder, self.teacher):
            out.update(group)
        return out

    @classmethod
    def from_params(cls, params: Params) -> "AVDModel":
        model = cls()
        for name, t in params.items():
            group = name.split(".", 1)[0]
            if group not in ("encoder", "decoder", "teacher"):
                raise ConfigError(f"unexpected parameter group in {name!r}")
            getattr(model, group)[name] = t
        return model
