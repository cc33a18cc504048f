"""Parameter containers and forward passes for the four networks.

* generator: small U-Net, 3 stride-2 encoder stages (16/32/64 channels),
  bottleneck, 3 decoder stages with skip concatenation, final conv to
  the image channels, tanh squashed into [0, 1];
* discriminator: 4-layer stride-2 patch classifier ending in a 1-channel
  sigmoid map clamped away from {0, 1};
* registration net: U-Net over two concatenated images emitting a
  2-channel displacement field; the final conv is zero-initialized so a
  fresh net is exactly the identity deformation.

Parameters of each network live in one flat float32 buffer (with a
matching flat gradient buffer and Adam moment buffers); the named
tensors the forwards consume are reshaped views into it. That keeps the
optimizer a handful of vectorized ops per network instead of hundreds
of small ones.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .warp import DeformationField

__all__ = [
    "ParamBlock",
    "ModelBundle",
    "init_models",
    "generator_forward",
    "discriminator_forward",
    "regnet_forward",
    "GENERATOR_CHANNELS",
    "REGNET_CHANNELS",
    "DISCRIMINATOR_CHANNELS",
]

GENERATOR_CHANNELS = (16, 32, 64)     # encoder widths, fixed architecture
GENERATOR_DECODER = (16, 8, 8)        # decoder widths (deep to shallow)
REGNET_CHANNELS = (8, 16, 32)
REGNET_DECODER = (16, 8, 8)
DISCRIMINATOR_CHANNELS = (16, 32, 64)

LRELU_SLOPE = 0.2
D_CLAMP = 1e-6  # discriminator outputs stay in [D_CLAMP, 1 - D_CLAMP]


class ParamBlock:
    """Named parameter tensors backed by flat data/grad/moment buffers."""

    def __init__(self, name: str, arrays: dict[str, np.ndarray]):
        self.name = name
        total = int(sum(a.size for a in arrays.values()))
        self.flat = np.zeros(total, dtype=np.float32)
        self.flat_grad = np.zeros(total, dtype=np.float32)
        self.m = np.zeros(total, dtype=np.float32)
        self.v = np.zeros(total, dtype=np.float32)
        self.step_count = 0
        self.tensors: dict[str, Tensor] = {}
        off = 0
        for nm, arr in arrays.items():
            n = arr.size
            self.flat[off:off + n] = arr.ravel()
            t = Tensor(self.flat[off:off + n].reshape(arr.shape), requires_grad=True)
            t.grad = self.flat_grad[off:off + n].reshape(arr.shape)
            self.tensors[nm] = t
            off += n

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def num_params(self) -> int:
        return self.flat.size

    def __getitem__(self, nm: str) -> Tensor:
        return self.tensors[nm]

    def zero_grad(self) -> None:
        self.flat_grad[...] = 0.0

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def checksum(self) -> int:
        return zlib.crc32(self.flat.tobytes())


@dataclass
class ModelBundle:
    """All networks of one training run; absent networks are None."""

    generator: ParamBlock
    discriminator: ParamBlock
    r1: ParamBlock | None = None
    r2: ParamBlock | None = None

    def blocks(self) -> dict[str, ParamBlock]:
        out = {"generator": self.generator, "discriminator": self.discriminator}
        if self.r1 is not None:
            out["r1"] = self.r1
        if self.r2 is not None:
            out["r2"] = self.r2
        return out


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                     slope: float = LRELU_SLOPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_params(rng, arrays, name, cout, cin, k, zero=False, scale=1.0):
    if zero:
        arrays[f"{name}.w"] = np.zeros((cout, cin, k, k), dtype=np.float32)
    else:
        arrays[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin, k, k)) * np.float32(scale)
    arrays[f"{name}.b"] = np.zeros(cout, dtype=np.float32)


def _build_generator(rng, c: int) -> ParamBlock:
    e1, e2, e3 = GENERATOR_CHANNELS
    d3, d2, d1 = GENERATOR_DECODER
    arrays: dict[str, np.ndarray] = {}
    _conv_params(rng, arrays, "enc1", e1, c, 3)
    _conv_params(rng, arrays, "enc2", e2, e1, 3)
    _conv_params(rng, arrays, "enc3", e3, e2, 3)
    _conv_params(rng, arrays, "bott", e3, e3, 3)
    _conv_params(rng, arrays, "dec3", d3, e3 + e2, 3)
    _conv_params(rng, arrays, "dec2", d2, d3 + e1, 3)
    _conv_params(rng, arrays, "dec1", d1, d2 + c, 3)
    _conv_params(rng, arrays, "out", c, d1, 1)
    return ParamBlock("generator", arrays)


def _build_discriminator(rng, c: int) -> ParamBlock:
    c1, c2, c3 = DISCRIMINATOR_CHANNELS
    arrays: dict[str, np.ndarray] = {}
    _conv_params(rng, arrays, "c1", c1, c, 3)
    _conv_params(rng, arrays, "c2", c2, c1, 3)
    _conv_params(rng, arrays, "c3", c3, c2, 3)
    # damped head keeps a fresh D near 0.5 confidence (stable GAN start)
    _conv_params(rng, arrays, "c4", 1, c3, 3, scale=0.3)
    return ParamBlock("discriminator", arrays)


def _build_regnet(rng, c: int, name: str) -> ParamBlock:
    e1, e2, e3 = REGNET_CHANNELS
    d3, d2, d1 = REGNET_DECODER
    arrays: dict[str, np.ndarray] = {}
    _conv_params(rng, arrays, "enc1", e1, 2 * c, 3)
    _conv_params(rng, arrays, "enc2", e2, e1, 3)
    _conv_params(rng, arrays, "enc3", e3, e2, 3)
    _conv_params(rng, arrays, "bott", e3, e3, 3)
    _conv_params(rng, arrays, "dec3", d3, e3 + e2, 3)
    _conv_params(rng, arrays, "dec2", d2, d3 + e1, 3)
    _conv_params(rng, arrays, "dec1", d1, d2, 3)
    _conv_params(rng, arrays, "out", 2, d1, 1, zero=True)  # identity field at init
    return ParamBlock(name, arrays)


def init_models(seed: int, image_channels: int = 3, mode: str = "dgr") -> ModelBundle:
    """Deterministic model construction: same seed, same bytes.

    `mode` controls which networks exist: baseline has neither
    registration net, rnr has only r1, dgr has both.
    """
    gen = _build_generator(np.random.default_rng([seed, 0]), image_channels)
    dis = _build_discriminator(np.random.default_rng([seed, 1]), image_channels)
    r1 = r2 = None
    if mode in ("rnr", "dgr"):
        r1 = _build_regnet(np.random.default_rng([seed, 2]), image_channels, "r1")
    if mode == "dgr":
        r2 = _build_regnet(np.random.default_rng([seed, 3]), image_channels, "r2")
    elif mode not in ("baseline", "rnr"):
        raise ValueError(f"unknown mode {mode!r}")
    return ModelBundle(generator=gen, discriminator=dis, r1=r1, r2=r2)


def _block(p: ParamBlock, name: str, x: Tensor, stride: int, norm: bool = True) -> Tensor:
    h = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=1)
    if norm:
        h = T.instance_norm(h)
    return T.leaky_relu(h, LRELU_SLOPE)


def _check_divisible(h: int, w: int, by: int, who: str) -> None:
    if h % by or w % by:
        raise T.ShapeError(f"{who}: spatial dims {h}x{w} must be divisible by {by}")


def generator_forward(params: ParamBlock, x: Tensor) -> Tensor:
    """U-Net translation; output has the input's shape, values in [0, 1]."""
    _, _, h, w = x.data.shape
    _check_divisible(h, w, 8, "generator_forward")
    h1 = _block(params, "enc1", x, 2)
    h2 = _block(params, "enc2", h1, 2)
    h3 = _block(params, "enc3", h2, 2)
    hb = _block(params, "bott", h3, 1)
    u3 = _block(params, "dec3", T.concat_channels([T.upsample2x(hb), h2]), 1)
    u2 = _block(params, "dec2", T.concat_channels([T.upsample2x(u3), h1]), 1)
    u1 = _block(params, "dec1", T.concat_channels([T.upsample2x(u2), x]), 1)
    out = T.conv2d(u1, params["out.w"], params["out.b"])
    return T.scale_shift(T.tanh(out), 0.5, 0.5)


def discriminator_forward(params: ParamBlock, img: Tensor) -> Tensor:
    """Patch classifier: (B, 1, H/16, W/16) probabilities in
    [1e-6, 1 - 1e-6]."""
    _, _, h, w = img.data.shape
    _check_divisible(h, w, 16, "discriminator_forward")
    h1 = _block(params, "c1", img, 2, norm=False)
    h2 = _block(params, "c2", h1, 2, norm=False)
    h3 = _block(params, "c3", h2, 2, norm=False)
    logits = T.conv2d(h3, params["c4.w"], params["c4.b"], stride=2, padding=1)
    return T.clamp(T.sigmoid(logits), D_CLAMP, 1.0 - D_CLAMP)


def regnet_forward(params: ParamBlock, a: Tensor, b: Tensor) -> DeformationField:
    """Displacement field between two images of identical shape."""
    if a.data.shape != b.data.shape:
        raise T.ShapeError(f"regnet_forward: inputs differ, {a.data.shape} vs {b.data.shape}")
    _, _, h, w = a.data.shape
    _check_divisible(h, w, 8, "regnet_forward")
    x = T.concat_channels([a, b])
    h1 = _block(params, "enc1", x, 2)
    h2 = _block(params, "enc2", h1, 2)
    h3 = _block(params, "enc3", h2, 2)
    hb = _block(params, "bott", h3, 1)
    u3 = _block(params, "dec3", T.concat_channels([T.upsample2x(hb), h2]), 1)
    u2 = _block(params, "dec2", T.concat_channels([T.upsample2x(u3), h1]), 1)
    u1 = _block(params, "dec1", T.upsample2x(u2), 1)
    fld = T.conv2d(u1, params["out.w"], params["out.b"])
    return DeformationField(fld)
