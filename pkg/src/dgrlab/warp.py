"""Deformation fields and the image-level re-sampling operator.

A deformation field stores per-pixel displacements in *pixel units*,
shaped (B, 2, H, W) with channel 0 vertical (dy) and channel 1
horizontal (dx). Re-sampling pulls: out(p) = img(p + field(p)) with
bilinear interpolation and clamp-to-border semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DeformationField",
    "AffineParams",
    "FieldStats",
    "identity_field",
    "affine_field",
    "resample",
    "compose",
    "smoothness_penalty",
    "field_stats",
    "export_field_png",
]


@dataclass
class AffineParams:
    """Rotation (degrees, about the image centre), translation as a
    fraction of the image side, and isotropic scale."""

    rotation_deg: float = 0.0
    ty: float = 0.0
    tx: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.ty == 0.0 and self.tx == 0.0 and self.scale == 1.0

    def to_dict(self) -> dict:
        return {"rotation_deg": self.rotation_deg, "ty": self.ty, "tx": self.tx, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineParams":
        return cls(rotation_deg=d["rotation_deg"], ty=d["ty"], tx=d["tx"], scale=d["scale"])


class DeformationField:
    """Wrapper tying a (B, 2, H, W) displacement tensor to its semantics."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: Tensor):
        if tensor.data.ndim != 4 or tensor.data.shape[1] != 2:
            raise T.ShapeError(f"DeformationField needs (B,2,H,W), got {tensor.data.shape}")
        self.tensor = tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    def detached(self) -> "DeformationField":
        return DeformationField(T.detach(self.tensor))


@dataclass
class FieldStats:
    mean_px: float
    max_px: float


def identity_field(b: int, h: int, w: int, dtype=np.float32) -> DeformationField:
    if b < 1 or h < 1 or w < 1:
        raise ValueError(f"identity_field: dims must be positive, got {(b, h, w)}")
    return DeformationField(Tensor(np.zeros((b, 2, h, w), dtype=dtype)))


def affine_field(params: AffineParams, h: int, w: int, b: int = 1,
                 dtype=np.float32) -> DeformationField:
    """Displacement field realizing a rotation/scale about the image
    centre plus a translation: field(p) = A(p - c) + c + t - p.

    Applying it through `resample` pulls img at the mapped coordinates.
    Translation is (ty, tx) in fractions of (H, W); dx = tx * W.
    """
    theta = math.radians(params.rotation_deg)
    s = params.scale
    a00, a01 = s * math.cos(theta), -s * math.sin(theta)
    a10, a11 = s * math.sin(theta), s * math.cos(theta)
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii = np.arange(h, dtype=np.float64)[:, None] - ci
    jj = np.arange(w, dtype=np.float64)[None, :] - cj
    dy = a00 * ii + a01 * jj - ii + params.ty * h
    dx = a10 * ii + a11 * jj - jj + params.tx * w
    field = np.empty((b, 2, h, w), dtype=dtype)
    field[:, 0] = dy
    field[:, 1] = dx
    return DeformationField(Tensor(field))


def resample(image: Tensor, field: DeformationField) -> Tensor:
    """Warp `image` by `field` (the re-sampling operator)."""
    return T.grid_sample(image, field.tensor)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """composed(p) = inner(p) + outer(p + inner(p)), with bilinear
    lookup of the outer field. Satisfies, up to interpolation error,
    resample(resample(img, outer), inner) == resample(img, compose(outer, inner)).
    """
    if outer.shape != inner.shape:
        raise T.ShapeError(f"compose: field shapes differ, {outer.shape} vs {inner.shape}")
    looked_up = T.grid_sample(outer.tensor, inner.tensor)
    return DeformationField(T.add(inner.tensor, looked_up))


def smoothness_penalty(field: DeformationField) -> Tensor:
    """Diffusion regularizer: mean over all forward-difference sites
    (both spatial directions, both displacement channels) of the squared
    difference. Zero for any constant field; resolution-independent.
    """
    f = field.tensor
    b, c, h, w = f.data.shape
    if h < 2 or w < 2:
        raise T.ShapeError(f"smoothness_penalty needs H,W >= 2, got {h}x{w}")
    di = f.data[:, :, 1:, :] - f.data[:, :, :-1, :]
    dj = f.data[:, :, :, 1:] - f.data[:, :, :, :-1]
    n = di.size + dj.size
    value = (np.sum(di * di, dtype=np.float64) + np.sum(dj * dj, dtype=np.float64)) / n

    def bwd(dy):
        if f.requires_grad:
            g = np.zeros_like(f.data)
            sdi = (2.0 * dy / n) * di
            sdj = (2.0 * dy / n) * dj
            g[:, :, 1:, :] += sdi
            g[:, :, :-1, :] -= sdi
            g[:, :, :, 1:] += sdj
            g[:, :, :, :-1] -= sdj
            T._accum(f, g, own=True)

    return T._result(np.asarray(value, dtype=f.data.dtype), (f,), bwd)


def field_stats(field: DeformationField) -> FieldStats:
    """Mean and max per-pixel Euclidean displacement, in pixels."""
    d = field.tensor.data
    mag = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2, dtype=np.float64)
    return FieldStats(mean_px=float(mag.mean()), max_px=float(mag.max()))


def export_field_png(field: DeformationField, path_prefix: str) -> str:
    """Write the field's first batch item as an 8-bit PNG: dy -> R,
    dx -> G, mapping [-maxdisp, +maxdisp] -> [0, 255]. maxdisp goes in
    the filename so the PNG is self-describing. Returns the path."""
    from PIL import Image

    d = field.tensor.data[0]
    maxdisp = float(np.abs(d).max())
    if maxdisp == 0.0:
        maxdisp = 1.0
    scaled = np.clip((d / maxdisp + 1.0) * 127.5, 0, 255).astype(np.uint8)
    rgb = np.zeros((d.shape[1], d.shape[2], 3), dtype=np.uint8)
    rgb[:, :, 0] = scaled[0]
    rgb[:, :, 1] = scaled[1]
    path = f"{path_prefix}_maxdisp{maxdisp:.4f}.png"
    Image.fromarray(rgb).save(path)
    return path
