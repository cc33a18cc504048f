"""Controlled misalignment injection: five graded levels of random
rotation / translation / rescaling applied to the *input* image of a
pair, with the ground-truth transform retained for evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .warp import AffineParams, affine_field, resample

__all__ = ["MisalignmentSpec", "level_spec", "sample_affine", "apply_misalignment"]

# level -> (rotation deg, translation fraction, rescale fraction), all +/-
_LEVELS = {
    0: (0.0, 0.0, 0.0),
    1: (1.0, 0.02, 0.02),
    2: (2.0, 0.04, 0.04),
    3: (3.0, 0.06, 0.06),
    4: (4.0, 0.08, 0.08),
    5: (5.0, 0.10, 0.10),
}


@dataclass(frozen=True)
class MisalignmentSpec:
    level: int
    rot_max: float
    trans_max: float
    scale_max: float


def level_spec(level: int) -> MisalignmentSpec:
    if level not in _LEVELS:
        raise ValueError(f"misalignment level must be 0..5, got {level}")
    r, t, s = _LEVELS[level]
    return MisalignmentSpec(level=level, rot_max=r, trans_max=t, scale_max=s)


def sample_affine(spec: MisalignmentSpec, rng: np.random.Generator) -> AffineParams:
    """Uniform draws within the level bounds.

    Four unit draws (rotation, ty, tx, scale) are taken in a fixed
    order and scaled by the bounds, so the same rng state produces the
    same underlying noise at every level -- levels differ only in
    amplitude. Level 0 returns the exact identity.
    """
    u = rng.uniform(-1.0, 1.0, size=4)
    return AffineParams(
        rotation_deg=float(u[0] * spec.rot_max),
        ty=float(u[1] * spec.trans_max),
        tx=float(u[2] * spec.trans_max),
        scale=float(1.0 + u[3] * spec.scale_max),
    )


def _center_crop(img: np.ndarray, crop: int) -> np.ndarray:
    h, w = img.shape[-2:]
    i0 = (h - crop) // 2
    j0 = (w - crop) // 2
    return np.ascontiguousarray(img[..., i0:i0 + crop, j0:j0 + crop])


def apply_misalignment(pair, params: AffineParams, crop: int):
    """Warp the pair's input image by `params`, then centre-crop every
    image of the pair to crop x crop. The target (and ideal target) are
    never warped. Returns a new pair carrying `params` as ground truth.
    """
    from .synthdata import ImagePair  # local import to avoid a cycle

    h, w = pair.x.shape[-2:]
    if crop > min(h, w):
        raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
    if crop % 16:
        raise ValueError(f"crop must be divisible by 16, got {crop}")

    if params.is_identity:
        warped = pair.x
    else:
        fld = affine_field(params, h, w)
        warped = resample(T.Tensor(pair.x[None]), fld).data[0]

    return ImagePair(
        x=_center_crop(warped, crop),
        y=_center_crop(pair.y, crop),
        y_ideal=None if pair.y_ideal is None else _center_crop(pair.y_ideal, crop),
        gt_affine=params,
        split=pair.split,
    )
