"""Objectives for the three training modes.

`baseline` supervises the generator directly with pixel L1 plus an
adversarial term. `rnr` (registration for noise reduction) warps the
generated image onto the noisy target with a registration net before
computing the reconstruction losses, so label misalignment stops
corrupting the gradients. `dgr` adds the position-consistency
constraint: a second registration net, trained adversarially against
the generator, penalizes any spatial drift between the generated image
and the input so the generator is forced to act as a pure appearance
transform.

Two alternating objectives drive training: `objective_g_r1` updates the
generator and the first registration net; `objective_r2` updates the
second registration net to keep predicting the true cross-modal
deformation (otherwise it collapses to the identity and constrains
nothing).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .warp import DeformationField, resample, smoothness_penalty
from .nets import ModelBundle, generator_forward, discriminator_forward, regnet_forward

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "pix2pix_l1",
    "corrected_l1",
    "ssim_index",
    "ssim_loss",
    "adv_generator",
    "adv_discriminator",
    "rnr_total",
    "t1_loss",
    "t2_loss",
    "r2_smoothness",
    "objective_g_r1",
    "objective_r2",
    "check_breakdown",
    "gaussian_taps",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2  # dynamic range L = 1
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Weights of the composite objectives; defaults are the training
    configuration's reference values."""

    alpha: float = 10.0    # reconstruction L1
    beta: float = 0.5      # structural similarity
    gamma: float = 10.0    # field smoothness (all uses)
    delta: float = 0.1     # adversarial
    epsilon: float = 5.0   # position-consistency term in the G step

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    """Per-step scalar record; inactive terms stay 0. `total` always
    equals the documented weighted sum for the active mode."""

    l1: float = 0.0
    ssim: float = 0.0
    smooth_r1: float = 0.0
    adv: float = 0.0
    t1: float = 0.0
    t2: float = 0.0
    t1r: float = 0.0
    t2r: float = 0.0
    total: float = 0.0


def pix2pix_l1(gx: Tensor, y: Tensor) -> Tensor:
    """Plain mean absolute difference between generated and target."""
    return T.l1_mean(gx, y)


def corrected_l1(gx: Tensor, y: Tensor, fld: DeformationField) -> Tensor:
    """L1 after warping the generated image onto the noisy target."""
    return T.l1_mean(resample(gx, fld), y)


def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (g / g.sum()).astype(np.float64)


def _ssim_map(a: Tensor, b: Tensor) -> Tensor:
    taps = gaussian_taps().astype(a.data.dtype)
    mu_a = T.window_mean_valid(a, taps)
    mu_b = T.window_mean_valid(b, taps)
    m_aa = T.window_mean_valid(T.mul(a, a), taps)
    m_bb = T.window_mean_valid(T.mul(b, b), taps)
    m_ab = T.window_mean_valid(T.mul(a, b), taps)
    mu_ab = T.mul(mu_a, mu_b)
    var_a = T.sub(m_aa, T.mul(mu_a, mu_a))
    var_b = T.sub(m_bb, T.mul(mu_b, mu_b))
    cov = T.sub(m_ab, mu_ab)
    lum = T.div(T.scale_shift(mu_ab, 2.0, SSIM_C1),
                T.scale_shift(T.add(T.mul(mu_a, mu_a), T.mul(mu_b, mu_b)), 1.0, SSIM_C1))
    struct = T.div(T.scale_shift(cov, 2.0, SSIM_C2),
                   T.scale_shift(T.add(var_a, var_b), 1.0, SSIM_C2))
    return T.mul(lum, struct)


def ssim_index(a: Tensor, b: Tensor) -> Tensor:
    """Mean structural similarity over an 11x11 Gaussian window
    (sigma 1.5, C1=1e-4, C2=9e-4, unit dynamic range), averaged over
    channels and valid window positions. Range [-1, 1]."""
    T._check_same_shape(a, b, "ssim_index")
    return T.mean(_ssim_map(a, b))


def _ssim_loss_of_warped(warped: Tensor, y: Tensor) -> Tensor:
    s = ssim_index(warped, y)
    return T.scale_shift(T.log_clamped(T.clamp(T.scale_shift(s, 1.0, 1.0), T.LOG_FLOOR, 2.0)), -1.0)


def ssim_loss(gx: Tensor, y: Tensor, fld: DeformationField) -> Tensor:
    """-log(1 + ssim(warped gx, y)), clamped before the log. Range
    [-log 2, -log 1e-6]."""
    return _ssim_loss_of_warped(resample(gx, fld), y)


def adv_generator(d_fake: Tensor) -> Tensor:
    """Non-saturating generator loss: -mean log D(G(x))."""
    return T.scale_shift(T.mean(T.log_clamped(d_fake)), -1.0)


def adv_discriminator(d_fake: Tensor, d_real: Tensor) -> Tensor:
    """-mean[log(1 - D(G(x))) + log D(y)]."""
    fake_term = T.mean(T.log_clamped(T.scale_shift(d_fake, -1.0, 1.0)))
    real_term = T.mean(T.log_clamped(d_real))
    return T.scale_shift(T.add(fake_term, real_term), -1.0)


def rnr_total(l1: Tensor, ssim_l: Tensor, smooth: Tensor, adv: Tensor,
              w: LossWeights) -> Tensor:
    """alpha*L1 + beta*Lssim + gamma*Lsmooth + delta*Ladv."""
    out = T.scale_shift(l1, w.alpha)
    out = T.add(out, T.scale_shift(ssim_l, w.beta))
    out = T.add(out, T.scale_shift(smooth, w.gamma))
    return T.add(out, T.scale_shift(adv, w.delta))


def t1_loss(gx: Tensor, r2_field_self: DeformationField) -> Tensor:
    """Position-consistency residual: warping the generated image by the
    self-registration field should change nothing."""
    return T.l1_mean(resample(gx, r2_field_self), gx)


def t2_loss(gx: Tensor, r2_field_cross: DeformationField,
            r1_field: DeformationField) -> Tensor:
    """Anti-laziness constraint: the cross-modal field applied to the
    generated image must reproduce what the noise-reduction field does."""
    return T.l1_mean(resample(gx, r2_field_cross), resample(gx, r1_field))


def r2_smoothness(field_self: DeformationField,
                  field_cross: DeformationField) -> tuple[Tensor, Tensor]:
    return smoothness_penalty(field_self), smoothness_penalty(field_cross)


def objective_g_r1(x: Tensor, y: Tensor, bundle: ModelBundle, w: LossWeights,
                   mode: str = "dgr", t1_detach_field: bool = False,
                   ) -> tuple[Tensor, LossBreakdown, Tensor, DeformationField | None]:
    """Generator-side objective for the active mode.

    Returns (scalar loss, breakdown, generated image, r1 field). The
    image and field are returned so later phases can reuse them
    detached (each phase sees this batch's pre-update forwards). In dgr
    mode, gradients of the position-consistency term flow through the
    frozen second registration net into the generator unless
    `t1_detach_field` cuts the field path.
    """
    bd = LossBreakdown()
    gx = generator_forward(bundle.generator, x)
    d_fake = discriminator_forward(bundle.discriminator, gx)
    adv = adv_generator(d_fake)
    bd.adv = adv.item()

    if mode == "baseline":
        l1 = pix2pix_l1(gx, y)
        bd.l1 = l1.item()
        total = T.add(T.scale_shift(l1, w.alpha), T.scale_shift(adv, w.delta))
        bd.total = float(total.data)
        return total, bd, gx, None

    r1_field = regnet_forward(bundle.r1, gx, y)
    warped = resample(gx, r1_field)
    l1 = T.l1_mean(warped, y)
    ssim_l = _ssim_loss_of_warped(warped, y)
    smooth = smoothness_penalty(r1_field)
    bd.l1, bd.ssim, bd.smooth_r1 = l1.item(), ssim_l.item(), smooth.item()
    total = rnr_total(l1, ssim_l, smooth, adv, w)

    if mode == "dgr":
        f_self = regnet_forward(bundle.r2, x, gx)
        if t1_detach_field:
            f_self = f_self.detached()
        t1 = t1_loss(gx, f_self)
        bd.t1 = t1.item()
        total = T.add(total, T.scale_shift(t1, w.epsilon))
    elif mode != "rnr":
        raise ValueError(f"unknown mode {mode!r}")

    bd.total = float(total.data)
    return total, bd, gx, r1_field


def objective_r2(x: Tensor, y: Tensor, bundle: ModelBundle, w: LossWeights,
                 gx: Tensor | None = None,
                 r1_field: DeformationField | None = None,
                 ) -> tuple[Tensor, LossBreakdown]:
    """Second-phase objective updating only the second registration net:
    T1 + gamma*T1R + T2 + gamma*T2R.

    `gx` and `r1_field` may be passed in (detached) to reuse phase-1
    forwards; otherwise they are recomputed without graph tracking.
    """
    if gx is None:
        gx = generator_forward(bundle.generator, x)
    gx = T.detach(gx)
    if r1_field is None:
        r1_field = regnet_forward(bundle.r1, gx, y)
    r1_field = r1_field.detached()

    f_self = regnet_forward(bundle.r2, x, gx)
    f_cross = regnet_forward(bundle.r2, x, y)
    t1 = t1_loss(gx, f_self)
    t2 = t2_loss(gx, f_cross, r1_field)
    t1r, t2r = r2_smoothness(f_self, f_cross)

    total = T.add(T.add(t1, T.scale_shift(t1r, w.gamma)),
                  T.add(t2, T.scale_shift(t2r, w.gamma)))
    bd = LossBreakdown(t1=t1.item(), t2=t2.item(), t1r=t1r.item(), t2r=t2r.item(),
                       total=float(total.data))
    return total, bd


_SSIM_LOSS_MIN = -float(np.log(2.0))
_SSIM_LOSS_MAX = -float(np.log(T.LOG_FLOOR))


def check_breakdown(bd: LossBreakdown, where: str = "") -> None:
    """Range and finiteness assertions, run on every training step.
    Every term is non-negative except the ssim loss, which lives in
    [-log 2, -log 1e-6]."""
    vals = {f.name: getattr(bd, f.name) for f in fields(bd)}
    for name, v in vals.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"{where}: loss term {name} is not finite ({v})")
    for name in ("l1", "smooth_r1", "adv", "t1", "t2", "t1r", "t2r"):
        if vals[name] < 0:
            raise FloatingPointError(f"{where}: loss term {name} negative ({vals[name]})")
    if not (_SSIM_LOSS_MIN - 1e-6 <= vals["ssim"] <= _SSIM_LOSS_MAX + 1e-6) and vals["ssim"] != 0.0:
        raise FloatingPointError(f"{where}: ssim loss out of range ({vals['ssim']})")
