"""Evaluation metrics: PSNR, SSIM (shared with the losses module),
MAE heatmaps on the 8-bit scale, and intensity-profile correlation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import ssim_index

__all__ = [
    "PSNR_SENTINEL",
    "psnr",
    "ssim",
    "mae_heatmap",
    "intensity_profile_pcc",
    "percentile_nearest_rank",
    "aggregate_rows",
    "MetricsReport",
]

PSNR_SENTINEL = 99.0
MAE_WINDOW = 0.5  # heatmap display window on the [0, 1] scale


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at the 99 dB sentinel."""
    if a.shape != b.shape:
        raise T.ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Reporting SSIM; identical implementation to the training loss."""
    return ssim_index(T.Tensor(a[None].astype(np.float32)),
                      T.Tensor(b[None].astype(np.float32))).item()


def mae_heatmap(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel channel-mean |a-b| quantized to 8 bit over a fixed
    [0, 0.5] window, plus the scalar MAE on the 0-255 scale."""
    if a.shape != b.shape:
        raise T.ShapeError(f"mae_heatmap: shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64)).mean(axis=0)
    heat = np.clip(np.rint(diff / MAE_WINDOW * 255.0), 0, 255).astype(np.uint8)
    return heat, float(diff.mean() * 255.0)


def intensity_profile_pcc(a: np.ndarray, b: np.ndarray,
                          line: tuple[tuple[float, float], tuple[float, float]],
                          n_samples: int = 256,
                          ) -> tuple[np.ndarray, np.ndarray, float | None]:
    """Bilinear channel-mean intensity profiles along a segment, and the
    Pearson correlation of the two. A zero-variance profile makes the
    correlation undefined; that case returns None."""
    (i0, j0), (i1, j1) = line
    h, w = a.shape[-2:]
    for (pi, pj) in line:
        if not (0 <= pi <= h - 1 and 0 <= pj <= w - 1):
            raise ValueError(f"profile endpoint {(pi, pj)} outside {h}x{w} image")
    if i0 == i1 and j0 == j1:
        raise ValueError("degenerate zero-length profile line")

    t = np.linspace(0.0, 1.0, n_samples)
    ii = i0 + (i1 - i0) * t
    jj = j0 + (j1 - j0) * t

    def sample(img):
        gray = img.astype(np.float64).mean(axis=0)
        fi = np.clip(ii, 0, h - 1)
        fj = np.clip(jj, 0, w - 1)
        i_lo = np.minimum(fi.astype(int), h - 2)
        j_lo = np.minimum(fj.astype(int), w - 2)
        wi = fi - i_lo
        wj = fj - j_lo
        return (gray[i_lo, j_lo] * (1 - wi) * (1 - wj)
                + gray[i_lo, j_lo + 1] * (1 - wi) * wj
                + gray[i_lo + 1, j_lo] * wi * (1 - wj)
                + gray[i_lo + 1, j_lo + 1] * wi * wj)

    pa, pb = sample(a), sample(b)
    sa, sb = pa.std(), pb.std()
    if sa <= 1e-12 or sb <= 1e-12:  # constant profile up to rounding
        return pa, pb, None
    pcc = float(np.corrcoef(pa, pb)[0, 1])
    return pa, pb, pcc


def percentile_nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    vs = np.sort(np.asarray(values, dtype=np.float64))
    n = len(vs)
    if n == 0:
        raise ValueError("empty sample")
    rank = max(1, int(np.ceil(q / 100.0 * n)))
    return float(vs[rank - 1])


def aggregate_rows(rows: list[dict], keys=("psnr", "ssim", "mae")) -> dict:
    out = {}
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "p2_5": percentile_nearest_rank(vals, 2.5),
            "p97_5": percentile_nearest_rank(vals, 97.5),
        }
    return out


@dataclass
class MetricsReport:
    """Per-image metric rows plus aggregates; registration-probe field
    magnitudes are present when the evaluated bundle has those nets."""

    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    r2_self_px: float | None = None
    r2_cross_px: float | None = None

    def finalize(self) -> "MetricsReport":
        self.aggregates = aggregate_rows(self.rows)
        return self
