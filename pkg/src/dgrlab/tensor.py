"""Dense tensors with reverse-mode automatic differentiation on numpy.

Every learnable computation in this package runs through the `Tensor`
graph defined here: convolutions, activations, bilinear re-sampling,
reductions, and the elementwise algebra the losses need. Design points:

* data layout is row-major (batch, channel, height, width) everywhere;
* float32 is the training dtype, float64 exists for gradient checks;
* shapes must match exactly in binary ops -- there is no broadcasting;
* reductions use numpy's fixed-order summation, so single-threaded runs
  are bitwise reproducible.

Convolutions are lowered to batched GEMMs via im2col; 1x1 kernels skip
the im2col copy entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "ShapeError",
    "GradCheckReport",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scale_shift",
    "abs_",
    "log_clamped",
    "clamp",
    "mean",
    "sq_mean",
    "l1_mean",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "conv2d",
    "grid_sample",
    "concat_channels",
    "upsample2x",
    "instance_norm",
    "window_mean_valid",
    "detach",
    "finite_diff_check",
    "dump",
]

LOG_FLOOR = 1e-6  # all log arguments are clamped to >= this before log


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


class Tensor:
    """A dense float array plus an optional slot in the autodiff graph.

    `data` is owned and must not be mutated after construction (except
    for leaf parameters, which the optimizer updates between steps).
    `grad` is populated by `backward`; for leaf parameters it may be a
    preallocated view into a flat buffer and is accumulated with `+=`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Build a leaf tensor, copying `data` into the requested dtype."""
    arr = np.array(data, dtype=dtype)
    return Tensor(arr, requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    """Wrap an op result; the graph edge is only kept if a parent needs grads."""
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, rg)
    if rg:
        out._parents = parents
        out._backward = bwd
    return out

def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add `g` into t.grad. `own=True` promises `g` aliases nothing else."""
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    sa, sb = a.data.shape, b.data.shape
    for i in range(min(len(sa), len(sb))):
        if sa[i] != sb[i]:
            raise ShapeError(f"{op}: dimension {i} mismatch ({sa[i]} vs {sb[i]}); shapes {sa} vs {sb}")
    raise ShapeError(f"{op}: rank mismatch; shapes {sa} vs {sb}")


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`.

    `loss` must be scalar. Repeated calls without clearing grads
    accumulate; the trainer resets grads at the start of each phase.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # Iterative topological sort: recursion would overflow on deep graphs.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            parent = node._parents[idx]
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, 0))
        else:
            topo.append(node)

    _accum(loss, np.ones_like(loss.data), own=True)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise algebra and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy)
        if b.requires_grad:
            _accum(b, dy)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy)
        if b.requires_grad:
            _accum(b, -dy, own=True)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * b.data, own=True)
        if b.requires_grad:
            _accum(b, dy * a.data, own=True)

    return _result(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b. Callers must keep b bounded away from zero."""
    _check_same_shape(a, b, "div")
    inv = 1.0 / b.data
    out_data = a.data * inv

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * inv, own=True)
        if b.requires_grad:
            _accum(b, -dy * out_data * inv, own=True)

    return _result(out_data, (a, b), bwd)


def scale_shift(a: Tensor, k: float, c: float = 0.0) -> Tensor:
    """k * a + c with scalar constants."""

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * k, own=True)

    return _result(a.data * a.data.dtype.type(k) + a.data.dtype.type(c), (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * sign, own=True)

    return _result(np.abs(a.data), (a,), bwd)


def log_clamped(a: Tensor) -> Tensor:
    """log(max(a, 1e-6)); gradient is zero where the clamp is active."""
    clipped = np.maximum(a.data, a.data.dtype.type(LOG_FLOOR))
    active = a.data > LOG_FLOOR

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * active / clipped, own=True)

    return _result(np.log(clipped), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * inside, own=True)

    return _result(out_data, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(dy):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, dy / n), own=True)

    return _result(np.asarray(a.data.mean(dtype=a.data.dtype)), (a,), bwd)


def sq_mean(a: Tensor) -> Tensor:
    """mean(a^2)."""
    n = a.data.size

    def bwd(dy):
        if a.requires_grad:
            _accum(a, (2.0 * dy / n) * a.data, own=True)

    return _result(np.asarray(np.mean(a.data * a.data, dtype=a.data.dtype)), (a,), bwd)


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|), fused so the difference tensor never hits the graph."""
    _check_same_shape(a, b, "l1_mean")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def bwd(dy):
        s = dy / n
        if a.requires_grad:
            _accum(a, sign * s, own=True)
        if b.requires_grad:
            _accum(b, sign * (-s), own=True)

    return _result(np.asarray(np.mean(np.abs(diff), dtype=a.data.dtype)), (a, b), bwd)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    pos = a.data > 0
    out_data = np.where(pos, a.data, a.data * a.data.dtype.type(slope))

    def bwd(dy):
        if a.requires_grad:
            _accum(a, np.where(pos, dy, dy * a.data.dtype.type(slope)), own=True)

    return _result(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # exp on the negative half-line only, for overflow safety
    out_data = np.empty_like(a.data)
    neg = a.data < 0
    e = np.exp(np.where(neg, a.data, -a.data))
    np.copyto(out_data, np.where(neg, e / (1.0 + e), 1.0 / (1.0 + e)))

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * out_data * (1.0 - out_data), own=True)

    return _result(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(dy):
        if a.requires_grad:
            _accum(a, dy * (1.0 - out_data * out_data), own=True)

    return _result(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded input (B,C,Hp,Wp) -> contiguous columns (B, C*k*k, ho*wo)."""
    b, c = xp.shape[0], xp.shape[1]
    s = xp.strides
    view = as_strided(
        xp,
        (b, c, k, k, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
    )
    return np.ascontiguousarray(view.reshape(b, c * k * k, ho * wo))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x (B,C,H,W) with kernels w (O,C,K,K).

    Output spatial size is floor((H + 2*padding - K)/stride) + 1.
    Differentiable w.r.t. x, w, and bias.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (B,C,H,W), got {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D (O,C,K,K), got {w.data.shape}")
    bdim, c, h, wdt = x.data.shape
    o, cw, k, k2 = w.data.shape
    if k != k2 or k < 1:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if cw != c:
        raise ShapeError(f"conv2d: dimension 1 mismatch (input channels {c} vs kernel channels {cw})")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output for input {h}x{wdt}, kernel {k}, stride {stride}, padding {padding}")

    p = ho * wo
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(bdim, c, p)  # view; no copy for 1x1 kernels
    else:
        if padding:
            xp = np.zeros((bdim, c, h + 2 * padding, wdt + 2 * padding), dtype=x.data.dtype)
            xp[:, :, padding:padding + h, padding:padding + wdt] = x.data
        else:
            xp = x.data
        cols = _im2col(xp, k, stride, ho, wo)

    wf = w.data.reshape(o, c * k * k)
    y = np.matmul(wf[None], cols)  # (B, O, P) batched GEMM
    if bias is not None:
        if bias.data.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
        y += bias.data[None, :, None]
    out_data = y.reshape(bdim, o, ho, wo)

    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(dy):
        dyf = dy.reshape(bdim, o, p)
        if bias is not None and bias.requires_grad:
            _accum(bias, dyf.sum(axis=(0, 2)), own=True)
        if w.requires_grad:
            dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, dw.reshape(w.data.shape), own=True)
        if x.requires_grad:
            dcols = np.matmul(wf.T[None], dyf)  # (B, C*K*K, P)
            if k == 1 and stride == 1 and padding == 0:
                _accum(x, dcols.reshape(x.data.shape), own=True)
            else:
                dcols = dcols.reshape(bdim, c, k, k, ho, wo)
                dxp = np.zeros((bdim, c, h + 2 * padding, wdt + 2 * padding), dtype=dy.dtype)
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
                dx = dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp
                _accum(x, dx, own=not padding)

    return _result(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# bilinear re-sampling
# ---------------------------------------------------------------------------

def grid_sample(x: Tensor, field: Tensor) -> Tensor:
    """Bilinear re-sample of x (B,C,H,W) at per-pixel displacements.

    `field` is (B,2,H,W) in pixel units, channel 0 vertical (dy) and
    channel 1 horizontal (dx): out(b,c,i,j) = x(b,c, i+dy, j+dx) with
    bilinear interpolation. Out-of-bounds coordinates clamp to the
    border. Differentiable w.r.t. both x and the field (the field
    gradient is zero where clamping is active).
    """
    if x.data.ndim != 4 or field.data.ndim != 4:
        raise ShapeError(f"grid_sample: need 4-D input and field, got {x.data.shape} and {field.data.shape}")
    b, c, h, w = x.data.shape
    bf, two, hf, wf = field.data.shape
    if two != 2:
        raise ShapeError(f"grid_sample: dimension 1 of field must be 2, got {two}")
    if (bf, hf, wf) != (b, h, w):
        raise ShapeError(
            f"grid_sample: field batch/spatial {bf}x{hf}x{wf} does not match input {b}x{h}x{w}")

    dt = x.data.dtype
    gi = np.arange(h, dtype=dt)[None, :, None] + field.data[:, 0]
    gj = np.arange(w, dtype=dt)[None, None, :] + field.data[:, 1]
    in_i = (gi > 0.0) & (gi < h - 1)  # clamp zone has zero field-gradient
    in_j = (gj > 0.0) & (gj < w - 1)
    gi = np.clip(gi, 0.0, h - 1)
    gj = np.clip(gj, 0.0, w - 1)

    i0 = gi.astype(np.int64)
    j0 = gj.astype(np.int64)
    np.minimum(i0, h - 2, out=i0)
    np.minimum(j0, w - 2, out=j0)
    wi = gi - i0
    wj = gj - j0

    p = h * w
    flat = x.data.reshape(b, c, p)
    idx00 = (i0 * w + j0).reshape(b, 1, p)
    g00 = np.take_along_axis(flat, idx00, axis=2)
    g01 = np.take_along_axis(flat, idx00 + 1, axis=2)
    g10 = np.take_along_axis(flat, idx00 + w, axis=2)
    g11 = np.take_along_axis(flat, idx00 + w + 1, axis=2)

    wi_f = wi.reshape(b, 1, p)
    wj_f = wj.reshape(b, 1, p)
    w00 = (1.0 - wi_f) * (1.0 - wj_f)
    w01 = (1.0 - wi_f) * wj_f
    w10 = wi_f * (1.0 - wj_f)
    w11 = wi_f * wj_f
    out_data = (w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11).reshape(b, c, h, w)

    def bwd(dy):
        dyf = dy.reshape(b, c, p)
        if x.requires_grad:
            n = b * c * p
            base = (np.arange(b * c, dtype=np.int64)[:, None] * p).reshape(b, c, 1)
            gdx = np.zeros(n, dtype=np.float64)
            for wgt, off in ((w00, 0), (w01, 1), (w10, w), (w11, w + 1)):
                gdx += np.bincount(
                    (base + idx00 + off).ravel(),
                    weights=(wgt * dyf).ravel(),
                    minlength=n,
                )
            _accum(x, gdx.reshape(b, c, h, w).astype(dt), own=True)
        if field.requires_grad:
            dgi = (((g10 - g00) * (1.0 - wj_f) + (g11 - g01) * wj_f) * dyf).sum(axis=1)
            dgj = (((g01 - g00) * (1.0 - wi_f) + (g11 - g10) * wi_f) * dyf).sum(axis=1)
            dfield = np.empty_like(field.data)
            dfield[:, 0] = (dgi.reshape(b, h, w) * in_i)
            dfield[:, 1] = (dgj.reshape(b, h, w) * in_j)
            _accum(field, dfield, own=True)

    return _result(out_data, (x, field), bwd)


# ---------------------------------------------------------------------------
# structural ops for the networks
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all other dims must match."""
    base = parts[0].data.shape
    for t in parts[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} vs {s}")
    sizes = [t.data.shape[1] for t in parts]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([t.data for t in parts], axis=1)

    def bwd(dy):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, dy[:, lo:hi])

    return _result(out_data, tuple(parts), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    b, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(dy):
        if x.requires_grad:
            _accum(x, dy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)), own=True)

    return _result(out_data, (x,), bwd)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(batch, channel) normalization over the spatial axes, no affine."""
    b, c, h, w = x.data.shape
    flat = x.data.reshape(b, c, h * w)
    mu = flat.mean(axis=2, keepdims=True)
    xc = flat - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    y = xc * inv
    out_data = y.reshape(b, c, h, w)

    def bwd(dy):
        if x.requires_grad:
            dyf = dy.reshape(b, c, h * w)
            m1 = dyf.mean(axis=2, keepdims=True)
            m2 = np.mean(dyf * y, axis=2, keepdims=True)
            _accum(x, ((dyf - m1 - y * m2) * inv).reshape(b, c, h, w), own=True)

    return _result(out_data, (x,), bwd)


def window_mean_valid(x: Tensor, taps: np.ndarray) -> Tensor:
    """Separable windowed weighting at valid positions (used by SSIM).

    `taps` is a 1-D kernel applied along both spatial axes; the output
    is (B, C, H-K+1, W-K+1). Implemented as two banded-matrix GEMMs so
    the whole thing stays on BLAS.
    """
    b, c, h, w = x.data.shape
    k = len(taps)
    if h < k or w < k:
        raise ShapeError(f"window_mean_valid: image {h}x{w} smaller than window {k}")
    dt = x.data.dtype
    mh = np.zeros((h - k + 1, h), dtype=dt)
    for r in range(h - k + 1):
        mh[r, r:r + k] = taps
    if w == h:
        mw = mh
    else:
        mw = np.zeros((w - k + 1, w), dtype=dt)
        for r in range(w - k + 1):
            mw[r, r:r + k] = taps
    # y = Mh @ x @ Mw^T per (b, c) plane
    out_data = np.matmul(np.matmul(mh[None, None], x.data), mw.T[None, None])

    def bwd(dy):
        if x.requires_grad:
            _accum(x, np.matmul(np.matmul(mh.T[None, None], dy), mw[None, None]), own=True)

    return _result(out_data, (x,), bwd)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor,
                      tol: float, op_name: str = "f",
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() gradients of scalar-valued `f` at `point`
    against central finite differences.

    Step size is 1e-3 for float32 points and 1e-5 for float64. Analytic
    gradients run on the point's native dtype; the difference quotient
    is evaluated on a float64 upcast of the point, because f32 rounding
    inside f divided by 2h sits above the 1e-3 tolerance. The error
    metric is max |analytic - numeric| normalized by the largest
    gradient magnitude, which keeps noise on near-zero components from
    dominating. `max_coords` limits the check to a random coordinate
    subset.
    """
    dt = point.data.dtype
    hstep = 1e-5 if dt == np.float64 else 1e-3

    p = Tensor(point.data.copy(), requires_grad=True)
    out = f(p)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check: f must be scalar-valued, got {out.data.shape}")
    backward(out)
    analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    base = point.data.astype(np.float64)
    flat = base.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    numeric = np.zeros(len(coords), dtype=np.float64)
    for pos, ci in enumerate(coords):
        orig = flat[ci]
        flat[ci] = orig + hstep
        fp = float(f(Tensor(base)).data)
        flat[ci] = orig - hstep
        fm = float(f(Tensor(base)).data)
        flat[ci] = orig
        numeric[pos] = (fp - fm) / (2.0 * hstep)

    a = analytic.reshape(-1)[coords].astype(np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    max_rel = float(np.max(np.abs(a - numeric), initial=0.0) / scale)
    return GradCheckReport(op_name=op_name, max_rel_error=max_rel, tolerance=tol,
                           passed=max_rel <= tol)


def dump(t: Tensor, path) -> None:
    """Write a tensor to a text file: shape line, then one value per line."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(" ".join(str(d) for d in t.data.shape) + "\n")
        for v in t.data.reshape(-1):
            fh.write(f"{v:.9g}\n")
