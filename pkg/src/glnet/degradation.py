"""Observation model: Gaussian blur followed by decimation.

The low-resolution image is ``x_L = K x_H``. ``degrade`` applies K as a
separable filter pipeline; ``build_k_matrix`` writes the same map out as a
sparse matrix. Near the image border the truncated Gaussian is renormalized
over the taps that fall inside the image, so every row of K sums to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from .tensor import ShapeError

DEFAULT_SIGMA = {4: 1.2, 8: 2.4}


def default_sigma(factor: int) -> float:
    try:
        return DEFAULT_SIGMA[factor]
    except KeyError:
        raise ValueError(f"no default blur for factor {factor}; pass sigma explicitly") from None


@dataclass(frozen=True)
class DegradationOperator:
    sigma: float
    factor: int
    kernel_radius: int | None = None
    boundary: str = "renormalize"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.boundary != "renormalize":
            raise ValueError(f"unsupported boundary {self.boundary!r}")

    @classmethod
    def for_factor(cls, factor: int, sigma: float | None = None) -> "DegradationOperator":
        return cls(sigma=default_sigma(factor) if sigma is None else sigma, factor=factor)

    @property
    def radius(self) -> int:
        if self.kernel_radius is not None:
            return self.kernel_radius
        return math.ceil(3 * self.sigma)

    @property
    def phase(self) -> int:
        """Offset of the first retained sample on each axis."""
        return self.factor // 2

    def taps(self) -> np.ndarray:
        return gaussian_taps(self.sigma, self.radius)


def gaussian_taps(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _check_divisible(h: int, w: int, d: int):
    if h % d or w % d:
        raise ShapeError(f"image size {h}x{w} is not divisible by factor {d}")


def blur(image: np.ndarray, op: DegradationOperator) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with border renormalization."""
    x = np.asarray(image, dtype=np.float64)
    taps = op.taps()
    ones = np.ones(x.shape[-2:])
    num = x
    den = ones
    for axis in (-2, -1):
        num = ndimage.correlate1d(num, taps, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(den, taps, axis=axis, mode="constant", cval=0.0)
    return num / den


def degrade(image: np.ndarray, op: DegradationOperator) -> np.ndarray:
    """Blur then keep every ``d``-th pixel starting at ``d // 2``.

    Works on any array whose last two axes are (H, W); the result has the
    input's dtype.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    _check_divisible(h, w, op.factor)
    out = blur(image, op)[..., op.phase::op.factor, op.phase::op.factor]
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    return np.ascontiguousarray(out).astype(dtype, copy=False)


def build_k_matrix(op: DegradationOperator, h: int, w: int) -> sparse.csr_matrix:
    """Explicit (h/d * w/d) x (h * w) sparse matrix for ``degrade`` on an h x w image."""
    _check_divisible(h, w, op.factor)
    d, r = op.factor, op.radius
    sigma = op.sigma
    hl, wl = h // d, w // d
    rows, cols, vals = [], [], []
    for i in range(hl):
        cy = i * d + op.phase
        ys = np.arange(max(cy - r, 0), min(cy + r, h - 1) + 1)
        for j in range(wl):
            cx = j * d + op.phase
            xs = np.arange(max(cx - r, 0), min(cx + r, w - 1) + 1)
            dy = (ys - cy)[:, None]
            dx = (xs - cx)[None, :]
            wts = np.exp(-(dy ** 2 + dx ** 2) / (2 * sigma ** 2))
            wts /= wts.sum()
            rows.append(np.full(wts.size, i * wl + j))
            cols.append((ys[:, None] * w + xs[None, :]).ravel())
            vals.append(wts.ravel())
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(hl * wl, h * w),
    )


# ---------------------------------------------------------------------------
# classical upsampling


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0),
    )


def interpolation_matrix(n: int, factor: int, method: str) -> np.ndarray:
    """(n*factor, n) matrix enlarging a length-n signal.

    Pixel centers are aligned (output ``Y`` samples input coordinate
    ``(Y + 0.5) / factor - 0.5``) and out-of-range neighbours are clamped to
    the edge.
    """
    m = n * factor
    a = np.zeros((m, n))
    out = np.arange(m)
    if method == "nearest":
        a[out, out // factor] = 1.0
        return a
    src = (out + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    if method == "bilinear":
        offsets, weights = (0, 1), (1 - frac, frac)
    elif method == "bicubic":
        offsets = (-1, 0, 1, 2)
        weights = tuple(_cubic(frac - o) for o in offsets)
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    for o, wt in zip(offsets, weights):
        np.add.at(a, (out, np.clip(base + o, 0, n - 1)), wt)
    return a


def classical_upsample(image: np.ndarray, d: int, method: str = "bicubic") -> np.ndarray:
    """Enlarge the last two axes by ``d`` with nearest, bilinear or Catmull-Rom bicubic."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    ah = interpolation_matrix(h, d, method)
    aw = interpolation_matrix(w, d, method)
    out = np.einsum("Yh,...hw,Xw->...YX", ah, image.astype(np.float64), aw, optimize=True)
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    return out.astype(dtype, copy=False)


def back_project(
    estimate: np.ndarray,
    observed_lr: np.ndarray,
    op: DegradationOperator,
    iters: int = 10,
    step: float = 1.0,
) -> np.ndarray:
    """Iterative back-projection: ``x <- x + step * up(x_L - K x)``."""
    x = np.asarray(estimate, dtype=np.float64).copy()
    lr = np.asarray(observed_lr, dtype=np.float64)
    h, w = x.shape[-2:]
    if lr.shape[-2:] != (h // op.factor, w // op.factor):
        raise ShapeError(f"estimate {x.shape} and observation {lr.shape} disagree for factor {op.factor}")
    for it in range(iters):
        with np.errstate(over="ignore", invalid="ignore"):
            residual = lr - degrade(x, op)
            x += step * classical_upsample(residual, op.factor, "bilinear")
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"back-projection diverged at iteration {it}")
    return x.astype(np.asarray(estimate).dtype if np.issubdtype(np.asarray(estimate).dtype, np.floating) else np.float64)
