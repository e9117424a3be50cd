"""Image quality metrics and evaluation reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .degradation import classical_upsample
from .tensor import ShapeError

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

WPSNR_WINDOW = 7
# noise-visibility reference variance, as a fraction of peak**2
WPSNR_REF_FRACTION = 1.0 / 100.0


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a single-channel image, got shape {a.shape}")
    return a


def _pair(a, b):
    a, b = _as_2d(a), _as_2d(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    y = ndimage.correlate1d(x, taps, axis=0, mode="constant")
    y = ndimage.correlate1d(y, taps, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity over all full 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def masking_weights(reference, peak: float = 1.0) -> np.ndarray:
    """Per-pixel error weights ``1 / (1 + var_local / var_ref)``, normalised to mean 1.

    Local variance is taken over 7x7 windows (reflected at the border);
    busy regions hide errors and get lower weight.
    """
    x = _as_2d(reference)
    mean = ndimage.uniform_filter(x, WPSNR_WINDOW, mode="reflect")
    var = ndimage.uniform_filter(x * x, WPSNR_WINDOW, mode="reflect") - mean ** 2
    # cancellation noise on flat patches must not produce spurious weights
    var[var < 1e-12 * peak * peak] = 0.0
    w = 1.0 / (1.0 + var / (WPSNR_REF_FRACTION * peak * peak))
    return w / w.mean()


def wpsnr(a, b, peak: float = 1.0) -> float:
    """Variance-masked weighted PSNR; ``a`` is the reference image."""
    a, b = _pair(a, b)
    w = masking_weights(a, peak)
    return _psnr_from_mse(float(np.mean(w * (a - b) ** 2)), peak)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    id: str
    psnr: float
    ssim: float
    wpsnr: float


def score(image_id: str, reference, estimate, peak: float = 1.0) -> MetricRow:
    return MetricRow(image_id, psnr(reference, estimate, peak), ssim(reference, estimate, peak),
                     wpsnr(reference, estimate, peak))


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    metadata: dict[str, str] = field(default_factory=dict)
    baselines: dict[str, list[MetricRow]] = field(default_factory=dict)

    @staticmethod
    def mean_of(rows: list[MetricRow]) -> dict[str, float]:
        if not rows:
            return {"psnr": math.nan, "ssim": math.nan, "wpsnr": math.nan}
        return {k: float(np.mean([getattr(r, k) for r in rows])) for k in ("psnr", "ssim", "wpsnr")}

    @property
    def mean(self) -> dict[str, float]:
        return self.mean_of(self.rows)

    def to_csv(self, rows: list[MetricRow] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "psnr", "ssim", "wpsnr"])
        for r in self.rows if rows is None else rows:
            writer.writerow([r.id, f"{r.psnr:.4f}", f"{r.ssim:.6f}", f"{r.wpsnr:.4f}"])
        return buf.getvalue()

    def table(self) -> str:
        method = self.metadata.get("model", "model")
        lines = [f"# {k}: {v}" for k, v in sorted(self.metadata.items())]
        lines.append(f"{'method':<12} {'PSNR':>8} {'SSIM':>7} {'WPSNR':>8}  n")
        for name, rows in [(method, self.rows), *self.baselines.items()]:
            m = self.mean_of(rows)
            lines.append(f"{name:<12} {m['psnr']:8.3f} {m['ssim']:7.4f} {m['wpsnr']:8.3f}  {len(rows)}")
        return "\n".join(lines) + "\n"


def evaluate(model, pairs, d: int, peak: float = 1.0, chunk: int = 5, dataset_tag: str = "") -> MetricsReport:
    """Score ``model`` on aligned pairs, plus nearest and bicubic baselines.

    Outputs are clipped to ``[0, peak]`` before scoring, as they would be
    when written to an 8-bit image.
    """
    if model.descriptor.factor and model.descriptor.factor != d:
        raise ValueError(f"model was built for factor {model.descriptor.factor}, not {d}")
    if tuple(pairs.lr.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"model expects {model.input_shape} inputs, pairs have {pairs.lr.shape[1:]}")
    dtype = next(p.dtype for _, p in model.named_parameters())
    rows, nearest, bicubic = [], [], []
    for start in range(0, len(pairs), chunk):
        lr, hr = pairs.batch(slice(start, start + chunk))
        out = np.clip(model.forward(lr.astype(dtype, copy=False)), 0, peak)
        near = classical_upsample(lr, d, "nearest")
        cub = np.clip(classical_upsample(lr, d, "bicubic"), 0, peak)
        for k in range(len(lr)):
            image_id = pairs.ids[start + k]
            rows.append(score(image_id, hr[k], out[k], peak))
            nearest.append(score(image_id, hr[k], near[k], peak))
            bicubic.append(score(image_id, hr[k], cub[k], peak))
    metadata = {
        "model": model.name,
        "factor": str(d),
        "dataset": dataset_tag,
        "frames": "full (no border crop)",
        "ssim": f"gaussian window {SSIM_WINDOW} sigma {SSIM_SIGMA} K1 {SSIM_K1} K2 {SSIM_K2}",
        "wpsnr": f"wpsnr (variance-masked), {WPSNR_WINDOW}x{WPSNR_WINDOW} local variance, ref peak^2/100",
        "peak": repr(peak),
    }
    return MetricsReport(rows, metadata, {"nearest": nearest, "bicubic": bicubic})
