"""Apply a trained model to grayscale or colour images."""
from __future__ import annotations

import numpy as np

from .degradation import classical_upsample
from .imageio import rgb_to_yuv, yuv_to_rgb
from .tensor import ShapeError


def _param_dtype(model):
    return next((p.dtype for _, p in model.named_parameters()), np.dtype(np.float64))


def _check_input(model, x):
    if tuple(x.shape[-3:]) != tuple(model.input_shape):
        h, w = model.input_shape[-2:]
        raise ShapeError(f"{model.name} expects {w}x{h} inputs, got {x.shape[-1]}x{x.shape[-2]}")


def upsample_gray(model, lr: np.ndarray, peak: float = 1.0, chunk: int = 8) -> np.ndarray:
    """(N, 1, h, w) or (1, h, w) low-resolution input -> model output clipped to [0, peak]."""
    x = np.asarray(lr, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    _check_input(model, x)
    dtype = _param_dtype(model)
    out = np.concatenate([
        model.forward(x[i:i + chunk].astype(dtype)).astype(np.float64) for i in range(0, len(x), chunk)
    ])
    out = np.clip(out, 0.0, peak)
    return out[0] if squeeze else out


def upsample_color(model, lr_rgb: np.ndarray, factor: int, peak: float = 1.0) -> np.ndarray:
    """Luma through the model, chroma through bicubic interpolation, then back to RGB."""
    x = np.asarray(lr_rgb, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    y, u, v = rgb_to_yuv(x)
    _check_input(model, y)
    y_hr = upsample_gray(model, y, peak)
    u_hr = classical_upsample(u, factor, "bicubic")
    v_hr = classical_upsample(v, factor, "bicubic")
    rgb = np.clip(yuv_to_rgb(y_hr, u_hr, v_hr), 0.0, peak)
    return rgb[0] if squeeze else rgb
