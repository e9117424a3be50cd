"""Dense NCHW tensors backed by numpy arrays.

A tensor here is simply a C-contiguous ``numpy.ndarray`` of rank 1 to 4 in
the build-wide floating point precision. Random fills use numpy's PCG64
generator (O'Neill's permuted congruential generator, 128-bit state, 64-bit
output) seeded with a single integer, so the same seed gives the same
initial weights on every platform numpy supports.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when tensor extents or value counts do not agree."""


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> np.dtype:
    """Switch the build-wide precision; returns the previous dtype."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    previous, _DTYPE = _DTYPE, dtype
    return previous


class precision:
    """Context manager that temporarily switches the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"rank must be between 1 and 4, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return shape


@dataclass(frozen=True)
class Zeros:
    pass


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float
    seed: int


@dataclass(frozen=True)
class FromValues:
    values: Sequence[float] | np.ndarray


FillRule = Zeros | Constant | Uniform | FromValues


def tensor_create(shape: Sequence[int], fill: FillRule = Zeros(), dtype=None) -> np.ndarray:
    """Allocate a tensor of ``shape`` filled according to ``fill``.

    >>> tensor_create((1, 1, 2, 2)).ravel().tolist()
    [0.0, 0.0, 0.0, 0.0]
    """
    shape = check_shape(shape)
    dtype = np.dtype(dtype) if dtype is not None else _DTYPE
    if isinstance(fill, Zeros):
        return np.zeros(shape, dtype=dtype)
    if isinstance(fill, Constant):
        return np.full(shape, fill.value, dtype=dtype)
    if isinstance(fill, Uniform):
        rng = make_rng(fill.seed)
        return rng.uniform(fill.low, fill.high, size=shape).astype(dtype)
    if isinstance(fill, FromValues):
        values = np.asarray(fill.values, dtype=dtype).ravel()
        if values.size != int(np.prod(shape)):
            raise ShapeError(f"{values.size} values do not fill shape {shape}")
        return np.ascontiguousarray(values.reshape(shape))
    raise TypeError(f"unknown fill rule {fill!r}")


def matvec(weights: np.ndarray, x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``out[i] = sum_j weights[i, j] * x[j] + bias[i]``."""
    weights = np.asarray(weights)
    x = np.asarray(x)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.ndim != 1 or bias.ndim != 1:
        raise ShapeError("matvec expects a matrix, a vector and a bias vector")
    n_out, n_in = weights.shape
    if x.shape[0] != n_in or bias.shape[0] != n_out:
        raise ShapeError(
            f"matvec dimension mismatch: W {weights.shape}, x {x.shape}, b {bias.shape}"
        )
    return weights @ x + bias


def pad2d(x: np.ndarray, pad_h: int, pad_w: int, mode: str = "zero") -> np.ndarray:
    """Zero-pad the last two axes symmetrically."""
    if mode != "zero":
        raise ValueError(f"unsupported padding mode {mode!r}")
    if pad_h < 0 or pad_w < 0:
        raise ShapeError("padding must be non-negative")
    if x.ndim < 2:
        raise ShapeError("pad2d needs at least two axes")
    if pad_h == 0 and pad_w == 0:
        return x.copy()
    widths = [(0, 0)] * (x.ndim - 2) + [(pad_h, pad_h), (pad_w, pad_w)]
    return np.pad(x, widths, mode="constant")


def crop2d(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Inverse of :func:`pad2d`: strip ``pad_h``/``pad_w`` from each side."""
    h, w = x.shape[-2:]
    return x[..., pad_h:h - pad_h, pad_w:w - pad_w]


def same_padding(kernel: int) -> int:
    """Per-side padding that keeps a stride-1 odd convolution size-preserving."""
    if kernel % 2 != 1:
        raise ShapeError(f"same padding needs an odd kernel, got {kernel}")
    return kernel // 2
