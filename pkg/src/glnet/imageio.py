"""8-bit image files (binary PGM and PNG) and BT.601 colour conversion.

Images come back as float arrays of shape (1, C, H, W) on the requested
pixel scale: ``"0-1"`` divides the 8-bit codes by 255, ``"0-255"`` keeps them.
"""
from __future__ import annotations

import os
import re

import numpy as np

from .tensor import ShapeError

SCALES = {"0-1": 255.0, "0-255": 1.0}


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


def _divisor(pixel_scale: str) -> float:
    try:
        return SCALES[pixel_scale]
    except KeyError:
        raise ValueError(f"unknown pixel scale {pixel_scale!r}") from None


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval <= 255 into an (H, W) uint8 array."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ImageFormatError(f"not a binary PGM (magic {fields[0][:8]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PGM header field") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad PGM size {width}x{height}")
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"unsupported PGM bit depth (maxval {maxval})")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("truncated PGM header")
    pos += 1
    body = data[pos:pos + width * height]
    if len(body) != width * height:
        raise ImageFormatError(f"truncated PGM: expected {width * height} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _read_png(path: str) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise ImageFormatError(f"unsupported PNG bit depth (mode {im.mode})")
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8)[None]
            if im.mode in ("LA",):
                return np.asarray(im.convert("L"), dtype=np.uint8)[None]
            return np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
    except ImageFormatError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise ImageFormatError(f"cannot decode PNG {path}: {exc}") from exc


def read_codes(path: str) -> np.ndarray:
    """Raw 8-bit codes as (C, H, W) uint8."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        return _read_png(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if ext in (".pgm", ".pnm") or data[:2] == b"P5":
        return parse_pgm(data)[None]
    raise ImageFormatError(f"unsupported image format: {path}")


def image_read(path: str, pixel_scale: str = "0-1") -> np.ndarray:
    return read_codes(path)[None].astype(np.float64) / _divisor(pixel_scale)


def to_codes(image: np.ndarray, pixel_scale: str = "0-1") -> np.ndarray:
    """Quantise to uint8 (round half to even, clipped to 0..255)."""
    x = np.asarray(image, dtype=np.float64) * _divisor(pixel_scale)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def image_write(path: str, image: np.ndarray, pixel_scale: str = "0-1"):
    """Write a (C, H, W) or (1, C, H, W) image; C is 1 (PGM or PNG) or 3 (PNG)."""
    codes = to_codes(image, pixel_scale)
    while codes.ndim > 3 and codes.shape[0] == 1:
        codes = codes[0]
    if codes.ndim == 2:
        codes = codes[None]
    if codes.ndim != 3 or codes.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot write image of shape {np.shape(image)}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        if codes.shape[0] != 1:
            raise ImageFormatError("PGM output needs a single-channel image")
        with open(path, "wb") as fh:
            fh.write(encode_pgm(codes[0]))
    elif ext == ".png":
        from PIL import Image

        im = Image.fromarray(codes[0], "L") if codes.shape[0] == 1 else Image.fromarray(codes.transpose(1, 2, 0), "RGB")
        im.save(path, format="PNG")
    else:
        raise ImageFormatError(f"unsupported output format: {path}")


# ---------------------------------------------------------------------------
# colour

# BT.601 analogue YUV: U = 0.492 (B - Y), V = 0.877 (R - Y); zero for grey pixels
_LUMA = np.array([0.299, 0.587, 0.114])
RGB_TO_YUV = np.stack([
    _LUMA,
    0.492 * (np.array([0.0, 0.0, 1.0]) - _LUMA),
    0.877 * (np.array([1.0, 0.0, 0.0]) - _LUMA),
])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)


def _channels_first(image, n: int) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    axis = x.ndim - 3
    if x.ndim < 3 or x.shape[axis] != n:
        raise ShapeError(f"expected {n} channels at axis -3, got shape {x.shape}")
    return x


def rgb_to_yuv(image):
    """(..., 3, H, W) RGB -> (Y, U, V), each (..., 1, H, W)."""
    x = _channels_first(image, 3)
    yuv = np.einsum("ij,...jhw->...ihw", RGB_TO_YUV, x)
    return yuv[..., 0:1, :, :], yuv[..., 1:2, :, :], yuv[..., 2:3, :, :]


def yuv_to_rgb(y, u, v) -> np.ndarray:
    yuv = np.concatenate([np.asarray(y), np.asarray(u), np.asarray(v)], axis=-3).astype(np.float64)
    return np.einsum("ij,...jhw->...ihw", YUV_TO_RGB, yuv)

