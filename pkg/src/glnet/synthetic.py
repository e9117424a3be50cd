"""Procedural aligned "faces" for smoke tests and desk-scale runs.

Each image is a shaded ellipse with eyes, brows, nose and mouth at jittered
but roughly fixed positions, over a background gradient with a little
smooth texture. Values are in [0, 1].
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .tensor import make_rng


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2


def _soft(mask_dist, edge=0.15):
    # 1 inside, 0 outside, smooth ramp across the boundary
    return np.clip((1.0 - mask_dist) / edge, 0.0, 1.0)


def synthetic_face(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    s = size / 128.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    j = lambda scale: rng.normal(0.0, scale) * s  # noqa: E731

    bg_a, bg_b = rng.uniform(0.1, 0.5, size=2)
    img = bg_a + (bg_b - bg_a) * xx / size

    cy, cx = 64 * s + j(2), 64 * s + j(2)
    skin = rng.uniform(0.55, 0.85)
    face = _soft(_ellipse(yy, xx, cy, cx, 46 * s + j(2), 36 * s + j(2)), 0.1)
    shade = 1.0 - 0.25 * (xx - cx) / (40 * s) * rng.uniform(-1, 1)
    img = img * (1 - face) + face * skin * shade

    hair = _soft(_ellipse(yy, xx, cy - 40 * s, cx, 18 * s, 38 * s), 0.2) * (yy < cy - 28 * s)
    img = img * (1 - hair) + hair * rng.uniform(0.05, 0.3)

    eye_y = cy - 12 * s + j(1)
    gap = 15 * s + j(1)
    for side in (-1, 1):
        ex = cx + side * gap
        white = _soft(_ellipse(yy, xx, eye_y, ex, 3.5 * s, 7 * s), 0.2)
        img = img * (1 - white) + white * 0.9
        iris = _soft(_ellipse(yy, xx, eye_y, ex + j(0.7), 3 * s, 3 * s), 0.3)
        img = img * (1 - iris) + iris * rng.uniform(0.05, 0.3)
        brow = _soft(_ellipse(yy, xx, eye_y - 8 * s + j(0.7), ex, 1.6 * s, 9 * s), 0.3)
        img = img * (1 - brow) + brow * rng.uniform(0.1, 0.35)

    nose = _soft(_ellipse(yy, xx, cy + 5 * s, cx + j(0.7), 10 * s, 2.2 * s), 0.4)
    img -= 0.12 * nose * skin
    nostril = _soft(_ellipse(yy, xx, cy + 14 * s, cx, 2 * s, 6 * s), 0.3)
    img -= 0.2 * nostril

    mouth = _soft(_ellipse(yy, xx, cy + 26 * s + j(1), cx + j(0.7), 2.5 * s, 12 * s + j(1.5)), 0.25)
    img = img * (1 - mouth) + mouth * rng.uniform(0.25, 0.5)

    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 1.5 * s)
    img += 0.03 * texture / (texture.std() + 1e-12)
    return np.clip(img, 0.0, 1.0)


def synthetic_faces(n: int, size: int = 128, seed: int = 0) -> np.ndarray:
    """(n, 1, size, size) float64 stack."""
    rng = make_rng(seed)
    return np.stack([synthetic_face(rng, size) for _ in range(n)])[:, None]
