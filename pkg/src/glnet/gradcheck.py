"""Finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import Layer
from .tensor import make_rng

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


class SquaredLoss:
    """``0.5 * sum((y - target)**2)``; the target defaults to zeros.

    ``delta`` gives ``L(y1) - L(y0)`` as a difference of squares, which keeps
    the rounding error proportional to the change rather than to the loss.
    """

    def __init__(self, target: np.ndarray | None = None):
        self.target = target

    def _t(self, y):
        return np.zeros_like(y) if self.target is None else self.target

    def __call__(self, y):
        r = y - self._t(y)
        return 0.5 * float(np.sum(r * r)), r

    def delta(self, y1, y0):
        return float(np.sum((y1 - y0) * (0.5 * (y1 + y0) - self._t(y1))))


def weighted_sum_loss(shape, seed: int = 0) -> LossFn:
    """Linear loss ``sum(w * y)`` with fixed random weights; FD is exact up to rounding."""
    w = make_rng(seed).standard_normal(shape)

    def fn(y):
        return float(np.sum(w * y)), w.astype(y.dtype)

    return fn


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int

    def __float__(self):
        return self.max_rel_error


def _parametric(network):
    if isinstance(network, Layer):
        return [network] if network.state.params else []
    return network.parametric_layers()


def _zero(network):
    for layer in _parametric(network):
        layer.state.zero_grad()


def _finite(value: float) -> float:
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss during gradient check")
    return value


def _central_difference(network, x, loss_fn, arr, idx, h) -> float:
    orig = arr[idx]
    arr[idx] = orig + h
    y_plus = network.forward(x)
    arr[idx] = orig - h
    y_minus = network.forward(x)
    arr[idx] = orig
    if hasattr(loss_fn, "delta"):
        _finite(loss_fn(y_plus)[0])
        return _finite(loss_fn.delta(y_plus, y_minus)) / (2 * h)
    return (_finite(float(loss_fn(y_plus)[0])) - _finite(float(loss_fn(y_minus)[0]))) / (2 * h)


def grad_check(
    network,
    x: np.ndarray,
    loss_fn: LossFn,
    h: float = 1e-5,
    samples: int | None = 100,
    seed: int = 0,
    check_input: bool = True,
) -> GradCheckResult:
    """Compare backprop gradients with central differences.

    ``network`` is a single :class:`Layer` or a graph. ``samples`` entries
    are drawn without replacement from all parameters (plus the input when
    ``check_input``); ``None`` checks every entry. The error of one entry is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    """
    layers = _parametric(network)
    for layer in layers:
        for name, p in layer.state.params.items():
            if p.dtype != np.float64:
                raise TypeError(f"{layer.name}.{name}: gradient checks need float64 parameters")
    x = np.array(x, dtype=np.float64)

    _zero(network)
    y = network.forward(x)
    loss, g = loss_fn(y)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss during gradient check")
    gx = network.backward(g, need_input_grad=True)

    # (label, array to perturb, analytic gradient)
    slots = []
    for layer in layers:
        for name, p in layer.state.params.items():
            slots.append((f"{layer.name}.{name}", p, layer.state.grads[name].copy()))
    if check_input and gx is not None:
        slots.append(("input", x, np.asarray(gx, dtype=np.float64)))

    sizes = np.array([s[1].size for s in slots])
    total = int(sizes.sum())
    if samples is None or samples >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(make_rng(seed).choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst, worst_label = 0.0, ""
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        label, arr, grad = slots[k]
        idx = np.unravel_index(int(flat - offsets[k]), arr.shape)
        fd = _central_difference(network, x, loss_fn, arr, idx, h)
        an = float(grad[idx])
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        if err > worst:
            worst, worst_label = err, f"{label}{list(idx)}"
    _zero(network)
    return GradCheckResult(worst, worst_label, len(picks))
