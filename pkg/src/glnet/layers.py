"""Layer kernels with hand-written backward passes.

Only the fixed vocabulary needed by the upsampling networks and the
discriminator lives here: stride-1 same-size convolution, strided transposed
convolution, fully-connected maps, ReLU, 2x2 max pooling, channel
concatenation, a two-way softmax and a few parameter-free reshaping layers.

Every array is NCHW (or N x features for fully-connected layers). Layers
keep whatever they need from the forward pass and accumulate parameter
gradients into their :class:`LayerState` on ``backward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor
from .tensor import ShapeError

KINDS = (
    "conv", "deconv", "fully_connected", "relu", "maxpool", "concat", "softmax2",
    "flatten", "reshape", "upsample",
)
INITS = ("bilinear", "uniform_scaled", "zeros", "none")


@dataclass
class LayerSpec:
    kind: str
    kernel: int = 0
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1
    pad: int = 0
    weight_init: str = "none"
    seed: int = 0
    # target (C, H, W) for reshape, factor for upsample
    shape: tuple[int, ...] = ()
    factor: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weight_init not in INITS:
            raise ValueError(f"unknown weight init {self.weight_init!r}")


@dataclass
class LayerState:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "LayerState":
        return cls(
            params=params,
            grads={k: np.zeros_like(v) for k, v in params.items()},
            momentum={k: np.zeros_like(v) for k, v in params.items()},
        )

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)


class MissingActivation(RuntimeError):
    """backward() was called without a matching forward()."""


# ---------------------------------------------------------------------------
# weight initialisation


def layer_seed(seed: int, index: int) -> int:
    """Derive an independent 32-bit stream seed for layer ``index``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def bilinear_kernel(kernel: int) -> np.ndarray:
    """2-D tent filter of size ``kernel`` (even: factor ``kernel // 2``)."""
    factor = (kernel + 1) // 2
    center = factor - 1 if kernel % 2 == 1 else factor - 0.5
    og = np.arange(kernel, dtype=np.float64)
    tent = 1.0 - np.abs(og - center) / factor
    return np.outer(tent, tent)


# ---------------------------------------------------------------------------
# functional kernels


def _check_nchw(x: np.ndarray, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")


def im2col(x: np.ndarray, kernel: int, pad: int) -> np.ndarray:
    """(C, H, W) -> (H'*W', C*k*k) patch matrix for a stride-1 convolution.

    One row per output pixel; columns ordered (c, i, j) to match a weight
    tensor reshaped to (O, C*k*k).
    """
    xp = tensor.pad2d(x, pad, pad)
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))  # C, H', W', k, k
    c, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kernel * kernel)


def col2im(cols: np.ndarray, channels: int, height: int, width: int, kernel: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to a (C, H, W) image."""
    ho = height + 2 * pad - kernel + 1
    wo = width + 2 * pad - kernel + 1
    cols = cols.reshape(ho, wo, channels, kernel, kernel)
    out = np.zeros((height + 2 * pad, width + 2 * pad, channels), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[i:i + ho, j:j + wo] += cols[:, :, :, i, j]
    return np.ascontiguousarray(tensor.crop2d(out.transpose(2, 0, 1), pad, pad))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, pad: int):
    """Stride-1 cross-correlation. Returns ``(out, cols)``; cols feed the backward pass.

    ``out[n, o, y, x] = bias[o] + sum_{c,i,j} weight[o, c, i, j] * xpad[n, c, y + i, x + j]``
    """
    _check_nchw(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d expects {ci} input channels, got {c}")
    wt = weight.reshape(o, -1).T
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.empty((n, o, ho, wo), dtype=weight.dtype)
    cols = []
    for b in range(n):
        col = im2col(x[b].astype(weight.dtype, copy=False), k, pad)
        out[b] = (col @ wt).T.reshape(o, ho, wo)
        cols.append(col)
    out += bias.reshape(1, o, 1, 1)
    return out, cols


def flipped_transpose(weight: np.ndarray) -> np.ndarray:
    """Kernel whose same-padded correlation is the adjoint of ``weight``'s."""
    return np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv2d_backward(grad_out, cols, input_shape, weight, pad, need_input_grad=True):
    """Returns ``(grad_in or None, grad_w, grad_b)``.

    The input gradient is a col2im scatter of ``grad @ W`` when the layer
    widens (O > C) and a correlation of the gradient with the flipped,
    transposed kernel otherwise; both give the same values, the cheaper one
    is picked.
    """
    n, c, h, w = input_shape
    o, _, k, _ = weight.shape
    if grad_out.shape[0] != n or grad_out.shape[1] != o:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output")
    if len(cols) != n:
        raise MissingActivation("saved patches do not match the batch")
    wmat = weight.reshape(o, -1)
    grad_w = np.zeros_like(wmat)
    for b in range(n):
        grad_w += grad_out[b].reshape(o, -1) @ cols[b]
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_in = None
    if need_input_grad:
        if o > c or 2 * pad + 1 != k:
            grad_in = np.empty(input_shape, dtype=weight.dtype)
            for b in range(n):
                g = grad_out[b].reshape(o, -1).T
                grad_in[b] = col2im(g @ wmat, c, h, w, k, pad)
        else:
            grad_in, _ = conv2d(grad_out, flipped_transpose(weight), np.zeros(c, weight.dtype), pad)
    return grad_in, grad_w.reshape(weight.shape), grad_b


def deconv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Transposed convolution; ``weight`` is (C_in, C_out, k, k)."""
    _check_nchw(x, "deconv2d")
    n, c, h, w = x.shape
    ci, o, k, _ = weight.shape
    if c != ci:
        raise ShapeError(f"deconv2d expects {ci} input channels, got {c}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    if hf - 2 * pad <= 0 or wf - 2 * pad <= 0:
        raise ShapeError("deconv2d padding larger than output")
    full = np.zeros((n, o, hf, wf), dtype=weight.dtype)
    span_h, span_w = (h - 1) * stride + 1, (w - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("nchw,co->nohw", x, weight[:, :, i, j])
            full[:, :, i:i + span_h:stride, j:j + span_w:stride] += contrib
    out = full[:, :, pad:hf - pad, pad:wf - pad]
    return np.ascontiguousarray(out) + bias.reshape(1, o, 1, 1)


def deconv2d_backward(grad_out, x, weight, stride, pad, need_input_grad=True):
    n, c, h, w = x.shape
    _, o, k, _ = weight.shape
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    if grad_out.shape != (n, o, hf - 2 * pad, wf - 2 * pad):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match deconv output")
    full = tensor.pad2d(grad_out, pad, pad)
    span_h, span_w = (h - 1) * stride + 1, (w - 1) * stride + 1
    grad_w = np.zeros_like(weight)
    grad_in = np.zeros(x.shape, dtype=weight.dtype) if need_input_grad else None
    for i in range(k):
        for j in range(k):
            g = full[:, :, i:i + span_h:stride, j:j + span_w:stride]
            grad_w[:, :, i, j] = np.einsum("nchw,nohw->co", x, g)
            if need_input_grad:
                grad_in += np.einsum("nohw,co->nchw", g, weight[:, :, i, j])
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_in, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return grad_out * (saved_input > 0)


def maxpool2d(x: np.ndarray):
    """2x2 / stride 2 max pool. Returns ``(out, argmax)``, argmax in 0..3 row-major."""
    _check_nchw(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, first: int):
    return grad[:, :first], grad[:, first:]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """Base class. Subclasses set ``spec`` and ``state`` and implement forward/backward."""

    def __init__(self, name: str, spec: LayerSpec, state: LayerState | None = None):
        self.name = name
        self.spec = spec
        self.state = state if state is not None else LayerState()
        self._saved = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def _take_saved(self):
        if self._saved is None:
            raise MissingActivation(f"{self.name}: backward() without forward()")
        saved, self._saved = self._saved, None
        return saved

    def _accumulate(self, **grads):
        for key, g in grads.items():
            self.state.grads[key] += g

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.state.params.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2d(Layer):
    """Stride-1 convolution with ``floor(k/2)`` zero padding (size preserving)."""

    def __init__(self, name, in_channels, out_channels, kernel, seed=0, init="uniform_scaled", dtype=None):
        spec = LayerSpec(
            "conv", kernel=kernel, in_channels=in_channels, out_channels=out_channels,
            stride=1, pad=tensor.same_padding(kernel), weight_init=init, seed=seed,
        )
        dtype = dtype or tensor.default_dtype()
        shape = (out_channels, in_channels, kernel, kernel)
        if init == "uniform_scaled":
            bound = glorot_bound(in_channels * kernel * kernel, out_channels * kernel * kernel)
            weight = tensor.tensor_create(shape, tensor.Uniform(-bound, bound, seed), dtype)
        else:
            weight = np.zeros(shape, dtype=dtype)
        bias = np.zeros(out_channels, dtype=dtype)
        super().__init__(name, spec, LayerState.for_params({"weight": weight, "bias": bias}))

    def forward(self, x):
        out, cols = conv2d(x, self.state.params["weight"], self.state.params["bias"], self.spec.pad)
        self._saved = (x.shape, cols)
        return out

    def backward(self, grad_out, need_input_grad=True):
        shape, cols = self._take_saved()
        gi, gw, gb = conv2d_backward(
            grad_out, cols, shape, self.state.params["weight"], self.spec.pad, need_input_grad
        )
        self._accumulate(weight=gw, bias=gb)
        return gi

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if c != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {c}")
        return (n, self.spec.out_channels, h, w)


class Deconv2d(Layer):
    """Transposed convolution with kernel ``2*factor``, stride ``factor``, pad ``factor/2``."""

    def __init__(self, name, factor, in_channels=1, out_channels=1, seed=0, init="bilinear", dtype=None):
        if factor < 2 or factor % 2:
            raise ShapeError(f"deconv factor must be even and >= 2, got {factor}")
        kernel = 2 * factor
        spec = LayerSpec(
            "deconv", kernel=kernel, in_channels=in_channels, out_channels=out_channels,
            stride=factor, pad=factor // 2, weight_init=init, seed=seed,
        )
        dtype = dtype or tensor.default_dtype()
        shape = (in_channels, out_channels, kernel, kernel)
        weight = np.zeros(shape, dtype=dtype)
        if init == "bilinear":
            filt = bilinear_kernel(kernel)
            for c in range(min(in_channels, out_channels)):
                weight[c, c] = filt
        elif init == "uniform_scaled":
            bound = glorot_bound(in_channels * kernel * kernel, out_channels * kernel * kernel)
            weight = tensor.tensor_create(shape, tensor.Uniform(-bound, bound, seed), dtype)
        bias = np.zeros(out_channels, dtype=dtype)
        super().__init__(name, spec, LayerState.for_params({"weight": weight, "bias": bias}))

    def forward(self, x):
        self._saved = x
        return deconv2d(x, self.state.params["weight"], self.state.params["bias"], self.spec.stride, self.spec.pad)

    def backward(self, grad_out, need_input_grad=True):
        x = self._take_saved()
        gi, gw, gb = deconv2d_backward(
            grad_out, x, self.state.params["weight"], self.spec.stride, self.spec.pad, need_input_grad
        )
        self._accumulate(weight=gw, bias=gb)
        return gi

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if c != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {c}")
        s = self.spec.stride
        return (n, self.spec.out_channels, h * s, w * s)


class FullyConnected(Layer):
    def __init__(self, name, in_features, out_features, seed=0, init="uniform_scaled", dtype=None):
        spec = LayerSpec(
            "fully_connected", in_channels=in_features, out_channels=out_features,
            weight_init=init, seed=seed,
        )
        dtype = dtype or tensor.default_dtype()
        shape = (out_features, in_features)
        if init == "uniform_scaled":
            bound = glorot_bound(in_features, out_features)
            weight = tensor.tensor_create(shape, tensor.Uniform(-bound, bound, seed), dtype)
        else:
            weight = np.zeros(shape, dtype=dtype)
        bias = np.zeros(out_features, dtype=dtype)
        super().__init__(name, spec, LayerState.for_params({"weight": weight, "bias": bias}))

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected (N, {self.spec.in_channels}) input, got {x.shape}")
        self._saved = x
        return x @ self.state.params["weight"].T + self.state.params["bias"]

    def backward(self, grad_out, need_input_grad=True):
        x = self._take_saved()
        self._accumulate(weight=grad_out.T @ x, bias=grad_out.sum(axis=0))
        return grad_out @ self.state.params["weight"] if need_input_grad else None

    def output_shape(self, input_shape):
        n, f = input_shape
        if f != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} features, got {f}")
        return (n, self.spec.out_channels)


class ReLU(Layer):
    def __init__(self, name):
        super().__init__(name, LayerSpec("relu"))

    def forward(self, x):
        self._saved = x
        return relu(x)

    def backward(self, grad_out, need_input_grad=True):
        return relu_backward(grad_out, self._take_saved())

    def output_shape(self, input_shape):
        return tuple(input_shape)


class MaxPool2d(Layer):
    def __init__(self, name):
        super().__init__(name, LayerSpec("maxpool", kernel=2, stride=2))

    def forward(self, x):
        out, arg = maxpool2d(x)
        self._saved = arg
        return out

    def backward(self, grad_out, need_input_grad=True):
        return maxpool2d_backward(grad_out, self._take_saved())

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: odd spatial dims {h}x{w}")
        return (n, c, h // 2, w // 2)


class Flatten(Layer):
    def __init__(self, name):
        super().__init__(name, LayerSpec("flatten"))

    def forward(self, x):
        self._saved = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, need_input_grad=True):
        return grad_out.reshape(self._take_saved())

    def output_shape(self, input_shape):
        return (input_shape[0], int(np.prod(input_shape[1:])))


class Reshape(Layer):
    """(N, C*H*W) -> (N, C, H, W)."""

    def __init__(self, name, shape):
        super().__init__(name, LayerSpec("reshape", shape=tuple(shape)))

    def forward(self, x):
        self._saved = x.shape
        return x.reshape((x.shape[0],) + self.spec.shape)

    def backward(self, grad_out, need_input_grad=True):
        return grad_out.reshape(self._take_saved())

    def output_shape(self, input_shape):
        if int(np.prod(input_shape[1:])) != int(np.prod(self.spec.shape)):
            raise ShapeError(f"{self.name}: cannot reshape {input_shape} to {self.spec.shape}")
        return (input_shape[0],) + self.spec.shape


class Softmax2(Layer):
    """Two-way softmax over the feature axis of an (N, 2) logit matrix."""

    def __init__(self, name):
        super().__init__(name, LayerSpec("softmax2"))

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != 2:
            raise ShapeError(f"{self.name}: expected (N, 2) logits, got {x.shape}")
        p = softmax(x)
        self._saved = p
        return p

    def backward(self, grad_out, need_input_grad=True):
        return softmax_backward(grad_out, self._take_saved())

    def output_shape(self, input_shape):
        return tuple(input_shape)


class BilinearUpsample(Layer):
    """Fixed (untrainable) separable bilinear enlargement by ``factor``."""

    def __init__(self, name, factor):
        super().__init__(name, LayerSpec("upsample", factor=factor))

    def forward(self, x):
        from .degradation import interpolation_matrix

        _check_nchw(x, "upsample")
        h, w = x.shape[2:]
        ah = interpolation_matrix(h, self.spec.factor, "bilinear").astype(x.dtype)
        aw = interpolation_matrix(w, self.spec.factor, "bilinear").astype(x.dtype)
        self._saved = (ah, aw)
        return np.einsum("Yh,nchw,Xw->ncYX", ah, x, aw, optimize=True)

    def backward(self, grad_out, need_input_grad=True):
        ah, aw = self._take_saved()
        return np.einsum("Yh,ncYX,Xw->nchw", ah, grad_out, aw, optimize=True)

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        return (n, c, h * self.spec.factor, w * self.spec.factor)
