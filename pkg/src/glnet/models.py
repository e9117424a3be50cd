"""Network builders: GN, LN, GLN, the ablation variants and the discriminator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import layers as L
from .tensor import ShapeError

HR_SIZE = 128

# hidden widths of the global detail (fully-connected) stream per factor
DETAIL_WIDTHS = {4: (512, 256, 512), 8: (256, 256, 256)}

# (kernel, filters) per LN depth, excluding the final conv5-1
LN_STACKS = {
    4: ((5, 16), (7, 64), (5, 16)),
    6: ((5, 16), (7, 32), (7, 64), (7, 32), (5, 16)),
    8: ((5, 16), (7, 32), (7, 64), (7, 64), (7, 64), (7, 32), (5, 16)),
}

# channel 0 of the GN output is the deconvolution (upsampling) stream
CHANNEL_ORDER_UPSAMPLE_FIRST = 0

BUILDERS = ("gln", "gn", "ln", "gn_only", "ln_only", "discriminator")


@dataclass(frozen=True)
class ModelDescriptor:
    """Everything needed to rebuild a graph with freshly initialised parameters."""

    name: str
    factor: int = 0
    depth: int = 0
    seed: int = 0
    hr_size: int = HR_SIZE
    in_channels: int = 1
    channel_order: int = CHANNEL_ORDER_UPSAMPLE_FIRST

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.factor if self.factor else self.hr_size


class TwoStream:
    """Run two layer chains on the same input and concatenate along channels."""

    def __init__(self, name: str, first: list[L.Layer], second: list[L.Layer]):
        self.name = name
        self.streams = (first, second)
        self._split = None

    def forward(self, x):
        a = _run(self.streams[0], x)
        b = _run(self.streams[1], x)
        self._split = a.shape[1]
        return L.concat_channels(a, b)

    def backward(self, grad_out, need_input_grad=True):
        ga, gb = L.split_channels(grad_out, self._split)
        gi_a = _run_back(self.streams[0], np.ascontiguousarray(ga), need_input_grad)
        gi_b = _run_back(self.streams[1], np.ascontiguousarray(gb), need_input_grad)
        return gi_a + gi_b if need_input_grad else None

    def output_shape(self, input_shape):
        a = _shape(self.streams[0], input_shape)
        b = _shape(self.streams[1], input_shape)
        if a[0] != b[0] or a[2:] != b[2:]:
            raise ShapeError(f"{self.name}: stream shapes {a} and {b} cannot be concatenated")
        return (a[0], a[1] + b[1]) + tuple(a[2:])

    def layers(self):
        return [*self.streams[0], *self.streams[1]]


def _run(chain, x):
    for layer in chain:
        x = layer.forward(x)
    return x


def _run_back(chain, g, need_input_grad):
    for i in range(len(chain) - 1, -1, -1):
        g = chain[i].backward(g, need_input_grad=need_input_grad or i > 0)
    return g


def _shape(chain, shape):
    for layer in chain:
        shape = layer.output_shape(shape)
    return tuple(shape)


class NetworkGraph:
    """An ordered stack of layers and two-stream stages."""

    def __init__(self, descriptor: ModelDescriptor, stages, input_shape: tuple[int, int, int]):
        self.descriptor = descriptor
        self.stages = list(stages)
        self.input_shape = tuple(input_shape)
        self.output_shape = _shape(self.stages, (1,) + self.input_shape)[1:]

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def topology(self) -> str:
        return "two-stream-then-concat" if any(isinstance(s, TwoStream) for s in self.stages) else "chain"

    def layers(self) -> list[L.Layer]:
        out = []
        for stage in self.stages:
            out.extend(stage.layers() if isinstance(stage, TwoStream) else [stage])
        return out

    def parametric_layers(self) -> list[L.Layer]:
        return [layer for layer in self.layers() if layer.state.params]

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.parametric_layers():
            for key, value in layer.state.params.items():
                yield f"{layer.name}.{key}", value

    @property
    def num_parameters(self) -> int:
        return sum(layer.num_parameters for layer in self.layers())

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name}: expected (N,) + {self.input_shape} input, got {x.shape}")
        return _run(self.stages, x)

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = False):
        return _run_back(self.stages, grad_out, need_input_grad)

    __call__ = forward

    def zero_grad(self):
        for layer in self.parametric_layers():
            layer.state.zero_grad()

    def reset_momentum(self):
        for layer in self.parametric_layers():
            for m in layer.state.momentum.values():
                m.fill(0)

    def describe(self) -> str:
        lines = [f"{self.name} ({self.topology}) {self.input_shape} -> {self.output_shape}"]
        for layer in self.layers():
            s = layer.spec
            detail = {
                "conv": f"conv{s.kernel}-{s.out_channels}",
                "deconv": f"deconv{s.stride}",
                "fully_connected": f"fc-{s.out_channels}",
            }.get(s.kind, s.kind)
            lines.append(f"  {layer.name:<24} {detail}")
        return "\n".join(lines)


class DiscriminatorGraph(NetworkGraph):
    """Chain ending in a two-way softmax; column 1 is p(reconstructed)."""

    RECONSTRUCTED = 1

    def probability(self, x: np.ndarray) -> np.ndarray:
        """D(x) for each image in the batch."""
        return self.forward(x)[:, self.RECONSTRUCTED]

    def backward_probability(self, grad_d: np.ndarray, need_input_grad: bool = True):
        """Backpropagate dLoss/dD(x) (shape (N,)) through the network."""
        g = np.zeros((grad_d.shape[0], 2), dtype=grad_d.dtype)
        g[:, self.RECONSTRUCTED] = grad_d
        return self.backward(g, need_input_grad=need_input_grad)


# ---------------------------------------------------------------------------
# builders


class _Seeds:
    def __init__(self, seed):
        self.seed = seed
        self.index = 0

    def __call__(self):
        s = L.layer_seed(self.seed, self.index)
        self.index += 1
        return s


def _check_factor(d):
    if d not in DETAIL_WIDTHS:
        raise ValueError(f"upsampling factor must be 4 or 8, got {d}")


def _check_depth(depth):
    if depth not in LN_STACKS:
        raise ValueError(f"LN depth must be 4, 6 or 8, got {depth}")


def _detail_stream(d, hr_size, seeds, dtype, prefix="gn.detail"):
    lr = hr_size // d
    widths = (lr * lr,) + DETAIL_WIDTHS[d] + (hr_size * hr_size,)
    chain: list[L.Layer] = [L.Flatten(f"{prefix}.flatten")]
    for i in range(len(widths) - 1):
        chain.append(L.FullyConnected(f"{prefix}.fc{i}", widths[i], widths[i + 1], seed=seeds(), dtype=dtype))
        if i < len(widths) - 2:
            chain.append(L.ReLU(f"{prefix}.relu{i}"))
    chain.append(L.Reshape(f"{prefix}.reshape", (1, hr_size, hr_size)))
    return chain


def _gn_stage(d, hr_size, seeds, dtype):
    _check_factor(d)
    if hr_size % d:
        raise ShapeError(f"high-resolution size {hr_size} not divisible by {d}")
    up = [L.Deconv2d(f"gn.up.deconv{d}", d, seed=seeds(), init="bilinear", dtype=dtype)]
    return TwoStream("gn", up, _detail_stream(d, hr_size, seeds, dtype))


def _ln_chain(depth, in_channels, seeds, dtype, prefix="ln"):
    _check_depth(depth)
    chain: list[L.Layer] = []
    c = in_channels
    for i, (k, filters) in enumerate(LN_STACKS[depth]):
        chain.append(L.Conv2d(f"{prefix}.conv{i}", c, filters, k, seed=seeds(), dtype=dtype))
        chain.append(L.ReLU(f"{prefix}.relu{i}"))
        c = filters
    chain.append(L.Conv2d(f"{prefix}.conv{len(LN_STACKS[depth])}", c, 1, 5, seed=seeds(), dtype=dtype))
    return chain


def build_gn(d: int, seed: int = 0, hr_size: int = HR_SIZE, dtype=None) -> NetworkGraph:
    desc = ModelDescriptor("gn", factor=d, seed=seed, hr_size=hr_size)
    stage = _gn_stage(d, hr_size, _Seeds(seed), dtype)
    return NetworkGraph(desc, [stage], (1, hr_size // d, hr_size // d))


def build_ln(depth: int, in_channels: int = 2, seed: int = 0, hr_size: int = HR_SIZE, dtype=None) -> NetworkGraph:
    if in_channels not in (1, 2):
        raise ValueError("LN takes 1 or 2 input channels")
    desc = ModelDescriptor("ln", depth=depth, seed=seed, hr_size=hr_size, in_channels=in_channels)
    return NetworkGraph(desc, _ln_chain(depth, in_channels, _Seeds(seed), dtype), (in_channels, hr_size, hr_size))


def build_gln(d: int, depth: int = 8, seed: int = 0, hr_size: int = HR_SIZE, dtype=None) -> NetworkGraph:
    """GN (deconv stream + detail stream, concatenated) followed by LN on 2 channels."""
    seeds = _Seeds(seed)
    desc = ModelDescriptor("gln", factor=d, depth=depth, seed=seed, hr_size=hr_size)
    stages = [_gn_stage(d, hr_size, seeds, dtype), *_ln_chain(depth, 2, seeds, dtype)]
    return NetworkGraph(desc, stages, (1, hr_size // d, hr_size // d))


def build_gn_only(d: int, seed: int = 0, hr_size: int = HR_SIZE, dtype=None) -> NetworkGraph:
    _check_factor(d)
    desc = ModelDescriptor("gn_only", factor=d, seed=seed, hr_size=hr_size)
    return NetworkGraph(desc, _detail_stream(d, hr_size, _Seeds(seed), dtype), (1, hr_size // d, hr_size // d))


def build_ln_only(d: int, depth: int = 8, seed: int = 0, hr_size: int = HR_SIZE, dtype=None) -> NetworkGraph:
    """Fixed bilinear enlargement followed by LN (one input channel)."""
    _check_factor(d)
    desc = ModelDescriptor("ln_only", factor=d, depth=depth, seed=seed, hr_size=hr_size)
    stages = [L.BilinearUpsample("bilinear", d), *_ln_chain(depth, 1, _Seeds(seed), dtype)]
    return NetworkGraph(desc, stages, (1, hr_size // d, hr_size // d))


def build_discriminator(seed: int = 0, hr_size: int = HR_SIZE, dtype=None) -> DiscriminatorGraph:
    if hr_size % 4:
        raise ShapeError("discriminator input size must be divisible by 4")
    seeds = _Seeds(seed)
    q = hr_size // 4
    stages = [
        L.Conv2d("disc.conv0", 1, 16, 5, seed=seeds(), dtype=dtype),
        L.ReLU("disc.relu0"),
        L.MaxPool2d("disc.pool0"),
        L.Conv2d("disc.conv1", 16, 16, 5, seed=seeds(), dtype=dtype),
        L.ReLU("disc.relu1"),
        L.MaxPool2d("disc.pool1"),
        L.Flatten("disc.flatten"),
        L.FullyConnected("disc.fc0", q * q * 16, 50, seed=seeds(), dtype=dtype),
        L.ReLU("disc.relu2"),
        L.FullyConnected("disc.fc1", 50, 2, seed=seeds(), dtype=dtype),
        L.Softmax2("disc.softmax"),
    ]
    desc = ModelDescriptor("discriminator", seed=seed, hr_size=hr_size)
    return DiscriminatorGraph(desc, stages, (1, hr_size, hr_size))


def build_model(desc: ModelDescriptor, dtype=None) -> NetworkGraph:
    """Rebuild the graph named by a descriptor (parameters freshly initialised)."""
    if desc.name == "gln":
        return build_gln(desc.factor, desc.depth, desc.seed, desc.hr_size, dtype)
    if desc.name == "gn":
        return build_gn(desc.factor, desc.seed, desc.hr_size, dtype)
    if desc.name == "ln":
        return build_ln(desc.depth, desc.in_channels, desc.seed, desc.hr_size, dtype)
    if desc.name == "gn_only":
        return build_gn_only(desc.factor, desc.seed, desc.hr_size, dtype)
    if desc.name == "ln_only":
        return build_ln_only(desc.factor, desc.depth, desc.seed, desc.hr_size, dtype)
    if desc.name == "discriminator":
        return build_discriminator(desc.seed, desc.hr_size, dtype)
    raise ValueError(f"unknown builder {desc.name!r}")


def receptive_field(graph: NetworkGraph) -> int:
    """1 + sum(k - 1) over a chain of stride-1 convolutions."""
    if graph.topology != "chain":
        raise ValueError(f"{graph.name}: receptive field is defined for conv chains only")
    rf = 1
    for layer in graph.layers():
        kind = layer.spec.kind
        if kind == "conv":
            if layer.spec.stride != 1:
                raise ValueError(f"{layer.name}: strided convolution")
            rf += layer.spec.kernel - 1
        elif kind != "relu":
            raise ValueError(f"{layer.name}: {kind} layer in a conv chain")
    return rf

