"""Binary ``.glnc`` checkpoints.

Layout (all integers little-endian)::

    b"GLNC"  u32 version
    descriptor: str name, u32 factor, u32 depth, u64 seed, u32 hr_size,
                u32 in_channels, u8 channel_order
    u32 record count, then per record:
        str name, str kind, u32 ndim, ndim x u32 dims, prod(dims) x f32 values
    u8 has_optimizer_state
    [u32 record count, records as above holding momentum buffers]

``str`` is a u32 byte length followed by UTF-8 bytes. Parameter records are
named ``<layer>.<param>`` in graph order.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .models import ModelDescriptor, NetworkGraph, build_model

MAGIC = b"GLNC"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt checkpoint or one that does not fit the requested graph."""


def _w_str(out, s: str):
    b = s.encode("utf-8")
    out.write(struct.pack("<I", len(b)))
    out.write(b)


def _r_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _r_str(buf) -> str:
    (n,) = struct.unpack("<I", _r_exact(buf, 4))
    return _r_exact(buf, n).decode("utf-8")


def _w_record(out, name, kind, array):
    _w_str(out, name)
    _w_str(out, kind)
    out.write(struct.pack("<I", array.ndim))
    out.write(struct.pack(f"<{array.ndim}I", *array.shape))
    out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _r_record(buf):
    name = _r_str(buf)
    kind = _r_str(buf)
    (ndim,) = struct.unpack("<I", _r_exact(buf, 4))
    if ndim > 8:
        raise CheckpointError(f"record {name!r}: implausible rank {ndim}")
    dims = struct.unpack(f"<{ndim}I", _r_exact(buf, 4 * ndim))
    count = int(np.prod(dims)) if dims else 1
    values = np.frombuffer(_r_exact(buf, 4 * count), dtype="<f4").reshape(dims)
    return name, kind, values


def _records(model: NetworkGraph, what: str):
    for layer in model.parametric_layers():
        source = layer.state.params if what == "params" else layer.state.momentum
        for key, value in source.items():
            yield f"{layer.name}.{key}", layer.spec.kind, value


def to_bytes(model: NetworkGraph, optimizer_state: bool = False) -> bytes:
    d = model.descriptor
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    _w_str(out, d.name)
    out.write(struct.pack("<IIQIIB", d.factor, d.depth, d.seed, d.hr_size, d.in_channels, d.channel_order))
    params = list(_records(model, "params"))
    out.write(struct.pack("<I", len(params)))
    for rec in params:
        _w_record(out, *rec)
    out.write(struct.pack("<B", 1 if optimizer_state else 0))
    if optimizer_state:
        moms = list(_records(model, "momentum"))
        out.write(struct.pack("<I", len(moms)))
        for name, _, value in moms:
            _w_record(out, name, "momentum", value)
    return out.getvalue()


def read_descriptor(buf) -> ModelDescriptor:
    if _r_exact(buf, 4) != MAGIC:
        raise CheckpointError("not a GLNC checkpoint")
    (version,) = struct.unpack("<I", _r_exact(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    name = _r_str(buf)
    factor, depth, seed, hr_size, in_channels, order = struct.unpack("<IIQIIB", _r_exact(buf, 25))
    return ModelDescriptor(name, factor, depth, seed, hr_size, in_channels, order)


def from_bytes(data: bytes, dtype=np.float32) -> NetworkGraph:
    buf = io.BytesIO(data)
    desc = read_descriptor(buf)
    try:
        model = build_model(desc, dtype=dtype)
    except ValueError as exc:
        raise CheckpointError(f"cannot rebuild {desc.name!r}: {exc}") from exc
    slots = {f"{layer.name}.{key}": (layer, key) for layer in model.parametric_layers() for key in layer.state.params}
    (count,) = struct.unpack("<I", _r_exact(buf, 4))
    if count != len(slots):
        raise CheckpointError(f"checkpoint has {count} parameter records, graph needs {len(slots)}")
    for _ in range(count):
        name, _, values = _r_record(buf)
        _assign(slots, name, values, "params")
    (has_opt,) = struct.unpack("<B", _r_exact(buf, 1))
    if has_opt:
        (count,) = struct.unpack("<I", _r_exact(buf, 4))
        for _ in range(count):
            name, _, values = _r_record(buf)
            _assign(slots, name, values, "momentum")
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return model


def _assign(slots, name, values, where):
    if name not in slots:
        raise CheckpointError(f"unknown parameter {name!r}")
    layer, key = slots[name]
    target = getattr(layer.state, where)[key]
    if target.shape != values.shape:
        raise CheckpointError(f"{name}: checkpoint shape {values.shape} != graph shape {target.shape}")
    target[...] = values


def save(path: str, model: NetworkGraph, optimizer_state: bool = False):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, optimizer_state))


def load(path: str, dtype=np.float32) -> NetworkGraph:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), dtype)


def peek(path: str) -> ModelDescriptor:
    with open(path, "rb") as fh:
        return read_descriptor(fh)
