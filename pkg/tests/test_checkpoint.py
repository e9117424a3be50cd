import struct

import numpy as np
import pytest

from glnet import checkpoint as ckpt
from glnet.models import ModelDescriptor, build_discriminator, build_gln, build_model

DESCRIPTORS = [
    ModelDescriptor("gln", 4, 4, 3, 32),
    ModelDescriptor("gln", 8, 6, 4, 32),
    ModelDescriptor("gn", 8, 0, 5, 32),
    ModelDescriptor("ln", 0, 4, 6, 32, in_channels=1),
    ModelDescriptor("gn_only", 4, 0, 7, 32),
    ModelDescriptor("ln_only", 8, 4, 8, 32),
    ModelDescriptor("discriminator", 0, 0, 9, 32),
]


def perturb(model, seed=0):
    r = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p += r.normal(0, 0.01, p.shape).astype(p.dtype)
    for layer in model.parametric_layers():
        for m in layer.state.momentum.values():
            m[...] = r.normal(0, 1e-3, m.shape)


@pytest.mark.parametrize("desc", DESCRIPTORS, ids=lambda d: f"{d.name}-{d.factor}-{d.depth}")
def test_roundtrip_bitwise(desc):
    model = build_model(desc)
    perturb(model)
    blob = ckpt.to_bytes(model, optimizer_state=True)
    loaded = ckpt.from_bytes(blob)
    assert loaded.descriptor == desc
    assert ckpt.to_bytes(loaded, optimizer_state=True) == blob
    x = np.random.default_rng(1).random((2,) + model.input_shape).astype(np.float32)
    assert model.forward(x).tobytes() == loaded.forward(x).tobytes()


def test_file_roundtrip_and_peek(tmp_path):
    model = build_gln(8, 4, seed=2, hr_size=32)
    path = str(tmp_path / "m.glnc")
    ckpt.save(path, model)
    assert ckpt.peek(path) == model.descriptor
    with open(path, "rb") as fh:
        data = fh.read()
    assert data[:4] == b"GLNC"
    assert struct.unpack("<I", data[4:8])[0] == 1
    again = str(tmp_path / "m2.glnc")
    ckpt.save(again, ckpt.load(path))
    with open(again, "rb") as fh:
        assert fh.read() == data


def test_values_are_little_endian_f32():
    model = build_discriminator(seed=1, hr_size=16)
    blob = ckpt.to_bytes(model)
    w = dict(model.named_parameters())["disc.conv0.weight"]
    assert w.astype("<f4").tobytes() in blob


def test_optimizer_section_optional():
    model = build_gln(4, 4, hr_size=32)
    perturb(model)
    without = ckpt.from_bytes(ckpt.to_bytes(model))
    assert all(not m.any() for layer in without.parametric_layers() for m in layer.state.momentum.values())
    with_opt = ckpt.from_bytes(ckpt.to_bytes(model, optimizer_state=True))
    for a, b in zip(model.parametric_layers(), with_opt.parametric_layers()):
        for k in a.state.momentum:
            np.testing.assert_array_equal(a.state.momentum[k].astype(np.float32), b.state.momentum[k])


@pytest.mark.parametrize("cut", [0, 3, 7, 20, 60, -5, -1])
def test_truncated(cut):
    blob = ckpt.to_bytes(build_gln(4, 4, hr_size=32))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(blob[:cut])


def test_bad_magic_version_and_trailing():
    blob = ckpt.to_bytes(build_gln(4, 4, hr_size=32))
    with pytest.raises(ckpt.CheckpointError, match="GLNC"):
        ckpt.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.from_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.from_bytes(blob + b"\0")


def test_shape_disagreement_detected():
    small = ckpt.to_bytes(build_gln(4, 4, hr_size=32))
    # rewrite the descriptor's hr_size so the rebuilt graph disagrees with the records
    name_len = struct.unpack("<I", small[8:12])[0]
    off = 12 + name_len + 4 + 4 + 8
    forged = small[:off] + struct.pack("<I", 64) + small[off + 4:]
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(forged)
