import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from glnet.imageio import (
    ImageFormatError,
    encode_pgm,
    image_read,
    image_write,
    parse_pgm,
    rgb_to_yuv,
    to_codes,
    yuv_to_rgb,
)
from glnet.tensor import ShapeError


def codes(shape, seed=0):
    return np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)


def test_pgm_header_parses_to_tensor(tmp_path):
    body = codes((128, 128)).tobytes()
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n128 128\n255\n" + body)
    img = image_read(str(path), "0-255")
    assert img.shape == (1, 1, 128, 128)
    assert img.ravel().astype(np.uint8).tobytes() == body


def test_pgm_write_read_identical_bytes(tmp_path):
    c = codes((128, 128), 1)
    src = tmp_path / "src.pgm"
    src.write_bytes(encode_pgm(c))
    img = image_read(str(src))
    out = tmp_path / "out.pgm"
    image_write(str(out), img)
    assert out.read_bytes() == src.read_bytes()


def test_pgm_header_comments_and_maxval():
    data = b"P5\n# made by hand\n3 2\n# depth\n100\n" + bytes(range(6))
    assert parse_pgm(data).tolist() == [[0, 1, 2], [3, 4, 5]]


@pytest.mark.parametrize(
    "data",
    [
        b"",
        b"P5\n4 4\n255\n" + bytes(10),
        b"P5\n4 4",
        b"P2\n2 2\n255\n0 0 0 0",
        b"P5\n2 2\n65535\n" + bytes(8),
        b"P5\nx 2\n255\n" + bytes(4),
        b"P5\n0 2\n255\n",
    ],
)
def test_pgm_malformed(data):
    with pytest.raises(ImageFormatError):
        parse_pgm(data)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64), st.integers(0, 60))
def test_pgm_truncation_fuzz(noise, cut):
    good = encode_pgm(codes((5, 6), 3))
    for data in (good[:cut], good[:cut] + noise):
        try:
            out = parse_pgm(data)
        except ImageFormatError:
            continue
        assert out.dtype == np.uint8 and out.ndim == 2


def test_png_gray_and_rgb_roundtrip(tmp_path):
    g = codes((20, 30), 4)
    image_write(str(tmp_path / "g.png"), g[None].astype(np.float64), "0-255")
    assert np.array_equal(image_read(str(tmp_path / "g.png"), "0-255")[0, 0], g)
    rgb = codes((3, 20, 30), 5)
    image_write(str(tmp_path / "c.png"), rgb / 255.0)
    back = image_read(str(tmp_path / "c.png"))
    assert back.shape == (1, 3, 20, 30)
    assert np.array_equal(to_codes(back[0]), rgb)


def test_png_16_bit_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(ImageFormatError, match="bit depth"):
        image_read(str(tmp_path / "d.png"))


def test_corrupt_png(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\nnonsense")
    with pytest.raises(ImageFormatError):
        image_read(str(tmp_path / "bad.png"))


def test_unsupported_extension(tmp_path):
    (tmp_path / "a.bmp").write_bytes(b"BM")
    with pytest.raises(ImageFormatError):
        image_read(str(tmp_path / "a.bmp"))
    with pytest.raises(ImageFormatError):
        image_write(str(tmp_path / "a.jpg"), np.zeros((1, 4, 4)))
    with pytest.raises(ImageFormatError):
        image_write(str(tmp_path / "a.pgm"), np.zeros((3, 4, 4)))


def test_pixel_scales(tmp_path):
    c = codes((4, 4), 6)
    (tmp_path / "s.pgm").write_bytes(encode_pgm(c))
    unit = image_read(str(tmp_path / "s.pgm"), "0-1")
    full = image_read(str(tmp_path / "s.pgm"), "0-255")
    np.testing.assert_allclose(unit * 255, full)
    with pytest.raises(ValueError):
        image_read(str(tmp_path / "s.pgm"), "0-100")


def test_gray_pixel_has_zero_chroma():
    c = np.full((1, 3, 2, 2), 0.42)
    y, u, v = rgb_to_yuv(c)
    np.testing.assert_allclose(y, 0.42, atol=1e-15)
    np.testing.assert_allclose(u, 0.0, atol=1e-15)
    np.testing.assert_allclose(v, 0.0, atol=1e-15)


def test_yuv_roundtrip_within_one_code():
    rgb = codes((1, 3, 32, 32), 7) / 255.0
    back = yuv_to_rgb(*rgb_to_yuv(rgb))
    assert np.abs(back - rgb).max() < 1 / 255
    assert np.array_equal(to_codes(back), to_codes(rgb))


def test_yuv_wrong_channels():
    with pytest.raises(ShapeError):
        rgb_to_yuv(np.zeros((1, 2, 4, 4)))
