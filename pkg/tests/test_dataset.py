import os

import numpy as np
import pytest

from glnet.dataset import (
    DatasetError,
    DatasetManifest,
    identity_key,
    load_pairs,
    prepare_dataset,
    split_identities,
)
from glnet.degradation import DegradationOperator, degrade
from glnet.imageio import encode_pgm, image_read, image_write, to_codes
from glnet.synthetic import synthetic_faces


@pytest.fixture
def faces_dir(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    faces = synthetic_faces(12, 128, seed=9)
    for i, f in enumerate(faces):
        image_write(str(src / f"subj{i // 3}_{i % 3:02d}.pgm"), f)
    return src


def snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = (fh.read(), os.stat(path).st_mtime_ns)
    return out


def test_identity_key():
    assert identity_key("04203d_12_a") == "04203d"
    assert identity_key("plain") == "plain"


@pytest.mark.parametrize("d,size", [(4, 32), (8, 16)])
def test_prepare_sizes_and_defaults(faces_dir, tmp_path, d, size):
    out = tmp_path / f"data{d}"
    m = prepare_dataset(str(faces_dir), str(out), d)
    assert m.sigma == {4: 1.2, 8: 2.4}[d]
    assert m.phase == d // 2
    assert len(m.entries) == 12
    lr = image_read(str(out / m.entries[0].lr))
    assert lr.shape == (1, 1, size, size)


def test_lr_files_are_quantised_degradation(faces_dir, tmp_path):
    m = prepare_dataset(str(faces_dir), str(tmp_path / "d"), 4)
    e = m.entries[0]
    hr = image_read(os.path.join(m.root, e.hr))
    lr_codes = image_read(os.path.join(m.root, e.lr), "0-255")
    expected = to_codes(degrade(hr, DegradationOperator.for_factor(4)))
    assert np.array_equal(lr_codes.astype(np.uint8), expected)


def test_split_is_identity_disjoint(faces_dir, tmp_path):
    m = prepare_dataset(str(faces_dir), str(tmp_path / "d"), 4, test_fraction=0.25, seed=3)
    assert m.split("train") and m.split("test")
    assert not (m.identities("train") & m.identities("test"))
    for e in m.entries:
        assert e.identity == identity_key(e.id)


def test_rerun_is_byte_identical_and_untouched(faces_dir, tmp_path):
    out = tmp_path / "d"
    prepare_dataset(str(faces_dir), str(out), 8, seed=1)
    first = snapshot(out)
    prepare_dataset(str(faces_dir), str(out), 8, seed=1)
    assert snapshot(out) == first


def test_manifest_json_roundtrip(faces_dir, tmp_path):
    m = prepare_dataset(str(faces_dir), str(tmp_path / "d"), 4)
    loaded = DatasetManifest.load(str(tmp_path / "d" / "manifest.json"))
    assert loaded == m
    assert loaded.operator() == DegradationOperator(1.2, 4, 4)


def test_load_pairs(faces_dir, tmp_path):
    m = prepare_dataset(str(faces_dir), str(tmp_path / "d"), 4)
    pairs = load_pairs(str(tmp_path / "d"), "train")
    assert pairs.lr.shape == (len(m.split("train")), 1, 32, 32)
    assert pairs.hr.shape[1:] == (1, 128, 128)
    assert pairs.ids == [e.id for e in m.split("train")]
    assert len(load_pairs(m, "all")) == 12


def test_non_128_source_rejected(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "a_1.pgm").write_bytes(encode_pgm(np.zeros((64, 64), dtype=np.uint8)))
    (src / "b_1.pgm").write_bytes(encode_pgm(np.zeros((64, 64), dtype=np.uint8)))
    with pytest.raises(DatasetError, match="128x128"):
        prepare_dataset(str(src), str(tmp_path / "d"), 4)


def test_empty_split_rejected(faces_dir, tmp_path):
    with pytest.raises(DatasetError, match="empty split"):
        prepare_dataset(str(faces_dir), str(tmp_path / "d"), 4, test_fraction=0.0)
    with pytest.raises(DatasetError):
        split_identities(["only"], 0.5, 0)


def test_empty_source_dir(tmp_path):
    (tmp_path / "src").mkdir()
    with pytest.raises(DatasetError):
        prepare_dataset(str(tmp_path / "src"), str(tmp_path / "d"), 4)


def test_rgb_sources_use_luma(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    rgb = np.random.default_rng(0).random((3, 128, 128))
    for name in ("a_0.png", "b_0.png"):
        image_write(str(src / name), rgb)
    m = prepare_dataset(str(src), str(tmp_path / "d"), 4, test_fraction=0.5)
    hr = image_read(os.path.join(m.root, m.entries[0].hr))
    assert hr.shape == (1, 1, 128, 128)
