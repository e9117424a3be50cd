"""Paired low/high-resolution datasets on disk.

``prepare_dataset`` reads aligned 128x128 sources, writes ``hr/<id>.pgm`` and
the degraded ``lr/<id>.pgm`` under the output directory and records
everything in ``manifest.json``. The split is by identity: the identity key is
the part of the file name before the first underscore, so all images of one
subject land in the same split.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .degradation import DegradationOperator, degrade
from .imageio import encode_pgm, image_read, read_codes, rgb_to_yuv, to_codes
from .models import HR_SIZE
from .tensor import make_rng
from .training import PairSet

IMAGE_EXTENSIONS = (".pgm", ".png")
MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    pass


@dataclass
class Entry:
    id: str
    identity: str
    split: str
    hr: str
    lr: str


@dataclass
class DatasetManifest:
    root: str
    factor: int
    sigma: float
    phase: int
    radius: int
    pixel_scale: str = "0-1"
    seed: int = 0
    test_fraction: float = 0.2
    entries: list[Entry] = field(default_factory=list)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def identities(self, name: str) -> set[str]:
        return {e.identity for e in self.split(name)}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        data["entries"] = [Entry(**e) for e in data.get("entries", [])]
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def operator(self) -> DegradationOperator:
        return DegradationOperator(self.sigma, self.factor, self.radius)


def identity_key(image_id: str) -> str:
    return image_id.split("_", 1)[0]


def _sources(src_dir: str) -> list[str]:
    names = sorted(n for n in os.listdir(src_dir) if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS)
    if not names:
        raise DatasetError(f"no .pgm/.png images in {src_dir}")
    return names


def _gray_codes(path: str) -> np.ndarray:
    codes = read_codes(path)
    if codes.shape[0] == 3:
        y = rgb_to_yuv(codes.astype(np.float64) / 255.0)[0]
        codes = to_codes(y)
    return codes[0]


def split_identities(identities: list[str], test_fraction: float, seed: int) -> set[str]:
    """Seeded choice of the test identities; both splits are non-empty."""
    ids = sorted(set(identities))
    n_test = int(math.ceil(test_fraction * len(ids)))
    if n_test < 1 or n_test >= len(ids):
        raise DatasetError(
            f"{len(ids)} identities with test fraction {test_fraction} leaves an empty split"
        )
    order = make_rng(seed).permutation(len(ids))
    return {ids[i] for i in order[:n_test]}


def _write_if_changed(path: str, data: bytes):
    if os.path.exists(path):
        with open(path, "rb") as fh:
            if fh.read() == data:
                return
    with open(path, "wb") as fh:
        fh.write(data)


def prepare_dataset(
    src_dir: str,
    out_dir: str,
    factor: int,
    sigma: float | None = None,
    test_fraction: float = 0.2,
    seed: int = 0,
    pixel_scale: str = "0-1",
) -> DatasetManifest:
    """Degrade every source image and write an identity-disjoint manifest.

    Reruns with the same arguments rewrite nothing.
    """
    op = DegradationOperator.for_factor(factor, sigma)
    names = _sources(src_dir)
    ids = [os.path.splitext(n)[0] for n in names]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate image ids (same stem with different extensions)")
    sources = []
    for name in names:
        codes = _gray_codes(os.path.join(src_dir, name))
        if codes.shape != (HR_SIZE, HR_SIZE):
            raise DatasetError(f"{name}: expected {HR_SIZE}x{HR_SIZE}, got {codes.shape[1]}x{codes.shape[0]}")
        sources.append(codes)
    test_ids = split_identities([identity_key(i) for i in ids], test_fraction, seed)

    os.makedirs(os.path.join(out_dir, "hr"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "lr"), exist_ok=True)
    manifest = DatasetManifest(
        root=os.path.abspath(out_dir), factor=factor, sigma=op.sigma, phase=op.phase, radius=op.radius,
        pixel_scale=pixel_scale, seed=seed, test_fraction=test_fraction,
    )
    for codes, image_id in zip(sources, ids):
        lr = to_codes(degrade(codes.astype(np.float64) / 255.0, op))
        hr_rel = os.path.join("hr", image_id + ".pgm")
        lr_rel = os.path.join("lr", image_id + ".pgm")
        _write_if_changed(os.path.join(out_dir, hr_rel), encode_pgm(codes))
        _write_if_changed(os.path.join(out_dir, lr_rel), encode_pgm(lr))
        key = identity_key(image_id)
        manifest.entries.append(Entry(image_id, key, "test" if key in test_ids else "train", hr_rel, lr_rel))
    _write_if_changed(os.path.join(out_dir, MANIFEST_NAME), manifest.to_json().encode("utf-8"))
    return manifest


def load_pairs(manifest: DatasetManifest | str, split: str = "train", pixel_scale: str | None = None) -> PairSet:
    if isinstance(manifest, str):
        path = os.path.join(manifest, MANIFEST_NAME) if os.path.isdir(manifest) else manifest
        manifest = DatasetManifest.load(path)
    entries = manifest.split(split) if split != "all" else manifest.entries
    if not entries:
        raise DatasetError(f"split {split!r} is empty")
    scale = pixel_scale or manifest.pixel_scale
    lr = np.concatenate([image_read(os.path.join(manifest.root, e.lr), scale) for e in entries])
    hr = np.concatenate([image_read(os.path.join(manifest.root, e.hr), scale) for e in entries])
    return PairSet(lr, hr, [e.id for e in entries])
