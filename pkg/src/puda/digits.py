"""Digit-transfer ingestion: MNIST (IDX files) and USPS (libsvm text or HDF5).

Both datasets are loaded from local files only; nothing is downloaded. The
expected layout under a data root is

    <root>/mnist/train-images-idx3-ubyte.gz   (or unzipped)
    <root>/mnist/train-labels-idx1-ubyte.gz
    <root>/usps/usps.bz2                      (libsvm format)  or
    <root>/usps/usps.h5                       (keys train/data, train/target)

MNIST images are resized to the USPS 16x16 resolution so the two domains
share one feature space.
"""

from __future__ import annotations

import bz2
import gzip
import struct
from pathlib import Path

import numpy as np

from .datasets import Example, ScenarioBundle, assemble_scenario, binarize

MNIST_IMAGES = "train-images-idx3-ubyte"
MNIST_LABELS = "train-labels-idx1-ubyte"


class DigitsDataMissing(FileNotFoundError):
    """Raised when the local digit files are absent; carries instructions."""


def _open_maybe_gz(base: Path):
    if base.with_suffix(base.suffix + ".gz").exists():
        return gzip.open(base.with_suffix(base.suffix + ".gz"), "rb")
    if base.exists():
        return open(base, "rb")
    raise DigitsDataMissing(
        f"missing {base}[.gz]; place the standard IDX files there")


def load_mnist(root, image_size: int = 16) -> list:
    """MNIST training split as grayscale examples in [0, 1], CHW."""
    from PIL import Image

    root = Path(root)
    with _open_maybe_gz(root / MNIST_IMAGES) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != 2051:
            raise ValueError(f"bad MNIST image magic {magic}")
        images = np.frombuffer(fh.read(n * rows * cols), dtype=np.uint8)
        images = images.reshape(n, rows, cols)
    with _open_maybe_gz(root / MNIST_LABELS) as fh:
        magic, n_lab = struct.unpack(">II", fh.read(8))
        if magic != 2049:
            raise ValueError(f"bad MNIST label magic {magic}")
        labels = np.frombuffer(fh.read(n_lab), dtype=np.uint8)
    if n != n_lab:
        raise ValueError("MNIST image/label count mismatch")
    out = []
    for i in range(n):
        img = Image.fromarray(images[i], mode="L")
        if image_size != rows:
            img = img.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)[None, :, :] / 255.0
        out.append(Example(i, arr, int(labels[i]), 1))
    return out


def load_usps(root, id_offset: int = 0) -> list:
    """USPS training split (16x16 grayscale) from usps.bz2 or usps.h5."""
    root = Path(root)
    bz2_path = root / "usps.bz2"
    h5_path = root / "usps.h5"
    if bz2_path.exists():
        features, labels = _parse_libsvm_bz2(bz2_path)
    elif h5_path.exists():
        features, labels = _parse_usps_h5(h5_path)
    else:
        raise DigitsDataMissing(
            f"missing {bz2_path} or {h5_path}; provide the USPS training split")
    out = []
    for i, (row, label) in enumerate(zip(features, labels)):
        arr = row.reshape(1, 16, 16).astype(np.float32)
        out.append(Example(id_offset + i, arr, int(label), 1))
    return out


def _parse_libsvm_bz2(path):
    """libsvm lines 'label idx:value ...'; values in [-1, 1], labels 1..10."""
    features, labels = [], []
    with bz2.open(path, "rt") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(int(float(parts[0])) - 1)  # 1..10 -> 0..9
            row = np.zeros(256, dtype=np.float32)
            for item in parts[1:]:
                idx, value = item.split(":")
                row[int(idx) - 1] = float(value)
            features.append((row + 1.0) / 2.0)  # map [-1, 1] to [0, 1]
    return np.stack(features), np.array(labels)


def _parse_usps_h5(path):
    import h5py

    with h5py.File(path, "r") as fh:
        data = np.asarray(fh["train"]["data"], dtype=np.float32)
        target = np.asarray(fh["train"]["target"])
    lo, hi = float(data.min()), float(data.max())
    if lo < 0.0 or hi > 1.0:  # normalize whatever range the file uses
        data = (data - lo) / (hi - lo)
    return data, target


def digits_scenario(data_root, c: float, seed: int, positive: int = 3,
                    negative: int = 5, image_size: int = 16) -> ScenarioBundle:
    """MNIST -> USPS transfer scenario binarized to one digit pair."""
    root = Path(data_root)
    mnist = load_mnist(root / "mnist", image_size=image_size)
    usps = load_usps(root / "usps", id_offset=len(mnist))
    source = binarize(mnist, positive, negative)
    target = binarize(usps, positive, negative)
    return assemble_scenario(source, target, c=c, seed=seed,
                             name=f"mnist-usps-{positive}v{negative}")
