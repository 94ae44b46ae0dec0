"""Datasets: IDX files (the MNIST distribution format) and synthetic blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..numerics import stream

# IDX type codes -> big-endian numpy dtypes
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path) -> np.ndarray:
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dt = np.dtype(_IDX_TYPES[code])
    body = raw[4 + 4 * ndim:]
    if len(body) != dt.itemsize * int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, array) -> None:
    a = np.asarray(array)
    code = _IDX_CODES.get(a.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {a.dtype} has no IDX type code")
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    with _open(path, "wb") as fh:
        fh.write(header + a.astype(np.dtype(_IDX_TYPES[code])).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Images scaled to [0, 1] with shape (N, 1, 28, 28)."""
    img_name, lbl_name = MNIST_FILES[split]
    x = read_idx(_find(directory, img_name))
    y = read_idx(_find(directory, lbl_name)).astype(np.int64)
    if len(x) != len(y):
        raise ValueError(f"{split}: {len(x)} images but {len(y)} labels")
    if limit is not None:
        x, y = x[:limit], y[:limit]
    x = x.astype(np.float64)[:, None] / 255.0
    return Dataset(x, y, 10)


def bundled_mnist_dir() -> str | None:
    """The 2k/1k MNIST subset shipped with the test suite, if present."""
    here = os.path.dirname(os.path.abspath(__file__))
    for cand in (os.path.join(here, "..", "..", "..", "tests", "data", "mnist"),):
        if os.path.isdir(cand):
            return os.path.normpath(cand)
    return None


def make_blobs(n: int, n_classes: int = 2, dim: int = 2, spread: float = 0.5,
               seed: int = 0, separation: float = 4.0) -> Dataset:
    """Isotropic Gaussian clusters with centers evenly spaced on a circle of
    radius ``separation`` in a random 2-D plane (a line when dim is 1)."""
    if dim < 1 or n_classes < 1:
        raise ValueError("need dim >= 1 and n_classes >= 1")
    rng = stream(seed, "data", 0)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    plane = np.linalg.qr(rng.standard_normal((dim, dim)))[0][:, :2] if dim > 1 else np.ones((1, 2))
    centers = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1) @ plane.T
    y = np.arange(n) % n_classes
    x = centers[y] + spread * rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm].astype(np.int64), n_classes)
