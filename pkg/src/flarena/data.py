"""Image datasets: IDX reader, MNIST-family loader and a synthetic Gaussian-blob generator.

Every dataset is held as a :class:`Batch` of float32 images in ``[0, 1]`` with
shape ``(n, C, H, W)`` and int64 labels.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

DATA_ENV = "FLARENA_DATA"

# IDX type codes -> numpy dtypes (big-endian on disk)
_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass
class Batch:
    """Images and integer labels.

    Attributes:
        x: float tensor ``(n, C, H, W)``.
        y: int64 tensor ``(n,)`` with values in ``[0, num_classes)``.
        num_classes: label count M.
    """

    x: torch.Tensor
    y: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels")
        if self.y.numel() and (int(self.y.min()) < 0 or int(self.y.max()) >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "Batch":
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return Batch(self.x[idx], self.y[idx], self.num_classes)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.x.to(dtype), self.y, self.num_classes)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])


def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Read an IDX file (optionally gzipped).

    Layout: two zero bytes, one type byte, one byte giving the number of
    dimensions, then one big-endian uint32 per dimension, then raw data.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[code])
    body = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} values, found {body.size}")
    return body.reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (used by tests and for exporting subsets)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path.home() / "data"


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetNotFound(
        f"{name} not found in {directory}. Put the IDX files under "
        f"${DATA_ENV}/<dataset>/ (e.g. {directory}/{name})"
    )


def load_idx_dataset(name: str, split: str = "train", root=None) -> Batch:
    """Load an MNIST-layout dataset (``mnist``, ``fmnist``) from ``<root>/<name>/``."""
    if split not in _FILES:
        raise ValueError(f"split must be one of {sorted(_FILES)}")
    directory = data_root(root) / name
    img_name, lbl_name = _FILES[split]
    images = read_idx(_find(directory, img_name))
    labels = read_idx(_find(directory, lbl_name)).astype(np.int64)
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    y = torch.from_numpy(labels)
    return Batch(x, y, int(labels.max()) + 1)


def make_blobs(
    n: int,
    num_classes: int = 10,
    side: int = 16,
    sigma: float = 0.1,
    cells: int = 4,
    seed: int = 0,
    layout_seed: int = 0,
) -> Batch:
    """Noisy class templates rendered as ``1 x side x side`` images.

    Each class owns a blocky template: a random binary ``cells x cells`` grid
    upsampled to the image size. A sample is its class template plus isotropic
    pixel noise of scale ``sigma``, clipped to [0, 1]. Templates depend only on
    ``layout_seed``, so train and test splits drawn with different ``seed``
    share one task.
    """
    if side % cells:
        raise ValueError("side must be a multiple of cells")
    layout = np.random.default_rng(layout_seed)
    grids = layout.random((num_classes, cells, cells)) < 0.5
    block = np.ones((side // cells, side // cells))
    templates = np.stack([np.kron(g, block) for g in grids]).reshape(num_classes, -1)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, num_classes, size=n)
    img = np.clip(templates[y] + sigma * rng.standard_normal((n, side * side)), 0.0, 1.0)
    x = torch.from_numpy(img.astype(np.float32)).reshape(n, 1, side, side)
    return Batch(x, torch.from_numpy(y.astype(np.int64)), num_classes)
