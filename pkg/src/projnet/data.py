"""Dataset ingestion: IDX image files, synthetic toys, and character text."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .projops import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class MagicNumberError(DataError):
    """File does not start with the expected IDX magic number."""


class TruncatedFileError(DataError):
    """File ends before the declared payload."""


class CountMismatchError(DataError):
    """Image and label files disagree on the sample count."""


@dataclass
class Dataset:
    x: Tensor
    y: Tensor
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return self.x.shape[0]

    def batch(self, idx) -> tuple[Tensor, Tensor]:
        return self.x[idx], self.y[idx]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name, self.meta)


def split_dataset(
    ds: Dataset, fractions: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/val/test split covering every sample exactly once."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    n = ds.sample_count
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tr = order[:n_train]
    va = order[n_train : n_train + n_val]
    te = order[n_train + n_val :]
    return ds.subset(tr), ds.subset(va), ds.subset(te)


# ---------------------------------------------------------------------------
# IDX-format image files
# ---------------------------------------------------------------------------


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count: int, path: Path) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise TruncatedFileError(
            f"{path}: expected {count} more bytes, got {len(buf)}"
        )
    return buf


def read_idx_images(path: str | Path) -> Tensor:
    """Parse a big-endian IDX image file into (count, rows, cols) floats in [0, 1]."""
    path = Path(path)
    with _open_maybe_gz(path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, path))
        if magic != IMAGE_MAGIC:
            raise MagicNumberError(
                f"{path}: magic 0x{magic:08x} != image magic 0x{IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, path)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    return arr.astype(np.float64) / 255.0


def read_idx_labels(path: str | Path) -> Tensor:
    path = Path(path)
    with _open_maybe_gz(path) as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, path))
        if magic != LABEL_MAGIC:
            raise MagicNumberError(
                f"{path}: magic 0x{magic:08x} != label magic 0x{LABEL_MAGIC:08x}"
            )
        raw = _read_exact(f, count, path)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def _find_idx_file(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                 stem.replace("-idx", ".idx") + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise DataError(f"missing IDX file {stem}[.gz] in {directory}")


def load_mnist_idx(directory: str | Path, flatten: bool = True) -> tuple[Dataset, Dataset]:
    """Load the four standard IDX files from ``directory``.

    Returns (train, test); images scaled into [0, 1] and either flattened to
    784 or kept as (28, 28, 1) maps.
    """
    directory = Path(directory)
    sets = []
    for prefix in ("train", "t10k"):
        images = read_idx_images(_find_idx_file(directory, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx_labels(_find_idx_file(directory, f"{prefix}-labels-idx1-ubyte"))
        if images.shape[0] != labels.shape[0]:
            raise CountMismatchError(
                f"{prefix}: {images.shape[0]} images vs {labels.shape[0]} labels"
            )
        x = images.reshape(images.shape[0], -1) if flatten else images[..., None]
        sets.append(Dataset(x, labels, 10, name=f"mnist-{prefix}"))
    return sets[0], sets[1]


# ---------------------------------------------------------------------------
# Synthetic toys
# ---------------------------------------------------------------------------


def synthetic_xor(n: int = 4, noise: float = 0.0, seed: int = 0) -> Dataset:
    """Noisy copies of the four XOR corners; the first four samples are the
    exact corners so tiny datasets always cover all cases."""
    corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    labels4 = np.array([0, 1, 1, 0], dtype=np.int64)
    rng = np.random.default_rng(seed)
    reps = (n + 3) // 4
    x = np.tile(corners, (reps, 1))[:n]
    y = np.tile(labels4, reps)[:n]
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    return Dataset(x, y, 2, name="xor")


def two_moons(n: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaving half circles, the classic nonlinear 2-class toy."""
    rng = np.random.default_rng(seed)
    n_a = n // 2
    n_b = n - n_a
    ta = np.pi * rng.random(n_a)
    tb = np.pi * rng.random(n_b)
    a = np.stack([np.cos(ta), np.sin(ta)], axis=1)
    b = np.stack([1.0 - np.cos(tb), 0.5 - np.sin(tb)], axis=1)
    x = np.concatenate([a, b], axis=0)
    y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2, name="two-moons")


def separable_blobs(n: int = 200, gap: float = 2.0, seed: int = 0) -> Dataset:
    """Two linearly separable Gaussian blobs with a margin of ``gap``."""
    rng = np.random.default_rng(seed)
    n_a = n // 2
    n_b = n - n_a
    a = rng.standard_normal((n_a, 2)) * 0.5 + np.array([-gap, 0.0])
    b = rng.standard_normal((n_b, 2)) * 0.5 + np.array([gap, 0.0])
    x = np.concatenate([a, b], axis=0)
    y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2, name="blobs")


# ---------------------------------------------------------------------------
# Character-level text
# ---------------------------------------------------------------------------


def char_text(path: str | Path, seq_len: int) -> Dataset:
    """Non-overlapping character windows; targets are the next characters.

    ``meta['vocab']`` holds the character inventory in id order.
    """
    text = Path(path).read_text(encoding="utf-8")
    if len(text) < seq_len + 1:
        raise DataError(f"text shorter than one window of {seq_len + 1} chars")
    vocab = sorted(set(text))
    lut = {c: i for i, c in enumerate(vocab)}
    ids = np.array([lut[c] for c in text], dtype=np.int64)
    n = (len(ids) - 1) // seq_len
    x = np.stack([ids[i * seq_len : (i + 1) * seq_len] for i in range(n)])
    y = np.stack([ids[i * seq_len + 1 : (i + 1) * seq_len + 1] for i in range(n)])
    return Dataset(x, y, len(vocab), name="chartext", meta={"vocab": "".join(vocab)})
