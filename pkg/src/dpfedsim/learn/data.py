"""Synthetic three-class segmentation data and client partitioning.

Masks carry an elliptical blob (class 1, "tumor") wrapped in a ring
(class 2, "stroma") on a background (class 0, "normal").  Image channels
follow per-class mean colors with additive noise, so per-pixel color
carries the label signal without being noise-free.

Generated pixel values are quantized to the float32 grid, which makes the
on-disk format (float32 images, uint8 masks) a lossless round trip.

File format, little-endian, 16-byte header:

    offset  size  field
    0       4     magic  b"SSD1"
    4       4     version u32 (currently 1)
    8       4     n u32
    12      2     h u16
    14      2     w u16

followed by n*h*w*3 float32 image values (row-major) and n*h*w uint8 mask
labels.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "SegDataset",
    "gen_dataset",
    "partition",
    "save_dataset",
    "load_dataset",
    "CLASS_NAMES",
    "NUM_CLASSES",
]

CLASS_NAMES = ("normal", "tumor", "stroma")
NUM_CLASSES = 3

_FILE_MAGIC = b"SSD1"
_FILE_VERSION = 1
_HEADER = struct.Struct("<4sIIHH")

# Per-class mean colors (RGB in [0,1]); pairwise distances sit a few image
# noise standard deviations apart so the task is learnable but not clean.
_CLASS_COLORS = np.array(
    [
        [0.82, 0.66, 0.78],  # normal
        [0.42, 0.30, 0.58],  # tumor
        [0.66, 0.44, 0.38],  # stroma
    ]
)
_PIXEL_NOISE_STD = 0.065
_TINT_STD = 0.02
_RING_FACTOR = 1.45


@dataclass(frozen=True)
class SegDataset:
    """Aligned images (n, h, w, 3) in [0,1] and masks (n, h, w) in {0,1,2}."""

    images: np.ndarray
    masks: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError("images must have shape (n, h, w, 3)")
        if self.masks.shape != self.images.shape[:3]:
            raise ValueError("masks must align with images per index")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def height(self) -> int:
        return int(self.images.shape[1])

    @property
    def width(self) -> int:
        return int(self.images.shape[2])

    def subset(self, indices) -> "SegDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SegDataset(self.images[idx], self.masks[idx], self.seed)


def gen_dataset(n: int, h: int, w: int, seed: int) -> SegDataset:
    """Generate ``n`` samples of ``h`` x ``w`` images with 3-class masks.

    Deterministic for a fixed seed.  Blob placement, axes, and rotation are
    drawn per sample; classes 1 and 2 each cover a nontrivial pixel share.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if h < 8 or w < 8:
        raise ValueError("h and w must be >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, h, w, 3), dtype=np.float64)
    masks = np.empty((n, h, w), dtype=np.uint8)
    side = float(min(h, w))
    for i in range(n):
        cy = rng.uniform(0.28, 0.72) * h
        cx = rng.uniform(0.28, 0.72) * w
        a = rng.uniform(0.12, 0.26) * side
        b = rng.uniform(0.12, 0.26) * side
        phi = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        ellipse = (u / a) ** 2 + (v / b) ** 2
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[ellipse <= _RING_FACTOR**2] = 2
        mask[ellipse <= 1.0] = 1
        tint = rng.normal(0.0, _TINT_STD, size=(1, 1, 3))
        img = _CLASS_COLORS[mask] + tint + rng.normal(0.0, _PIXEL_NOISE_STD, size=(h, w, 3))
        np.clip(img, 0.0, 1.0, out=img)
        images[i] = img.astype(np.float32)  # quantize to the on-disk grid
        masks[i] = mask
    return SegDataset(images, masks, seed)


def partition(ds: SegDataset, k: int, mode: str = "iid", seed: int = 0,
              skew_factor: float = 2.0) -> list:
    """Split the dataset into ``k`` disjoint shards; returns index arrays.

    ``iid`` shuffles and deals near-equal shards (sizes differ by at most
    one).  ``label_skew`` sorts samples by their tumor-pixel fraction and
    deals contiguous blocks, so shard tumor fractions spread by at least
    ``skew_factor``; raises if the data cannot support that spread.
    """
    n = len(ds)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    if mode == "iid":
        order = rng.permutation(n)
    elif mode == "label_skew":
        frac = (ds.masks == 1).mean(axis=(1, 2))
        order = np.argsort(frac, kind="stable")
    else:
        raise ValueError(f"mode must be 'iid' or 'label_skew', got {mode!r}")
    shards = []
    start = 0
    for size in sizes:
        block = np.array(order[start : start + size], dtype=np.int64)
        rng.shuffle(block)  # order within a shard carries no meaning
        shards.append(block)
        start += size
    if mode == "label_skew":
        frac = (ds.masks == 1).mean(axis=(1, 2))
        shard_fracs = np.array([frac[s].mean() for s in shards])
        lo, hi = shard_fracs.min(), shard_fracs.max()
        ratio = np.inf if lo == 0.0 else hi / lo
        if hi == 0.0 or ratio < skew_factor:
            raise ValueError(
                f"label skew of {skew_factor}x not achievable "
                f"(measured max/min tumor-fraction ratio {ratio:.2f})"
            )
    return shards


def save_dataset(path, ds: SegDataset) -> None:
    """Write the dataset in the flat binary format described above."""
    n, h, w = len(ds), ds.height, ds.width
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_FILE_MAGIC, _FILE_VERSION, n, h, w))
        fh.write(ds.images.astype("<f4").tobytes(order="C"))
        fh.write(ds.masks.astype(np.uint8).tobytes(order="C"))


def load_dataset(path) -> SegDataset:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError("dataset file truncated (header)")
        magic, version, n, h, w = _HEADER.unpack(header)
        if magic != _FILE_MAGIC:
            raise ValueError("bad dataset magic")
        if version != _FILE_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        img_bytes = fh.read(n * h * w * 3 * 4)
        msk_bytes = fh.read(n * h * w)
        if len(img_bytes) < n * h * w * 3 * 4 or len(msk_bytes) < n * h * w:
            raise ValueError("dataset file truncated (payload)")
        images = (
            np.frombuffer(img_bytes, dtype="<f4").reshape(n, h, w, 3).astype(np.float64)
        )
        masks = np.frombuffer(msk_bytes, dtype=np.uint8).reshape(n, h, w).copy()
    return SegDataset(images, masks, None)
