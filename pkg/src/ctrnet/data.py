"""Impression logs, image storage and the image -> impressions grouping.

File formats:
  * impression log: one record per line,
    ``image_id<TAB>label<TAB>idx:val[,idx:val...]`` (UTF-8, base-0 indices,
    empty third field for a feature-less row);
  * images: one binary netpbm file per id under ``<root>/<image_id>.ppm``;
  * ground truth sidecar ``truth.tsv``: ``image_id<TAB>row<TAB>true_prob``.

Everything loaded here is immutable after construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .sparse import SparseBatch, csr_from_arrays


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class Impression:
    """One user-response record: image id, binary label, sparse features."""

    image_id: str
    label: int
    idx: np.ndarray  # int64, strictly increasing
    val: np.ndarray  # float64

    @property
    def features(self):
        return list(zip(self.idx.tolist(), self.val.tolist()))

    @classmethod
    def create(cls, image_id: str, label: int, features, dim: int) -> "Impression":
        if label not in (0, 1):
            raise DataFormatError(f"label must be 0 or 1, got {label}")
        pairs = sorted(features)
        idx = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
        val = np.fromiter((p[1] for p in pairs), dtype=np.float64, count=len(pairs))
        if len(idx) and (idx[0] < 0 or idx[-1] >= dim):
            raise DataFormatError(f"feature index outside [0, {dim})")
        if len(idx) > 1 and np.any(idx[1:] == idx[:-1]):
            raise DataFormatError("duplicate feature index in one record")
        return cls(image_id=image_id, label=label, idx=idx, val=val)


def _parse_features(text: str):
    if not text:
        return []
    out = []
    for item in text.split(","):
        k, _, v = item.partition(":")
        out.append((int(k), float(v)))
    return out


def load_impressions(path, dim: int) -> list:
    """Order-preserving load of an impression log; validates labels and indices."""
    impressions = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                imp = Impression.create(parts[0], int(parts[1]), _parse_features(parts[2]), dim)
            except (ValueError, DataFormatError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            impressions.append(imp)
    return impressions


def write_impressions(path, impressions) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for imp in impressions:
            feats = ",".join(f"{i}:{v!r}" for i, v in zip(imp.idx.tolist(), imp.val.tolist()))
            f.write(f"{imp.image_id}\t{imp.label}\t{feats}\n")


def impressions_to_csr(impressions, dim: int) -> SparseBatch:
    """Stack the feature rows of a list of impressions into one CSR batch."""
    return csr_from_arrays([i.idx for i in impressions], [i.val for i in impressions], dim)


def labels_of(impressions) -> np.ndarray:
    return np.array([i.label for i in impressions], dtype=np.float64)


class ImageStore:
    """Lazy, cached mapping image_id -> float tensor (channels, h, w) in [0, 1]."""

    def __init__(self, root, channels: int = 3):
        self.root = Path(root)
        self.channels = channels
        self._cache = {}

    @classmethod
    def in_memory(cls, mapping) -> "ImageStore":
        """Store backed by pre-built arrays instead of files (tests, benchmarks)."""
        store = cls(root=".", channels=next(iter(mapping.values())).shape[0] if mapping else 3)
        for image_id, arr in mapping.items():
            arr = np.asarray(arr, dtype=np.float64)
            arr.setflags(write=False)
            store._cache[image_id] = arr
        return store

    def path_of(self, image_id: str) -> Path:
        return self.root / f"{image_id}.ppm"

    def load(self, image_id: str) -> np.ndarray:
        cached = self._cache.get(image_id)
        if cached is not None:
            return cached
        path = self.path_of(image_id)
        if not path.exists():
            raise KeyError(f"image id {image_id!r} not found under {self.root}")
        raw = netpbm.read_netpbm(path)
        if raw.ndim == 2:
            raw = raw[None, :, :]
        if raw.shape[0] != self.channels:
            raise DataFormatError(
                f"{path}: expected {self.channels} channels, got {raw.shape[0]}"
            )
        arr = raw.astype(np.float64) / 255.0
        arr.setflags(write=False)
        self._cache[image_id] = arr
        return arr


def load_image(store: ImageStore, image_id: str) -> np.ndarray:
    return store.load(image_id)


@dataclass
class GroupIndex:
    """Partition of impression rows by image id, ids in lexicographic order."""

    image_ids: list
    rows_by_image: list  # list of int64 arrays
    counts: np.ndarray = field(default=None)
    position: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.array([len(r) for r in self.rows_by_image], dtype=np.int64)
        if self.position is None:
            self.position = {u: i for i, u in enumerate(self.image_ids)}

    @property
    def num_images(self) -> int:
        return len(self.image_ids)


def build_group_index(impressions) -> GroupIndex:
    by_image = {}
    for row, imp in enumerate(impressions):
        by_image.setdefault(imp.image_id, []).append(row)
    ids = sorted(by_image)
    return GroupIndex(
        image_ids=ids,
        rows_by_image=[np.array(by_image[u], dtype=np.int64) for u in ids],
    )


def nearest_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a (c, h, w) tensor."""
    c, h, w = image.shape
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return np.ascontiguousarray(image[:, rows[:, None], cols[None, :]])


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    c, h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(image[:, top : top + size, left : left + size])


def random_crop_mirror(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop plus coin-flip horizontal mirror (training augmentation)."""
    c, h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = image[:, top : top + size, left : left + size]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def prepare_images(images: np.ndarray, size: int, augment: bool, rng=None) -> np.ndarray:
    """Crop a stacked (n, c, h, w) batch to the network input size.

    Augmented: per-image random crop and mirror.  Otherwise: deterministic
    center crop (the identity when sizes already match).
    """
    n, c, h, w = images.shape
    if not augment and h == size and w == size:
        return images
    if augment:
        return np.stack([random_crop_mirror(images[i], size, rng) for i in range(n)])
    return np.stack([center_crop(images[i], size) for i in range(n)])
