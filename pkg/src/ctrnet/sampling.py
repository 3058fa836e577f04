"""Image-proportional batch sampling and the copy/average gradient reduction.

A training batch holds ``n`` distinct images and, for each, ``k``
impressions drawn uniformly with replacement from that image's group, so
one convolution pass serves ``k`` loss rows.  Images are drawn with
probability proportional to group size through an alias table built once
per run.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

from .data import GroupIndex, ImageStore
from .nn import Array
from .sparse import SparseBatch, csr_from_arrays


@dataclass
class SamplerConfig:
    n: int  # images per batch
    k: int  # impressions sampled per image
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1 or self.k < 1:
            raise ValueError(f"n and k must be >= 1, got n={self.n} k={self.k}")


@dataclass
class GroupedBatch:
    """n images plus k*n feature rows in image-major order: feature row r
    belongs to image r // k."""

    images: Array  # (n, c, h, w)
    image_ids: list
    features: SparseBatch  # k*n rows
    labels: Array  # k*n
    k: int


def compute_sample_probs(g: GroupIndex) -> Array:
    """p(u) = group size of u / total impressions."""
    if g.num_images == 0:
        raise ValueError("empty group index")
    total = g.counts.sum()
    return g.counts / float(total)


class AliasTable:
    """Vose alias method: O(n) build, O(1) draws from a fixed distribution."""

    def __init__(self, probs: Array):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.size == 0 or np.any(probs < 0):
            raise ValueError("probabilities must be non-empty and non-negative")
        n = probs.size
        scaled = probs * n / probs.sum()
        self.prob = np.ones(n)
        self.alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)

    def draw(self, rng: np.random.Generator) -> int:
        i = int(rng.integers(len(self.prob)))
        if rng.random() < self.prob[i]:
            return i
        return int(self.alias[i])


def _draw_images(alias: AliasTable, n: int, num_images: int, rng) -> list:
    """n distinct image indices; duplicates within the batch are redrawn."""
    if n > num_images:
        raise ValueError(f"batch needs {n} distinct images, dataset has {num_images}")
    chosen = []
    seen = set()
    while len(chosen) < n:
        i = alias.draw(rng)
        if i not in seen:
            seen.add(i)
            chosen.append(i)
    return chosen


def sample_batch(
    g: GroupIndex,
    store: ImageStore,
    impressions,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    dim: int,
) -> GroupedBatch:
    """One grouped batch: n distinct images by p(u), then for each image k
    impressions uniformly with replacement from its group."""
    cfg.validate()
    alias = AliasTable(compute_sample_probs(g))
    chosen = _draw_images(alias, cfg.n, g.num_images, rng)
    return _assemble_batch(g, store, impressions, cfg, chosen, rng, dim)


def _assemble_batch(g, store, impressions, cfg, image_indices, rng, dim) -> GroupedBatch:
    images = []
    image_ids = []
    idx_arrays = []
    val_arrays = []
    labels = np.empty(cfg.n * cfg.k)
    for slot, gi in enumerate(image_indices):
        image_id = g.image_ids[gi]
        image_ids.append(image_id)
        images.append(store.load(image_id))
        rows = g.rows_by_image[gi]
        picks = rows[rng.integers(0, len(rows), size=cfg.k)]
        for j, row in enumerate(picks):
            imp = impressions[row]
            idx_arrays.append(imp.idx)
            val_arrays.append(imp.val)
            labels[slot * cfg.k + j] = imp.label
    return GroupedBatch(
        images=np.stack(images),
        image_ids=image_ids,
        features=csr_from_arrays(idx_arrays, val_arrays, dim=dim),
        labels=labels,
        k=cfg.k,
    )


class BatchSampler:
    """Stateful sampler for a training run: alias table built once, an own
    RNG stream, and a state snapshot per batch so a checkpoint can resume
    the stream exactly."""

    def __init__(self, g: GroupIndex, store: ImageStore, impressions, cfg: SamplerConfig, dim: int):
        cfg.validate()
        self.group = g
        self.store = store
        self.impressions = impressions
        self.cfg = cfg
        self.dim = dim
        self.alias = AliasTable(compute_sample_probs(g))
        self.rng = np.random.default_rng(cfg.seed)

    def next_batch(self) -> GroupedBatch:
        chosen = _draw_images(self.alias, self.cfg.n, self.group.num_images, self.rng)
        return _assemble_batch(
            self.group, self.store, self.impressions, self.cfg, chosen, self.rng, self.dim
        )

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state


class BatchPrefetcher:
    """Runs a BatchSampler on a helper thread behind a bounded queue.

    Each item is ``(batch, rng_state_after)``; the state is what a resume
    must restore once that batch has been consumed, so prefetching cannot
    change results.
    """

    CAPACITY = 2

    def __init__(self, sampler: BatchSampler):
        self.sampler = sampler
        self._queue = queue.Queue(maxsize=self.CAPACITY)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while not self._stop.is_set():
            batch = self.sampler.next_batch()
            item = (batch, self.sampler.state())
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next_batch(self):
        """(batch, rng_state_after_batch)."""
        return self._queue.get()

    def close(self):
        self._stop.set()
        try:
            while True:
                self._queue.get_nowait()
        except queue.Empty:
            pass
        self._thread.join(timeout=5.0)


def replicate_image_features(conv: Array, k: int) -> Array:
    """Copy each row k times: row i lands at rows i*k .. (i+1)*k - 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.repeat(conv, k, axis=0)


def reduce_copy_gradients(grad_c: Array, k: int, mode: str = "paper") -> Array:
    """Fold the k per-copy gradients of each replicated image row into one.

    ``paper`` takes the mean over each block of k rows; ``exact`` takes the
    sum, which is the true chain rule for a replicated node.  The two
    differ by the constant factor k on the image pathway.
    """
    rows, f = grad_c.shape
    if rows % k != 0:
        raise ValueError(f"row count {rows} not divisible by k={k}")
    blocks = grad_c.reshape(rows // k, k, f)
    if mode == "paper":
        return blocks.mean(axis=1)
    if mode == "exact":
        return blocks.sum(axis=1)
    raise ValueError(f"unknown reduction mode {mode!r}")
