"""Synthetic impression/image dataset with a planted visual signal.

Each image carries a solid square patch whose vertical position encodes
the ad category and whose brightness drives part of the true click
probability; the rest of the probability comes from sparse contextual
features (linear weights plus a small pairwise interaction).  Because the
patch column is horizontally centered, mirroring does not move it and the
category stays recoverable under mirror augmentation.

True probability of a click:

    p = sigmoid(bias + w_user[u] + w_zone[z] + w_cat[c]
                + w_int[u mod m, z mod m] + visual_weight * (2b - 1))

with ``b`` the patch brightness.  Labels are Bernoulli draws from ``p``.
Everything is a deterministic function of (spec, seed).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .data import Impression, write_impressions
from .nn import sigmoid


@dataclass
class SynthSpec:
    """Shape and signal parameters of a generated dataset."""

    n_images: int = 400
    dim: int = 1000
    image_size: int = 32
    n_categories: int = 4
    patch_size: int = 10
    # Impressions per image: lognormal(mean=log(count_mu), sigma), clipped.
    count_mu: float = 100.0
    count_sigma: float = 0.8
    count_min: int = 5
    count_max: int = 1500
    # Feature blocks inside [0, dim): user segment, ad zone, category,
    # then inert noise ids filling the rest.
    n_user: int = 40
    n_zone: int = 60
    n_noise_per_row: int = 2
    # Signal strengths.
    user_scale: float = 0.5
    zone_scale: float = 0.5
    cat_scale: float = 0.3
    interaction_dim: int = 8
    interaction_scale: float = 0.3
    visual_weight: float = 1.5
    bias: float = -1.2
    # Fraction of images reserved for the cold-image split; fraction of
    # warm impressions held out for evaluation.
    cold_image_frac: float = 0.125
    eval_frac: float = 0.1

    def validate(self) -> None:
        if self.n_images < 1 or self.dim < 1 or self.n_categories < 1:
            raise ValueError("n_images, dim and n_categories must be positive")
        if self.patch_size >= self.image_size:
            raise ValueError("patch must be smaller than the image")
        if self.n_user + self.n_zone + self.n_categories + self.n_noise_per_row > self.dim:
            raise ValueError("dim too small for the configured feature blocks")
        if not 0 <= self.cold_image_frac < 1 or not 0 <= self.eval_frac < 1:
            raise ValueError("split fractions must be in [0, 1)")

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        spec = cls(**raw)
        spec.validate()
        return spec


def patch_rows(spec: SynthSpec) -> np.ndarray:
    """Top row of the category patches, evenly spread over the image height."""
    usable = spec.image_size - spec.patch_size
    return np.round(np.linspace(0, usable, spec.n_categories)).astype(np.int64)


@dataclass
class SynthTables:
    """In-memory form of a generated dataset, before any file is written."""

    spec: SynthSpec
    image_ids: list
    categories: np.ndarray  # per image
    brightness: np.ndarray  # per image
    patch_pos: np.ndarray  # per image (top, left)
    images: list  # uint8 (3, s, s) per image
    impressions: list  # Impression, grouped by image in id order
    image_of_row: np.ndarray  # image index per impression row
    logit_basic: np.ndarray  # per row, without the visual term
    logit_full: np.ndarray  # per row
    true_prob: np.ndarray  # per row

    def split_rows(self):
        """(train, eval, cold) row index arrays, deterministic from the spec."""
        spec = self.spec
        n_cold = int(round(spec.n_images * spec.cold_image_frac))
        cold_imgs = set(range(spec.n_images - n_cold, spec.n_images))
        rows = np.arange(len(self.impressions))
        cold = rows[np.isin(self.image_of_row, list(cold_imgs))] if cold_imgs else rows[:0]
        warm = rows[~np.isin(self.image_of_row, list(cold_imgs))] if cold_imgs else rows
        # Every eval_frac-th warm row goes to eval; stride keeps it spread
        # across images without extra randomness.
        if spec.eval_frac > 0:
            stride = max(2, int(round(1.0 / spec.eval_frac)))
            eval_mask = (np.arange(len(warm)) % stride) == 0
        else:
            eval_mask = np.zeros(len(warm), dtype=bool)
        return warm[~eval_mask], warm[eval_mask], cold


def synth_tables(spec: SynthSpec, seed: int) -> SynthTables:
    """Generate the dataset in memory; deterministic in (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    s = spec.image_size
    rows_by_cat = patch_rows(spec)
    left = (s - spec.patch_size) // 2  # centered so a mirror keeps it in place

    w_user = rng.normal(0.0, spec.user_scale, spec.n_user)
    w_zone = rng.normal(0.0, spec.zone_scale, spec.n_zone)
    w_cat = rng.normal(0.0, spec.cat_scale, spec.n_categories)
    w_int = rng.normal(0.0, spec.interaction_scale, (spec.interaction_dim, spec.interaction_dim))

    user_off = 0
    zone_off = spec.n_user
    cat_off = zone_off + spec.n_zone
    noise_off = cat_off + spec.n_categories
    n_noise = spec.dim - noise_off

    pad = len(str(spec.n_images - 1))
    image_ids = [f"img{idx:0{pad}d}" for idx in range(spec.n_images)]
    categories = np.arange(spec.n_images, dtype=np.int64) % spec.n_categories
    brightness = rng.uniform(0.15, 0.95, spec.n_images)
    counts = np.clip(
        np.round(rng.lognormal(np.log(spec.count_mu), spec.count_sigma, spec.n_images)),
        spec.count_min,
        spec.count_max,
    ).astype(np.int64)

    images = []
    patch_pos = np.zeros((spec.n_images, 2), dtype=np.int64)
    for i in range(spec.n_images):
        base = rng.uniform(0.10, 0.45, (3, s, s))
        top = int(rows_by_cat[categories[i]])
        base[:, top : top + spec.patch_size, left : left + spec.patch_size] = brightness[i]
        patch_pos[i] = (top, left)
        images.append(np.clip(np.round(base * 255.0), 0, 255).astype(np.uint8))

    impressions = []
    image_of_row = []
    logit_basic = []
    for i in range(spec.n_images):
        c = int(categories[i])
        for _ in range(counts[i]):
            u = int(rng.integers(spec.n_user))
            z = int(rng.integers(spec.n_zone))
            noise = rng.choice(n_noise, size=spec.n_noise_per_row, replace=False)
            feats = [(user_off + u, 1.0), (zone_off + z, 1.0), (cat_off + c, 1.0)]
            feats += [(noise_off + int(j), 1.0) for j in noise]
            lb = (
                spec.bias
                + w_user[u]
                + w_zone[z]
                + w_cat[c]
                + w_int[u % spec.interaction_dim, z % spec.interaction_dim]
            )
            impressions.append(Impression.create(image_ids[i], 0, feats, spec.dim))
            image_of_row.append(i)
            logit_basic.append(lb)

    image_of_row = np.array(image_of_row, dtype=np.int64)
    logit_basic = np.array(logit_basic)
    visual = spec.visual_weight * (2.0 * brightness - 1.0)
    logit_full = logit_basic + visual[image_of_row]
    true_prob = sigmoid(logit_full)
    labels = (rng.random(len(true_prob)) < true_prob).astype(np.int64)
    for imp, y in zip(impressions, labels):
        imp.label = int(y)

    return SynthTables(
        spec=spec,
        image_ids=image_ids,
        categories=categories,
        brightness=brightness,
        patch_pos=patch_pos,
        images=images,
        impressions=impressions,
        image_of_row=image_of_row,
        logit_basic=logit_basic,
        logit_full=logit_full,
        true_prob=true_prob,
    )


def synth_generate(spec: SynthSpec, seed: int, out_dir) -> dict:
    """Write a generated dataset to disk; returns the paths written.

    Layout: ``impressions.tsv`` (all rows), ``train.tsv`` / ``eval.tsv`` /
    ``cold.tsv`` split views, ``images/<id>.ppm``, ``truth.tsv`` and the
    ``images_meta.tsv`` sidecar (category, patch location, brightness).
    """
    tables = synth_tables(spec, seed)
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    paths = {
        "impressions": out / "impressions.tsv",
        "train": out / "train.tsv",
        "eval": out / "eval.tsv",
        "cold": out / "cold.tsv",
        "truth": out / "truth.tsv",
        "images_meta": out / "images_meta.tsv",
        "images": img_dir,
    }

    write_impressions(paths["impressions"], tables.impressions)
    train_rows, eval_rows, cold_rows = tables.split_rows()
    for name, rows in (("train", train_rows), ("eval", eval_rows), ("cold", cold_rows)):
        write_impressions(paths[name], [tables.impressions[r] for r in rows])

    for image_id, arr in zip(tables.image_ids, tables.images):
        netpbm.write_ppm(img_dir / f"{image_id}.ppm", arr)

    with open(paths["truth"], "w", encoding="utf-8") as f:
        for row, (i, p) in enumerate(zip(tables.image_of_row, tables.true_prob)):
            f.write(f"{tables.image_ids[i]}\t{row}\t{p!r}\n")

    with open(paths["images_meta"], "w", encoding="utf-8") as f:
        for i, image_id in enumerate(tables.image_ids):
            top, lft = tables.patch_pos[i]
            f.write(
                f"{image_id}\t{tables.categories[i]}\t{top}\t{lft}"
                f"\t{tables.spec.patch_size}\t{tables.brightness[i]!r}\n"
            )
    return {k: str(v) for k, v in paths.items()}


def load_images_meta(path) -> dict:
    """images_meta.tsv as {image_id: (category, top, left, size, brightness)}."""
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            image_id, cat, top, left, size, bright = line.rstrip("\n").split("\t")
            meta[image_id] = (int(cat), int(top), int(left), int(size), float(bright))
    return meta
