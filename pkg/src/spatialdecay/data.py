"""Synthetic relative-position task.

Each image contains two 3x3 motifs on a noisy background: a solid square
(the anchor) and an X shape. The label is the quadrant of the X relative
to the anchor (0 up-left, 1 up-right, 2 down-left, 3 down-right). Pair
separations range from near-adjacent to image-wide, so a minority of
samples are decidable from local context while most require long-range
relative position; pixel noise and single-pixel clutter (same intensity
as motif pixels) keep the local evidence for each motif weak. Labels are
balanced to within one sample per class and exact by construction.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .masks import ConfigError

MOTIF_ANCHOR = np.ones((3, 3))
MOTIF_X = np.array([[1.0, 0.0, 1.0],
                    [0.0, 1.0, 0.0],
                    [1.0, 0.0, 1.0]])

# quadrant -> required signs of (row offset, col offset) of X vs anchor
_QUADRANT_SIGNS = {0: (-1, -1), 1: (-1, 1), 2: (1, -1), 3: (1, 1)}

# minimum Chebyshev gap between motif centers: 3 keeps the two 3x3 stamps
# disjoint while still sampling near-adjacent pairs, so separations range
# from locally visible to image-wide
MIN_SEPARATION = 3


@dataclass(frozen=True)
class TaskSpec:
    img_size: int = 32
    noise_std: float = 0.5
    clutter: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.img_size < 12:
            raise ConfigError("image too small for two separated motifs")
        if self.noise_std < 0.0 or self.clutter < 0:
            raise ConfigError("noise_std and clutter must be >= 0")


def _balanced_labels(n: int) -> np.ndarray:
    base, rem = divmod(n, 4)
    counts = [base + (1 if c < rem else 0) for c in range(4)]
    return np.concatenate([np.full(c, cls, dtype=np.int64)
                           for cls, c in enumerate(counts)])


def _place_motifs(rng: np.random.Generator, size: int,
                  label: int) -> tuple[int, int, int, int]:
    sh, sw = _QUADRANT_SIGNS[label]
    lo, hi = 1, size - 2  # keep 3x3 motifs fully inside
    while True:
        ha, wa = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        hb, wb = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        dh, dw = hb - ha, wb - wa
        if np.sign(dh) != sh or np.sign(dw) != sw:
            continue
        if max(abs(dh), abs(dw)) < MIN_SEPARATION:
            continue
        return ha, wa, hb, wb


def _stamp(canvas: np.ndarray, motif: np.ndarray, hc: int, wc: int) -> None:
    canvas[hc - 1:hc + 2, wc - 1:wc + 2] += motif


def generate(spec: TaskSpec, n: int, return_centers: bool = False):
    """n images [n, S, S, 1] float64 and labels [n] int64, deterministically."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    size = spec.img_size
    labels = _balanced_labels(n)
    images = np.zeros((n, size, size, 1))
    centers = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        ha, wa, hb, wb = _place_motifs(rng, size, int(labels[i]))
        canvas = np.zeros((size, size))
        _stamp(canvas, MOTIF_ANCHOR, ha, wa)
        _stamp(canvas, MOTIF_X, hb, wb)
        placed = 0
        while placed < spec.clutter:
            ch = int(rng.integers(0, size))
            cw = int(rng.integers(0, size))
            if abs(ch - ha) <= 2 and abs(cw - wa) <= 2:
                continue
            if abs(ch - hb) <= 2 and abs(cw - wb) <= 2:
                continue
            canvas[ch, cw] += 1.0
            placed += 1
        if spec.noise_std > 0.0:
            canvas = canvas + rng.normal(0.0, spec.noise_std, (size, size))
        images[i, :, :, 0] = canvas
        centers[i] = (ha, wa, hb, wb)
    perm = rng.permutation(n)
    images, labels, centers = images[perm], labels[perm], centers[perm]
    if return_centers:
        return images, labels, centers
    return images, labels


def quadrant_label(ha: int, wa: int, hb: int, wb: int) -> int:
    """Label implied by motif centers; generate() guarantees agreement."""
    for cls, (sh, sw) in _QUADRANT_SIGNS.items():
        if np.sign(hb - ha) == sh and np.sign(wb - wa) == sw:
            return cls
    raise ValueError("motif centers share a row or column")


def save_dataset(out_dir, split: str, x: np.ndarray, y: np.ndarray,
                 spec: TaskSpec) -> None:
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, f"{split}_x.npy"), x)
    np.save(os.path.join(out_dir, f"{split}_y.npy"), y)
    meta_path = os.path.join(out_dir, "meta.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    meta["spec"] = dataclasses.asdict(spec)
    meta.setdefault("splits", {})[split] = int(len(x))
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(out_dir, split: str) -> tuple[np.ndarray, np.ndarray, dict]:
    x = np.load(os.path.join(out_dir, f"{split}_x.npy"))
    y = np.load(os.path.join(out_dir, f"{split}_y.npy"))
    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    return x, y, meta
