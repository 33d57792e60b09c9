"""Procedural image dataset for desk-scale training runs.

Ten geometric pattern families (discs, rings, bars, grids, ...) rendered at
low resolution with per-sample jitter in position, scale and hue. Every
sample is a pure function of (seed, index), so datasets are reproducible and
class-balanced by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

NUM_PATTERNS = 10


def _coords(size: int, rng: np.random.Generator, jitter: float = 0.15):
    cx = 0.5 + jitter * (rng.random() - 0.5)
    cy = 0.5 + jitter * (rng.random() - 0.5)
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    return xs - cx, ys - cy, rng


def _render(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One [size, size] mask in [0, 1] for the given pattern family."""
    xs, ys, rng = _coords(size, rng)
    radius = 0.22 + 0.10 * rng.random()
    freq = 2 + int(rng.integers(0, 2))
    if label == 0:      # filled disc
        mask = (xs**2 + ys**2) < radius**2
    elif label == 1:    # ring
        rr = np.sqrt(xs**2 + ys**2)
        mask = (rr > radius * 0.6) & (rr < radius)
    elif label == 2:    # filled square
        mask = (np.abs(xs) < radius) & (np.abs(ys) < radius)
    elif label == 3:    # plus sign
        arm = radius * 0.4
        mask = ((np.abs(xs) < arm) & (np.abs(ys) < radius)) | (
            (np.abs(ys) < arm) & (np.abs(xs) < radius)
        )
    elif label == 4:    # horizontal bars
        mask = np.sin(ys * np.pi * 2 * freq * 2) > 0.3
    elif label == 5:    # vertical bars
        mask = np.sin(xs * np.pi * 2 * freq * 2) > 0.3
    elif label == 6:    # checkerboard
        mask = (np.sin(xs * np.pi * 2 * freq) * np.sin(ys * np.pi * 2 * freq)) > 0
    elif label == 7:    # diagonal stripes
        mask = np.sin((xs + ys) * np.pi * 2 * freq * 1.5) > 0.3
    elif label == 8:    # dot grid
        gx = np.sin(xs * np.pi * 2 * (freq + 1)) > 0.55
        gy = np.sin(ys * np.pi * 2 * (freq + 1)) > 0.55
        mask = gx & gy
    elif label == 9:    # half-plane triangle
        mask = (ys > xs) & (ys < radius * 2) & (xs > -radius * 2)
    else:
        raise ConfigError(f"no pattern family for label {label}")
    return mask.astype(np.float32)


@dataclass
class SyntheticShapes:
    """A fixed array dataset: ``images`` [N, 3, s, s] float32, ``labels`` [N]."""

    images: np.ndarray
    labels: np.ndarray
    seed: int

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.labels)


def generate_shapes(
    num_classes: int = 10,
    num_samples: int = 256,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.06,
) -> SyntheticShapes:
    """Deterministic, balanced dataset; label of sample i is ``i % C``."""
    if not (1 <= num_classes <= NUM_PATTERNS):
        raise ConfigError(f"num_classes must be in 1..{NUM_PATTERNS}, got {num_classes}")
    children = np.random.SeedSequence(seed).spawn(num_samples)
    images = np.empty((num_samples, 3, size, size), dtype=np.float32)
    labels = np.empty(num_samples, dtype=np.int64)
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        label = i % num_classes
        mask = _render(label, size, rng)
        hue = 0.35 + 0.55 * rng.random(3)
        background = 0.08 + 0.10 * rng.random(3)
        img = background[:, None, None] + mask[None] * (hue - background)[:, None, None]
        img += noise * rng.standard_normal((3, size, size)).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return SyntheticShapes(images=images, labels=labels, seed=seed)
