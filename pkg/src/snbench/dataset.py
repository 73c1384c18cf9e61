"""Procedural image classification task.

Each image carries three copies of one class-specific 3x3 motif (an
oriented bar or diagonal, all four mutually orthogonal and zero-sum)
stamped at random non-overlapping positions over Gaussian noise.
Classifying requires learned matched filters, so raw-pixel linear
models stay weak while convolutional networks work; how close a
network gets to the noise ceiling depends on its width and structure,
which is what makes the task usable as a miniature architecture
benchmark.  The noise level tunes how strongly architectures separate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 4
IMAGE_SHAPE = (3, 8, 8)
MOTIF_AMPLITUDE = 6.0
MOTIFS_PER_IMAGE = 3


def class_templates() -> np.ndarray:
    """(4, 3, 3) unit-norm zero-sum motifs, one per class."""
    motifs = np.array(
        [
            [[-1, -1, -1], [2, 2, 2], [-1, -1, -1]],   # horizontal bar
            [[-1, 2, -1], [-1, 2, -1], [-1, 2, -1]],   # vertical bar
            [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]],   # diagonal
            [[-1, -1, 2], [-1, 2, -1], [2, -1, -1]],   # anti-diagonal
        ],
        dtype=np.float64,
    )
    return motifs / np.sqrt(18.0)


@dataclass
class SyntheticDataset:
    seed: int
    noise: float
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES


def _motif_positions(rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping top-left corners (Chebyshev distance >= 3)."""
    positions: list[tuple[int, int]] = []
    while len(positions) < MOTIFS_PER_IMAGE:
        y0, x0 = (int(v) for v in rng.integers(0, 6, size=2))
        if all(max(abs(y0 - y), abs(x0 - x)) >= 3 for y, x in positions):
            positions.append((y0, x0))
    return positions


def _render(rng: np.random.Generator, templates: np.ndarray, label: int,
            noise: float) -> np.ndarray:
    img = noise * rng.standard_normal(IMAGE_SHAPE)
    base = np.zeros((8, 8))
    for y0, x0 in _motif_positions(rng):
        amp = MOTIF_AMPLITUDE * rng.uniform(0.9, 1.1)
        base[y0 : y0 + 3, x0 : x0 + 3] += amp * templates[label]
    return img + base[None]


def _balanced_block(rng: np.random.Generator, templates: np.ndarray, n: int,
                    noise: float) -> tuple[np.ndarray, np.ndarray]:
    per_class = n // NUM_CLASSES
    xs = np.empty((n,) + IMAGE_SHAPE, dtype=np.float64)
    ys = np.empty(n, dtype=np.int64)
    i = 0
    for label in range(NUM_CLASSES):
        for _ in range(per_class):
            xs[i] = _render(rng, templates, label, noise)
            ys[i] = label
            i += 1
    order = rng.permutation(n)
    return xs[order], ys[order]


def generate_dataset(seed: int, n_train: int = 1280, n_test: int = 512,
                     noise: float = 1.0) -> SyntheticDataset:
    """Deterministic dataset with a 90/10 train/validation split.

    ``n_train`` counts the pre-split pool; it must be divisible by 40
    (and ``n_test`` by 4) so every block is exactly class-balanced.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    if n_train % (NUM_CLASSES * 10) or n_test % NUM_CLASSES:
        raise ValueError("n_train must be divisible by 40 and n_test by 4 for balanced splits")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    templates = class_templates()
    n_val = n_train // 10
    xs, ys = [], []
    for block_n in (n_train - n_val, n_val, n_test):
        x, y = _balanced_block(rng, templates, block_n, noise)
        xs.append(x)
        ys.append(y)
    return SyntheticDataset(
        seed=seed,
        noise=noise,
        x_train=xs[0],
        y_train=ys[0],
        x_val=xs[1],
        y_val=ys[1],
        x_test=xs[2],
        y_test=ys[2],
    )


def nearest_template_label(img: np.ndarray, templates: np.ndarray) -> int:
    """Matched-filter classification: strongest correlation of any
    template at any valid position of the channel-averaged image."""
    chan_mean = img.mean(axis=0)
    best, best_label = -np.inf, -1
    for label, motif in enumerate(templates):
        for y0 in range(6):
            for x0 in range(6):
                score = float((chan_mean[y0 : y0 + 3, x0 : x0 + 3] * motif).sum())
                if score > best:
                    best, best_label = score, label
    return best_label
