"""Seeded synthetic datasets: class-cluster images and coloured shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import DTYPE


def _blob_prototype(rng, channels, size, blobs=3):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((channels, size, size))
    for _ in range(blobs):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 8, size / 4)
        colour = rng.normal(0, 1, channels)
        img += colour[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return img


@dataclass
class ClusterTask:
    """Each class is a smooth prototype; samples are jittered noisy copies."""

    prototypes: np.ndarray  # (K, C, H, W)
    noise: float = 0.6
    shift: int = 2

    @classmethod
    def make(cls, seed: int, classes: int = 4, channels: int = 3, size: int = 16, noise: float = 0.6):
        rng = np.random.default_rng(seed)
        protos = np.stack([_blob_prototype(rng, channels, size) for _ in range(classes)])
        return cls(protos, noise)

    @property
    def classes(self) -> int:
        return self.prototypes.shape[0]

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, self.classes, n)
        x = self.prototypes[labels].copy()
        for i in range(n):
            dy, dx = rng.integers(-self.shift, self.shift + 1, 2)
            x[i] = np.roll(x[i], (dy, dx), axis=(1, 2))
        x += rng.normal(0, self.noise, x.shape)
        return x.astype(DTYPE), labels


SHAPE_COLOURS = np.array([[1.0, -0.6, -0.6], [-0.6, 1.0, -0.6], [-0.6, -0.6, 1.0]])


@dataclass
class ShapesSample:
    image: np.ndarray  # (3, S, S)
    boxes: np.ndarray  # (k, 4) as x0, y0, x1, y1 in pixels
    labels: np.ndarray  # (k,)


def make_shapes(n: int, seed: int, size: int = 64, max_objects: int = 3, noise: float = 0.3) -> list[ShapesSample]:
    """Rectangles and disks on Gaussian noise; the class is the colour.

    Objects are 12-26 px across and may overlap; later objects paint over
    earlier ones, so heavily occluded boxes are dropped and redrawn.
    """
    if n < 0 or size < 32:
        raise ValueError("need n >= 0 and size >= 32")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = []
    for _ in range(n):
        for _attempt in range(100):
            img = rng.normal(0, noise, (3, size, size))
            owner = np.full((size, size), -1)
            k = int(rng.integers(1, max_objects + 1))
            boxes, labels = [], []
            for j in range(k):
                w, h = rng.uniform(12, 26, 2)
                x0, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
                cls = int(rng.integers(0, 3))
                if rng.random() < 0.5:
                    mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
                else:
                    mask = ((xx - x0 - w / 2) / (w / 2)) ** 2 + ((yy - y0 - h / 2) / (h / 2)) ** 2 <= 1
                img[:, mask] = SHAPE_COLOURS[cls][:, None] + rng.normal(0, noise, (3, int(mask.sum())))
                owner[mask] = j
                boxes.append([x0, y0, x0 + w, y0 + h])
                labels.append(cls)
            visible = [(owner == j).sum() / max(1.0, _area(boxes[j])) for j in range(k)]
            if min(visible) >= 0.5:
                break
        else:
            raise RuntimeError("could not place non-occluded shapes")
        out.append(ShapesSample(img.astype(DTYPE), np.asarray(boxes, np.float64), np.asarray(labels)))
    return out


def _area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def batches(n_items: int, batch_size: int, rng, drop_last: bool = True):
    """Index batches over one shuffled pass, in a fixed order for a given ``rng`` state."""
    order = rng.permutation(n_items)
    stop = n_items - n_items % batch_size if drop_last else n_items
    for i in range(0, stop, batch_size):
        yield order[i:i + batch_size]
