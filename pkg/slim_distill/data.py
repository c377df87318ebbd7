"""Procedural toy datasets: coloured shapes on noise backgrounds."""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch.utils.data import Dataset

from slim_distill.model import TaskKind, ToyTaskSpec

logger = logging.getLogger("slim_distill.data")

HEATMAP_STRIDE = 4
SHAPES = ("disk", "square", "triangle", "ring", "cross")


@dataclass(frozen=True)
class ToyObject:
    cls: int
    gy: int  # center cell on the heatmap grid
    gx: int
    radius: float  # in input pixels


@dataclass
class ToyDataset(Dataset):
    kind: TaskKind
    num_classes: int
    images: torch.Tensor
    targets: torch.Tensor
    objects: list[list[ToyObject]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images[index], self.targets[index]


class ToySplits(NamedTuple):
    train: ToyDataset
    val: ToyDataset


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r * r
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    return ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r))


def _class_colour(cls: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    hue = cls / num_classes
    base = 0.5 + 0.5 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
    return np.clip(base + rng.normal(0, 0.15, 3), 0, 1)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    return np.clip(rng.normal(0.5, 0.15, (3, size, size)), 0, 1)


def _paint(img: np.ndarray, mask: np.ndarray, colour: np.ndarray) -> None:
    img[:, mask] = colour[:, None]


def _classification_split(spec: ToyTaskSpec, n: int, rng: np.random.Generator) -> ToyDataset:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % spec.num_classes
        img = _background(size, rng)
        r = rng.uniform(size / 8, size / 4)
        cy, cx = rng.uniform(r, size - r, 2)
        _paint(img, _shape_mask(SHAPES[cls % len(SHAPES)], yy, xx, cy, cx, r), _class_colour(cls, spec.num_classes, rng))
        images[i] = (img - 0.5) / 0.25
        labels[i] = cls
    perm = rng.permutation(n)
    return ToyDataset(spec.kind, spec.num_classes, torch.from_numpy(images[perm]), torch.from_numpy(labels[perm]))


def _heatmap_split(spec: ToyTaskSpec, n: int, rng: np.random.Generator) -> ToyDataset:
    size = spec.image_size
    grid = size // HEATMAP_STRIDE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    gyy, gxx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    heatmaps = np.zeros((n, spec.num_classes, grid, grid), dtype=np.float32)
    objects: list[list[ToyObject]] = []
    for i in range(n):
        img = _background(size, rng)
        placed: list[ToyObject] = []
        for _ in range(int(rng.integers(1, 4))):
            cls = int(rng.integers(spec.num_classes))
            r = rng.uniform(2.0, size / 5)
            cy, cx = rng.uniform(r, size - r, 2)
            gy, gx = min(int(cy // HEATMAP_STRIDE), grid - 1), min(int(cx // HEATMAP_STRIDE), grid - 1)
            if any(o.cls == cls and o.gy == gy and o.gx == gx for o in placed):
                continue
            _paint(img, _shape_mask(SHAPES[cls % len(SHAPES)], yy, xx, cy, cx, r), _class_colour(cls, spec.num_classes, rng))
            sigma = max(r / (2 * HEATMAP_STRIDE), 0.7)
            blob = np.exp(-((gyy - gy) ** 2 + (gxx - gx) ** 2) / (2 * sigma**2)).astype(np.float32)
            np.maximum(heatmaps[i, cls], blob, out=heatmaps[i, cls])
            heatmaps[i, cls, gy, gx] = 1.0
            placed.append(ToyObject(cls, gy, gx, float(r)))
        images[i] = (img - 0.5) / 0.25
        objects.append(placed)
    return ToyDataset(spec.kind, spec.num_classes, torch.from_numpy(images), torch.from_numpy(heatmaps), objects)


def make_toy_dataset(spec: ToyTaskSpec) -> ToySplits:
    """Train/val splits, byte-identical for identical specs."""
    n_train, n_val = spec.samples_per_split
    build = _classification_split if spec.kind == TaskKind.CLASSIFICATION else _heatmap_split
    splits = ToySplits(
        train=build(spec, n_train, np.random.default_rng([spec.seed, 0])),
        val=build(spec, n_val, np.random.default_rng([spec.seed, 1])),
    )
    logger.info(f"Generated {spec.kind.value} dataset: {n_train} train / {n_val} val at {spec.image_size}px")
    return splits
