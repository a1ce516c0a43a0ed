"""Synthetic 'blob' pathology tiles for desk-scale experiments.

Nuclei are filled ellipses whose colour and texture depend on class; one
class is deliberately rare. Background is a noisy pink stroma.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .label_space import ClassVocabulary, SemanticLabelMap
from .tiles import Tile

TOY_VOCAB = ClassVocabulary(
    ("background", "lymphocyte", "epithelial", "miscellaneous"),
    ((235, 205, 220), (70, 50, 150), (180, 70, 140), (120, 150, 90)),
)


@dataclass(frozen=True)
class ToySpec:
    n_tiles: int = 200
    size: int = 64
    nuclei_per_tile: tuple[int, int] = (6, 11)
    class_probs: tuple[float, ...] = (0.50, 0.47, 0.03)
    color_jitter: float = 25.0
    pixel_noise: float = 8.0
    seed: int = 0


# (semi-axis range, aspect range) per nucleus class
_SHAPES = {1: ((3.0, 4.5), (1.0, 1.2)), 2: ((4.5, 7.0), (1.2, 1.8)), 3: ((4.0, 6.0), (1.0, 1.5))}


def _ellipse(rng, size, cls):
    (rlo, rhi), (alo, ahi) = _SHAPES[cls]
    a = rng.uniform(rlo, rhi)
    b = a / rng.uniform(alo, ahi)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(a, size - a, 2)
    yy, xx = np.mgrid[:size, :size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, theta


def _texture(rng, mask, cls, theta):
    yy, xx = np.nonzero(mask)
    if cls == 2:  # stripes across the long axis
        phase = (xx * np.cos(theta) + yy * np.sin(theta)) * 1.6
        return 18.0 * np.sin(phase)
    if cls == 3:  # speckle
        return rng.normal(0.0, 20.0, len(yy))
    return np.zeros(len(yy))


def make_tile(rng: np.random.Generator, spec: ToySpec, tile_id: str) -> Tile:
    size = spec.size
    colors = np.array(TOY_VOCAB.colors, dtype=np.float64)
    img = colors[0] + rng.normal(0.0, spec.pixel_noise, (size, size, 3))
    inst = np.zeros((size, size), dtype=np.int64)
    cls = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    target = int(rng.integers(*spec.nuclei_per_tile))
    probs = np.asarray(spec.class_probs) / np.sum(spec.class_probs)
    next_id = 1
    for _ in range(target * 20):
        if next_id > target:
            break
        c = int(rng.choice(len(probs), p=probs)) + 1
        mask, theta = _ellipse(rng, size, c)
        grown = mask | np.roll(mask, 1, 0) | np.roll(mask, -1, 0) | np.roll(mask, 1, 1) | np.roll(mask, -1, 1)
        if (grown & occupied).any() or mask.sum() < 6:
            continue
        occupied |= mask
        inst[mask] = next_id
        cls[mask] = c
        base = colors[c] + rng.normal(0.0, spec.color_jitter, 3)
        tex = _texture(rng, mask, c, theta)
        img[mask] = base + tex[:, None] + rng.normal(0.0, spec.pixel_noise, (int(mask.sum()), 3))
        next_id += 1
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Tile(tile_id, image, SemanticLabelMap(inst, cls, TOY_VOCAB))


def make_toy_dataset(spec: ToySpec = ToySpec()) -> list[Tile]:
    rng = np.random.default_rng(spec.seed)
    return [make_tile(rng, spec, f"toy{i:04d}") for i in range(spec.n_tiles)]
