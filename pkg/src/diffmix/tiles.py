"""On-disk tile layout.

    <root>/manifest.json
    <root>/tiles/<tile_id>/image.png      8-bit RGB
    <root>/tiles/<tile_id>/instance.png   16-bit grayscale, value = instance ID
    <root>/tiles/<tile_id>/class.png      8-bit grayscale, value = class ID

manifest.json holds ``{"format": "diffmix-tiles/1", "classes": {...},
"tiles": [{"id", "height", "width"}, ...]}``. Extra per-dataset sidecar
files (logs, reports) sit next to the manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ManifestMissing, TileCorrupt
from .label_space import ClassVocabulary, SemanticLabelMap

FORMAT = "diffmix-tiles/1"
MANIFEST = "manifest.json"


@dataclass(frozen=True, eq=False)
class Tile:
    tile_id: str
    image: np.ndarray  # H x W x 3 uint8
    label: SemanticLabelMap


def _save_png(arr: np.ndarray, path: Path) -> None:
    # PIL writes no timestamps, so identical arrays give identical bytes
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def write_tile(root: Path, tile: Tile) -> None:
    d = Path(root) / "tiles" / tile.tile_id
    d.mkdir(parents=True, exist_ok=True)
    img = np.asarray(tile.image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise TileCorrupt(tile.tile_id, f"image must be HxWx3 uint8, got {img.shape} {img.dtype}")
    if img.shape[:2] != tile.label.shape:
        raise TileCorrupt(tile.tile_id, "image and label sizes differ")
    if tile.label.instance_ids.max(initial=0) > np.iinfo(np.uint16).max:
        raise TileCorrupt(tile.tile_id, "instance IDs exceed 16 bits")
    _save_png(img, d / "image.png")
    _save_png(tile.label.instance_ids.astype(np.uint16), d / "instance.png")
    _save_png(tile.label.class_ids.astype(np.uint8), d / "class.png")


def write_manifest(root: Path, vocab: ClassVocabulary, tiles: list[tuple[str, int, int]], **extra) -> None:
    manifest = {
        "format": FORMAT,
        "classes": vocab.to_dict(),
        "tiles": [{"id": t, "height": h, "width": w} for t, h, w in sorted(tiles)],
    }
    manifest.update(extra)
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_dataset(root, tiles, vocab: ClassVocabulary, **extra) -> Path:
    root = Path(root)
    entries = []
    for tile in tiles:
        write_tile(root, tile)
        entries.append((tile.tile_id, *tile.label.shape))
    write_manifest(root, vocab, entries, **extra)
    return root


class DatasetWriter:
    """Incremental writer; the manifest is written on close."""

    def __init__(self, root, vocab: ClassVocabulary, **extra):
        self.root = Path(root)
        self.vocab = vocab
        self.extra = extra
        self.entries: list[tuple[str, int, int]] = []
        self.root.mkdir(parents=True, exist_ok=True)

    def add(self, tile: Tile) -> None:
        write_tile(self.root, tile)
        self.entries.append((tile.tile_id, *tile.label.shape))

    def close(self) -> None:
        write_manifest(self.root, self.vocab, self.entries, **self.extra)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise ManifestMissing(f"no {MANIFEST} in {root}")
    return json.loads(path.read_text())


def _load_png(path: Path, tile_id: str) -> np.ndarray:
    if not path.is_file():
        raise TileCorrupt(tile_id, f"missing {path.name}")
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as e:
        raise TileCorrupt(tile_id, f"unreadable {path.name}: {e}") from e


def read_tile(root, tile_id: str, vocab: ClassVocabulary) -> Tile:
    d = Path(root) / "tiles" / tile_id
    image = _load_png(d / "image.png", tile_id)
    inst = _load_png(d / "instance.png", tile_id)
    cls = _load_png(d / "class.png", tile_id)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise TileCorrupt(tile_id, f"image.png must be 8-bit RGB, got shape {image.shape}")
    if inst.ndim != 2 or cls.ndim != 2:
        raise TileCorrupt(tile_id, "label PNGs must be single-channel")
    if not (image.shape[:2] == inst.shape == cls.shape):
        raise TileCorrupt(tile_id, f"size mismatch {image.shape[:2]} / {inst.shape} / {cls.shape}")
    return Tile(tile_id, image, SemanticLabelMap(inst.astype(np.int64), cls.astype(np.int64), vocab))


def iter_tiles(root) -> Iterator[Tile]:
    manifest = read_manifest(root)
    vocab = ClassVocabulary.from_dict(manifest["classes"])
    for entry in sorted(manifest["tiles"], key=lambda e: e["id"]):
        yield read_tile(root, entry["id"], vocab)


def image_to_unit(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float32 3xHxW in [-1, 1]."""
    return (image.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def unit_to_image(arr: np.ndarray) -> np.ndarray:
    """float 3xHxW in [-1, 1] -> uint8 HxWx3 (clamped, round-half-even)."""
    a = np.clip(np.asarray(arr, dtype=np.float64), -1.0, 1.0)
    return np.rint((a + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)
