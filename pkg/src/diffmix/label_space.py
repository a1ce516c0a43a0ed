"""Semantic label maps: paired instance/class maps, nucleus extraction and
dataset composition statistics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvariantViolation, ShapeMismatch, VocabularyMismatch

BACKGROUND = "background"


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; index 0 is always background."""

    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if self.colors is not None:
            object.__setattr__(self, "colors", tuple(tuple(int(v) for v in c) for c in self.colors))
            if len(self.colors) != len(self.names):
                raise InvariantViolation("colors must have one entry per class")
        if len(self.names) < 2:
            raise InvariantViolation("vocabulary needs background plus at least one nucleus class")
        if self.names[0] != BACKGROUND:
            raise InvariantViolation(f"class 0 must be {BACKGROUND!r}, got {self.names[0]!r}")
        if len(set(self.names)) != len(self.names):
            raise InvariantViolation("class names must be unique")

    def __len__(self):
        return len(self.names)

    @property
    def nucleus_classes(self) -> range:
        return range(1, len(self.names))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        d = {"names": list(self.names)}
        if self.colors is not None:
            d["colors"] = [list(c) for c in self.colors]
        return d

    @classmethod
    def from_dict(cls, d) -> "ClassVocabulary":
        if isinstance(d, list):
            return cls(tuple(d))
        colors = d.get("colors")
        return cls(tuple(d["names"]), tuple(map(tuple, colors)) if colors else None)


@dataclass(frozen=True, eq=False)
class SemanticLabelMap:
    """Instance-ID map and class map for one tile.

    Construction checks shapes only; `violations()` reports the remaining
    invariants so that ingest can collect them instead of failing early.
    """

    instance_ids: np.ndarray
    class_ids: np.ndarray
    vocab: ClassVocabulary

    def __post_init__(self):
        inst = np.asarray(self.instance_ids)
        cls = np.asarray(self.class_ids)
        if inst.ndim != 2 or inst.shape != cls.shape:
            raise ShapeMismatch(f"instance map {inst.shape} and class map {cls.shape} must be equal 2-D shapes")
        if inst.size and inst.min() < 0:
            raise InvariantViolation("instance IDs must be non-negative")
        object.__setattr__(self, "instance_ids", inst.astype(np.int64, copy=False))
        object.__setattr__(self, "class_ids", cls.astype(np.int64, copy=False))

    @property
    def height(self) -> int:
        return self.instance_ids.shape[0]

    @property
    def width(self) -> int:
        return self.instance_ids.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_ids.shape

    def __eq__(self, other):
        if not isinstance(other, SemanticLabelMap):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and np.array_equal(self.instance_ids, other.instance_ids)
            and np.array_equal(self.class_ids, other.class_ids)
        )

    def violations(self) -> list[str]:
        out = []
        n_cls = len(self.vocab)
        if self.class_ids.size and (self.class_ids.min() < 0 or self.class_ids.max() >= n_cls):
            out.append(f"class IDs outside [0, {n_cls})")
        fg_inst = self.instance_ids != 0
        fg_cls = self.class_ids != 0
        n_bad = int(np.count_nonzero(fg_inst != fg_cls))
        if n_bad:
            out.append(f"{n_bad} pixels disagree on background between instance and class maps")
        ids = self.instance_ids[fg_inst]
        if ids.size:
            cls = self.class_ids[fg_inst]
            order = np.lexsort((cls, ids))
            ids, cls = ids[order], cls[order]
            first = np.r_[True, ids[1:] != ids[:-1]]
            # an ID is multi-class if any pixel's class differs from its ID's first class
            start_cls = np.repeat(cls[first], np.diff(np.r_[np.flatnonzero(first), ids.size]))
            mixed = np.unique(ids[cls != start_cls])
            if mixed.size:
                out.append(f"instance IDs spanning several classes: {mixed.tolist()[:10]}")
        return out

    def validate(self) -> "SemanticLabelMap":
        problems = self.violations()
        if problems:
            raise InvariantViolation("; ".join(problems))
        return self


@dataclass(frozen=True, eq=False)
class NucleusInstance:
    """One nucleus. `coords` is an (N, 2) array of (row, col); bbox is
    (top, left, bottom, right) with exclusive bottom/right."""

    id: int
    class_id: int
    coords: np.ndarray
    bbox: tuple[int, int, int, int] = field(init=False)
    area: int = field(init=False)
    centroid: tuple[float, float] = field(init=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if len(coords) == 0:
            raise InvariantViolation(f"instance {self.id} has an empty mask")
        object.__setattr__(self, "coords", coords)
        lo = coords.min(axis=0)
        hi = coords.max(axis=0) + 1
        object.__setattr__(self, "bbox", (int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])))
        object.__setattr__(self, "area", int(len(coords)))
        c = coords.mean(axis=0)
        object.__setattr__(self, "centroid", (float(c[0]), float(c[1])))

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.coords[:, 0], self.coords[:, 1]] = True
        return m

    def translated(self, dy: int, dx: int) -> "NucleusInstance":
        return NucleusInstance(self.id, self.class_id, self.coords + np.array([dy, dx]))


def extract_instances(label_map: SemanticLabelMap) -> list[NucleusInstance]:
    """One NucleusInstance per nonzero instance ID, ascending by ID."""
    inst = label_map.instance_ids
    flat = inst.ravel()
    fg = np.flatnonzero(flat)
    if fg.size == 0:
        return []
    ids = flat[fg]
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    pix = fg[order]
    cls = label_map.class_ids.ravel()[pix]
    bounds = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1], True])
    rows, cols = np.divmod(pix, inst.shape[1])
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        c = cls[a:b]
        if np.any(c != c[0]):
            raise InvariantViolation(f"instance {int(ids[a])} spans classes {np.unique(c).tolist()}")
        out.append(NucleusInstance(int(ids[a]), int(c[0]), np.stack([rows[a:b], cols[a:b]], axis=1)))
    return out


def from_instances(instances: Iterable[NucleusInstance], shape, vocab: ClassVocabulary) -> SemanticLabelMap:
    """Rasterize instances back into a label map; later instances win on overlap."""
    inst = np.zeros(shape, dtype=np.int64)
    cls = np.zeros(shape, dtype=np.int64)
    for n in instances:
        inst[n.coords[:, 0], n.coords[:, 1]] = n.id
        cls[n.coords[:, 0], n.coords[:, 1]] = n.class_id
    return SemanticLabelMap(inst, cls, vocab)


def fragmented_instances(label_map: SemanticLabelMap) -> list[int]:
    """IDs whose pixels are not a single 4-connected component."""
    out = []
    objects = ndimage.find_objects(label_map.instance_ids)
    for i, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        _, n = ndimage.label(label_map.instance_ids[sl] == i)
        if n > 1:
            out.append(i)
    return out


def warn_fragmented(label_map: SemanticLabelMap, tile_id: str = "") -> list[int]:
    ids = fragmented_instances(label_map)
    if ids:
        warnings.warn(f"tile {tile_id!r}: instances not 4-connected: {ids[:10]}", stacklevel=2)
    return ids


def one_hot_encode(label_map: SemanticLabelMap, dtype=np.float32) -> np.ndarray:
    """C x H x W one-hot encoding of the class map (background is channel 0)."""
    n = len(label_map.vocab)
    cls = label_map.class_ids
    if cls.size and (cls.min() < 0 or cls.max() >= n):
        raise InvariantViolation(f"class IDs outside [0, {n})")
    return (np.arange(n)[:, None, None] == cls[None]).astype(dtype)


def null_condition(n_classes: int, height: int, width: int, dtype=np.float32) -> np.ndarray:
    """The unconditional map: all zeros, not the background one-hot."""
    return np.zeros((n_classes, height, width), dtype=dtype)


def decode_one_hot(encoding: np.ndarray) -> np.ndarray:
    return np.argmax(encoding, axis=0)


@dataclass(frozen=True)
class DatasetStats:
    vocab: ClassVocabulary
    counts: dict[str, int]
    tile_count: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def proportions(self) -> dict[str, float]:
        total = self.total
        if total == 0:
            return {k: 0.0 for k in self.counts}
        return {k: v / total for k, v in self.counts.items()}

    def rarest(self) -> tuple[str, float]:
        props = self.proportions
        name = min(props, key=lambda k: (props[k], self.vocab.index(k)))
        return name, props[name]

    def to_dict(self) -> dict:
        name, prop = self.rarest()
        return {
            "tile_count": self.tile_count,
            "total_nuclei": self.total,
            "counts": dict(self.counts),
            "proportions": self.proportions,
            "rarest_class": name,
            "rarest_proportion": prop,
        }


def instance_classes(label_map: SemanticLabelMap) -> dict[int, int]:
    """Map instance ID -> class ID without materializing masks."""
    fg = label_map.instance_ids != 0
    ids = label_map.instance_ids[fg]
    cls = label_map.class_ids[fg]
    uniq, first = np.unique(ids, return_index=True)
    return dict(zip(uniq.tolist(), cls[first].tolist()))


def class_histogram(maps: Sequence[SemanticLabelMap] | Iterable[SemanticLabelMap]) -> DatasetStats:
    """Count distinct instances per nucleus class over a collection of tiles."""
    maps = list(maps)
    if not maps:
        raise ValueError("class_histogram needs at least one map")
    vocab = maps[0].vocab
    counts = np.zeros(len(vocab), dtype=np.int64)
    for m in maps:
        if m.vocab != vocab:
            raise VocabularyMismatch(f"{m.vocab.names} != {vocab.names}")
        per = np.fromiter(instance_classes(m).values(), dtype=np.int64)
        counts += np.bincount(per, minlength=len(vocab))[: len(vocab)]
    return DatasetStats(vocab, {vocab.names[c]: int(counts[c]) for c in vocab.nucleus_classes}, len(maps))
