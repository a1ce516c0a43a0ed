"""Custom label maps used to condition synthesis.

Balancing maps raise the count of under-represented classes in a tile by
swapping abundant-class nuclei for donor nuclei of the scarce class (label
side only, no pixel blending). Enlarging maps relocate nuclei at random
while keeping their class, shape and size.
"""
from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DonorExhausted, InvalidConfig
from .label_space import NucleusInstance, SemanticLabelMap, extract_instances

_EPS = 1e-9


def tile_rng(seed: int, tile_id: str) -> np.random.Generator:
    """Independent stream per (global seed, tile ID)."""
    digest = hashlib.sha256(tile_id.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


@dataclass(frozen=True, eq=False)
class Donor:
    tile_id: str
    nucleus: NucleusInstance

    @property
    def area(self) -> int:
        return self.nucleus.area


class DonorPool:
    """Read-only index of donor nuclei per class, sorted by area."""

    def __init__(self, donors: Iterable[Donor]):
        by_class: dict[int, list[Donor]] = {}
        for d in donors:
            by_class.setdefault(d.nucleus.class_id, []).append(d)
        self._by_class = {
            c: sorted(ds, key=lambda d: (d.area, d.tile_id, d.nucleus.id)) for c, ds in by_class.items()
        }
        self._areas = {c: [d.area for d in ds] for c, ds in self._by_class.items()}

    @classmethod
    def from_maps(cls, maps: Mapping[str, SemanticLabelMap] | Iterable[tuple[str, SemanticLabelMap]],
                  classes: Iterable[int] | None = None) -> "DonorPool":
        items = maps.items() if isinstance(maps, Mapping) else maps
        keep = None if classes is None else set(classes)
        donors = []
        for tile_id, m in items:
            for n in extract_instances(m):
                if keep is None or n.class_id in keep:
                    donors.append(Donor(tile_id, n))
        return cls(donors)

    def count(self, class_id: int) -> int:
        return len(self._by_class.get(class_id, ()))

    def candidates(self, class_id: int, area: int, tolerance: float) -> list[Donor]:
        """Donors with |a_d - area| / area <= tolerance, nearest area first;
        ties by donor tile ID then instance ID."""
        donors = self._by_class.get(class_id, [])
        if not donors:
            return []
        areas = self._areas[class_id]
        lo = bisect.bisect_left(areas, area * (1 - tolerance) - _EPS)
        hi = bisect.bisect_right(areas, area * (1 + tolerance) + _EPS)
        within = donors[lo:hi]
        return sorted(within, key=lambda d: (abs(d.area - area), d.tile_id, d.nucleus.id))


@dataclass(frozen=True)
class BalanceSpec:
    """target_proportions maps nucleus class ID -> desired fraction."""

    target_proportions: Mapping[int, float]
    donor_pool: DonorPool = field(repr=False)
    size_tolerance: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        total = sum(self.target_proportions.values())
        if abs(total - 1.0) > 1e-9:
            raise InvalidConfig(f"target proportions sum to {total}, expected 1")
        if any(v < 0 for v in self.target_proportions.values()):
            raise InvalidConfig("target proportions must be non-negative")
        if not 0 < self.size_tolerance <= 1:
            raise InvalidConfig("size_tolerance must lie in (0, 1]")


def uniform_targets(n_classes: int) -> dict[int, float]:
    """Equal share for every nucleus class (class IDs 1..n_classes-1)."""
    k = n_classes - 1
    return {c: 1.0 / k for c in range(1, n_classes)}


@dataclass(frozen=True)
class TransplantRecord:
    donor_tile: str
    donor_id: int
    replaced_id: int
    replaced_class: int
    class_id: int
    new_id: int
    offset: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "donor_tile": self.donor_tile,
            "donor_id": self.donor_id,
            "replaced_id": self.replaced_id,
            "replaced_class": self.replaced_class,
            "class": self.class_id,
            "new_id": self.new_id,
            "offset": list(self.offset),
        }


def _stamp(donor: NucleusInstance, target_centroid, shape) -> tuple[np.ndarray, tuple[int, int]]:
    offset = np.floor(np.asarray(target_centroid) - np.asarray(donor.centroid) + 0.5).astype(np.int64)
    coords = donor.coords + offset
    inside = (coords[:, 0] >= 0) & (coords[:, 0] < shape[0]) & (coords[:, 1] >= 0) & (coords[:, 1] < shape[1])
    return coords[inside], (int(offset[0]), int(offset[1]))


def make_balancing_map(recipient: SemanticLabelMap, spec: BalanceSpec) -> tuple[SemanticLabelMap, list[TransplantRecord]]:
    """Swap abundant-class nuclei for donor nuclei of deficit classes.

    Each round picks the class with the largest deficit (target * n - count)
    and replaces an instance of a surplus class with the nearest-area donor
    of the deficit class, centroid-aligned and clipped to the tile. Victims
    are taken from the class with the largest surplus first (then ascending
    ID); a class that has received a transplant is never a victim. A donor
    is skipped if its stamp would touch another nucleus. Deficit classes
    absent from the pool are skipped. Rounds stop once no class is in
    deficit or no eligible (victim, donor) pair remains.
    """
    inst = recipient.instance_ids.copy()
    cls = recipient.class_ids.copy()
    nuclei = {n.id: n for n in extract_instances(recipient)}
    n_total = len(nuclei)
    counts = {c: 0 for c in spec.target_proportions}
    for n in nuclei.values():
        counts[n.class_id] = counts.get(n.class_id, 0) + 1
    targets = {c: spec.target_proportions.get(c, 0.0) * n_total for c in counts}
    next_id = int(recipient.instance_ids.max(initial=0)) + 1
    received: set[int] = set()
    stamped: set[int] = set()
    log: list[TransplantRecord] = []

    while True:
        deficits = sorted(
            ((targets[c] - counts[c], c) for c in counts if counts[c] < targets[c] - _EPS),
            key=lambda x: (-x[0], x[1]),
        )
        if not deficits:
            break
        done = False
        size_match_seen = False
        servable = [(d, c) for d, c in deficits if spec.donor_pool.count(c) > 0]
        if not servable and not log:
            raise DonorExhausted(f"donor pool has no nuclei of classes {[c for _, c in deficits]}")
        for _, rare in servable:
            surplus = sorted(
                (c for c in counts if c != rare and c not in received and counts[c] > targets[c] + _EPS),
                key=lambda c: (-(counts[c] - targets[c]), c),
            )
            victims = [n for c in surplus for n in sorted(
                (v for v in nuclei.values() if v.class_id == c and v.id not in stamped), key=lambda v: v.id)]
            for victim in victims:
                cands = spec.donor_pool.candidates(rare, victim.area, spec.size_tolerance)
                if cands:
                    size_match_seen = True
                for donor in cands:
                    coords, offset = _stamp(donor.nucleus, victim.centroid, inst.shape)
                    if len(coords) == 0:
                        continue
                    hit = inst[coords[:, 0], coords[:, 1]]
                    if np.any((hit != 0) & (hit != victim.id)):
                        continue
                    inst[victim.coords[:, 0], victim.coords[:, 1]] = 0
                    cls[victim.coords[:, 0], victim.coords[:, 1]] = 0
                    inst[coords[:, 0], coords[:, 1]] = next_id
                    cls[coords[:, 0], coords[:, 1]] = rare
                    del nuclei[victim.id]
                    nuclei[next_id] = NucleusInstance(next_id, rare, coords)
                    stamped.add(next_id)
                    counts[victim.class_id] -= 1
                    counts[rare] += 1
                    received.add(rare)
                    log.append(TransplantRecord(donor.tile_id, donor.nucleus.id, victim.id,
                                                victim.class_id, rare, next_id, offset))
                    next_id += 1
                    done = True
                    break
                if done:
                    break
            if done:
                break
        if not done:
            if not log and not size_match_seen:
                raise DonorExhausted(
                    f"no donor within size tolerance {spec.size_tolerance} for deficit classes "
                    f"{[c for _, c in deficits]}")
            break
    return SemanticLabelMap(inst, cls, recipient.vocab), log


@dataclass(frozen=True)
class ShiftSpec:
    max_shift: int = 25
    max_retries: int = 10
    shift_fraction: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_shift < 0:
            raise InvalidConfig("max_shift must be >= 0")
        if self.max_retries < 1:
            raise InvalidConfig("max_retries must be >= 1")
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise InvalidConfig("shift_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ShiftRecord:
    instance_id: int
    offset: tuple[int, int] | None  # None: kept in place after max_retries failures
    attempts: int

    def to_dict(self) -> dict:
        return {"id": self.instance_id, "offset": None if self.offset is None else list(self.offset),
                "attempts": self.attempts}


def make_enlarging_map(source: SemanticLabelMap, spec: ShiftSpec,
                       rng: np.random.Generator | None = None) -> tuple[SemanticLabelMap, list[ShiftRecord]]:
    """Move a random subset of nuclei by uniform integer offsets.

    The zero offset is excluded from the draw so that a retry always means
    a real relocation attempt. A move is accepted only if the shifted mask
    stays inside the tile and touches no other nucleus.
    """
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    nuclei = extract_instances(source)
    if spec.max_shift == 0 or not nuclei:
        return SemanticLabelMap(source.instance_ids.copy(), source.class_ids.copy(), source.vocab), []
    inst = source.instance_ids.copy()
    cls = source.class_ids.copy()
    h, w = inst.shape
    k = int(round(spec.shift_fraction * len(nuclei)))
    chosen = np.sort(rng.choice(len(nuclei), size=k, replace=False))
    m = spec.max_shift
    side = 2 * m + 1
    log = []
    for i in chosen:
        n = nuclei[i]
        cur = n.coords
        record = ShiftRecord(n.id, None, spec.max_retries)
        for attempt in range(1, spec.max_retries + 1):
            # uniform over the square minus the origin
            j = int(rng.integers(side * side - 1))
            j += j >= (side * side) // 2
            dy, dx = j // side - m, j % side - m
            new = cur + np.array([dy, dx])
            if new[:, 0].min() < 0 or new[:, 1].min() < 0 or new[:, 0].max() >= h or new[:, 1].max() >= w:
                continue
            hit = inst[new[:, 0], new[:, 1]]
            if np.any((hit != 0) & (hit != n.id)):
                continue
            inst[cur[:, 0], cur[:, 1]] = 0
            cls[cur[:, 0], cur[:, 1]] = 0
            inst[new[:, 0], new[:, 1]] = n.id
            cls[new[:, 0], new[:, 1]] = n.class_id
            record = ShiftRecord(n.id, (dy, dx), attempt)
            break
        log.append(record)
    return SemanticLabelMap(inst, cls, source.vocab), log
