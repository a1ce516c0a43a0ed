"""Nuclei segmentation and classification metrics.

Segmentation: Dice, AJI, DQ/SQ/PQ. Classification: accuracy over matched
nuclei and per-class F1 that also charges missed and spurious detections.

Pairing rule (panoptic and classification): a gt and a pred instance are
paired iff their IoU is strictly above 0.5, which makes pairs unique.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


def _check(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def dice(gt_fg, pred_fg) -> float:
    """2|A∩B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _check(gt_fg, pred_fg)
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


@dataclass
class Overlap:
    """Pairwise overlap table between nonzero gt and pred IDs."""

    gt_ids: np.ndarray
    pred_ids: np.ndarray
    gt_area: np.ndarray
    pred_area: np.ndarray
    inter: np.ndarray  # len(gt_ids) x len(pred_ids)

    @property
    def union(self) -> np.ndarray:
        return self.gt_area[:, None] + self.pred_area[None, :] - self.inter

    @property
    def iou(self) -> np.ndarray:
        u = self.union
        return np.divide(self.inter, u, out=np.zeros(u.shape), where=u > 0)


def overlap_table(gt, pred) -> Overlap:
    gt, pred = _check(gt, pred)
    gt = gt.astype(np.int64).ravel()
    pred = pred.astype(np.int64).ravel()
    gt_ids, gt_inv, gt_area = np.unique(gt, return_inverse=True, return_counts=True)
    pr_ids, pr_inv, pr_area = np.unique(pred, return_inverse=True, return_counts=True)
    table = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)
    np.add.at(table, (gt_inv, pr_inv), 1)
    gi = gt_ids != 0
    pi = pr_ids != 0
    return Overlap(gt_ids[gi], pr_ids[pi], gt_area[gi], pr_area[pi], table[np.ix_(gi, pi)])


def aji(gt, pred) -> float:
    """Aggregated Jaccard Index.

    Every gt nucleus takes the pred nucleus of highest IoU (lowest pred ID on
    ties; a pred may serve several gts). Unused pred areas join the union.
    """
    ov = overlap_table(gt, pred)
    if len(ov.gt_ids) == 0 and len(ov.pred_ids) == 0:
        return 1.0
    inter_sum = 0
    union_sum = 0
    used = np.zeros(len(ov.pred_ids), dtype=bool)
    if len(ov.pred_ids):
        iou = ov.iou
        best = np.argmax(iou, axis=1)  # first max = lowest pred ID (ids are sorted)
        for g, p in enumerate(best):
            if ov.inter[g, p] > 0:
                inter_sum += int(ov.inter[g, p])
                union_sum += int(ov.gt_area[g] + ov.pred_area[p] - ov.inter[g, p])
                used[p] = True
            else:
                union_sum += int(ov.gt_area[g])
    else:
        union_sum += int(ov.gt_area.sum())
    union_sum += int(ov.pred_area[~used].sum())
    return inter_sum / union_sum if union_sum else 0.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (gt ID, pred ID, IoU)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)

    @property
    def iou_sum(self) -> float:
        return float(sum(p[2] for p in self.pairs))


def match_instances(gt, pred) -> MatchResult:
    ov = overlap_table(gt, pred)
    iou = ov.iou
    g_idx, p_idx = np.nonzero(iou > 0.5)
    pairs = [(int(ov.gt_ids[g]), int(ov.pred_ids[p]), float(iou[g, p])) for g, p in zip(g_idx, p_idx)]
    mg = set(ov.gt_ids[g_idx].tolist())
    mp = set(ov.pred_ids[p_idx].tolist())
    return MatchResult(
        pairs,
        [int(i) for i in ov.gt_ids if i not in mg],
        [int(i) for i in ov.pred_ids if i not in mp],
    )


def quality_from_counts(tp: int, fp: int, fn: int, iou_sum: float) -> tuple[float, float, float]:
    denom = tp + 0.5 * fp + 0.5 * fn
    dq = tp / denom if denom else 0.0
    sq = iou_sum / tp if tp else 0.0
    return dq, sq, dq * sq


def panoptic(gt, pred) -> tuple[float, float, float, MatchResult]:
    """(DQ, SQ, PQ, matches). Empty-vs-empty scores 0."""
    m = match_instances(gt, pred)
    dq, sq, pq = quality_from_counts(m.tp, m.fp, m.fn, m.iou_sum)
    return dq, sq, pq, m


def _instance_class(inst: np.ndarray, cls: np.ndarray) -> dict[int, int]:
    """Majority class per instance (ties -> lower class ID)."""
    fg = inst != 0
    ids = inst[fg].astype(np.int64)
    c = cls[fg].astype(np.int64)
    if ids.size == 0:
        return {}
    n_cls = int(c.max()) + 1
    uid, inv = np.unique(ids, return_inverse=True)
    votes = np.zeros((len(uid), n_cls), dtype=np.int64)
    np.add.at(votes, (inv, c), 1)
    return dict(zip(uid.tolist(), np.argmax(votes, axis=1).tolist()))


@dataclass
class ClassCounts:
    """Pooled detection-aware counts, mergeable across tiles."""

    n_classes: int
    matched: int = 0
    matched_correct: int = 0
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_classes, dtype=np.int64))

    def merge(self, other: "ClassCounts") -> "ClassCounts":
        n = max(self.n_classes, other.n_classes)

        def pad(a):
            return np.pad(a, (0, n - len(a)))

        return ClassCounts(n, self.matched + other.matched, self.matched_correct + other.matched_correct,
                           pad(self.tp) + pad(other.tp), pad(self.fp) + pad(other.fp), pad(self.fn) + pad(other.fn))

    def accuracy(self) -> float:
        return self.matched_correct / self.matched if self.matched else math.nan

    def f1(self) -> dict[int, float]:
        out = {}
        for c in range(1, self.n_classes):
            denom = 2 * self.tp[c] + self.fp[c] + self.fn[c]
            out[c] = 2 * self.tp[c] / denom if denom else math.nan
        return out


def classification_counts(gt_inst, gt_cls, pred_inst, pred_cls, n_classes: int | None = None) -> ClassCounts:
    gt_inst, pred_inst = _check(gt_inst, pred_inst)
    _check(gt_inst, gt_cls)
    _check(pred_inst, pred_cls)
    gtc = _instance_class(np.asarray(gt_inst), np.asarray(gt_cls))
    prc = _instance_class(np.asarray(pred_inst), np.asarray(pred_cls))
    if n_classes is None:
        n_classes = max([1, *gtc.values(), *prc.values()]) + 1
    counts = ClassCounts(n_classes)
    m = match_instances(gt_inst, pred_inst)
    for g, p, _ in m.pairs:
        a, b = gtc[g], prc[p]
        counts.matched += 1
        if a == b:
            counts.matched_correct += 1
            counts.tp[a] += 1
        else:
            counts.fn[a] += 1
            counts.fp[b] += 1
    for g in m.unmatched_gt:
        counts.fn[gtc[g]] += 1
    for p in m.unmatched_pred:
        counts.fp[prc[p]] += 1
    return counts


def classification_scores(gt_inst, gt_cls, pred_inst, pred_cls, n_classes: int | None = None):
    """(accuracy over matched pairs, {class: F1}).

    Matched pair with equal classes: TP for that class. Mismatched pair:
    FN for the gt class and FP for the predicted class. Unmatched gt / pred
    nuclei: FN / FP for their own class. Undefined values are NaN.
    """
    counts = classification_counts(gt_inst, gt_cls, pred_inst, pred_cls, n_classes)
    return counts.accuracy(), counts.f1()


@dataclass
class TileScores:
    tile_id: str
    dice: float
    aji: float
    dq: float
    sq: float
    pq: float
    match: MatchResult
    counts: ClassCounts
    fg_inter: int
    fg_total: int


def score_tile(tile_id, gt_inst, gt_cls, pred_inst, pred_cls, n_classes: int) -> TileScores:
    gt_inst, pred_inst = _check(gt_inst, pred_inst)
    dq, sq, pq, m = panoptic(gt_inst, pred_inst)
    a = gt_inst != 0
    b = pred_inst != 0
    return TileScores(
        tile_id, dice(a, b), aji(gt_inst, pred_inst), dq, sq, pq, m,
        classification_counts(gt_inst, gt_cls, pred_inst, pred_cls, n_classes),
        int(np.count_nonzero(a & b)), int(a.sum() + b.sum()),
    )


def _num(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def aggregate(scores: list[TileScores], class_names: list[str]) -> dict:
    """Fold per-tile scores in tile-ID order.

    Dice is reported both per-tile-averaged and over pooled pixels; DQ/SQ/PQ
    both averaged and from pooled counts; classification scores pool pairs.
    """
    scores = sorted(scores, key=lambda s: s.tile_id)
    n_classes = len(class_names)
    pooled = ClassCounts(n_classes)
    tp = fp = fn = 0
    iou_sum = 0.0
    inter = total = 0
    for s in scores:
        pooled = pooled.merge(s.counts)
        tp += s.match.tp
        fp += s.match.fp
        fn += s.match.fn
        iou_sum += s.match.iou_sum
        inter += s.fg_inter
        total += s.fg_total
    mean = (lambda k: float(np.mean([getattr(s, k) for s in scores]))) if scores else (lambda k: None)
    dq, sq, pq = quality_from_counts(tp, fp, fn, iou_sum)
    f1 = pooled.f1()
    return {
        "n_tiles": len(scores),
        "dice_per_tile_mean": mean("dice"),
        "dice_pooled": 2 * inter / total if total else 1.0,
        "aji": mean("aji"),
        "dq": mean("dq"),
        "sq": mean("sq"),
        "pq": mean("pq"),
        "dq_pooled": dq,
        "sq_pooled": sq,
        "pq_pooled": pq,
        "acc": _num(pooled.accuracy()),
        "f1": {class_names[c]: _num(f1[c]) for c in range(1, n_classes)},
    }


def tile_report(s: TileScores, class_names: list[str]) -> dict:
    f1 = s.counts.f1()
    return {
        "tile_id": s.tile_id,
        "dice": s.dice,
        "aji": s.aji,
        "dq": s.dq,
        "sq": s.sq,
        "pq": s.pq,
        "tp": s.match.tp,
        "fp": s.match.fp,
        "fn": s.match.fn,
        "acc": _num(s.counts.accuracy()),
        "f1": {class_names[c]: _num(f1[c]) for c in range(1, len(class_names))},
    }
