"""Segmentation, association and panoptic quality metrics.

``s_assoc`` scores class-agnostic tubes: every positive instance id in a
sequence is one tube. The PQ family is averaged over classes; the identity
``PQ = SQ * RQ`` therefore holds per class but not for the class means.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from eq4d.errors import CountMismatch

MATCH_IOU = 0.5


def _check_lengths(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise CountMismatch("metric inputs differ in length")


# --- semantic ---------------------------------------------------------------------

def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``C[g, p]`` counts points of ground-truth class g predicted as p."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    _check_lengths(pred, gt)
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray, classes: Sequence[int]) -> tuple[float, dict[int, float]]:
    """Mean IoU over ``classes`` present in prediction or ground truth, plus per-class IoU."""
    per: dict[int, float] = {}
    for c in classes:
        tp = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - tp
        if union > 0:
            per[int(c)] = float(tp / union)
    mean = float(np.mean(list(per.values()))) if per else 1.0
    return mean, per


def s_cls(pred: np.ndarray, gt: np.ndarray, classes: Sequence[int]) -> tuple[float, dict[int, float]]:
    num = int(max(max(classes), np.max(pred, initial=0), np.max(gt, initial=0))) + 1
    return iou_from_confusion(confusion(pred, gt, num), classes)


# --- association ------------------------------------------------------------------

@dataclass
class AssocAccumulator:
    """Running sum of per-tube association scores over one or more sequences."""

    total: float = 0.0
    gt_tubes: int = 0
    pred_tubes: int = 0

    def add(self, pred_ids: np.ndarray, gt_ids: np.ndarray) -> None:
        pred_ids = np.asarray(pred_ids, dtype=np.int64)
        gt_ids = np.asarray(gt_ids, dtype=np.int64)
        _check_lengths(pred_ids, gt_ids)
        gt_u, gt_inv = np.unique(gt_ids, return_inverse=True)
        pr_u, pr_inv = np.unique(pred_ids, return_inverse=True)
        gt_inv, pr_inv = gt_inv.reshape(-1), pr_inv.reshape(-1)
        inter = np.zeros((len(gt_u), len(pr_u)), dtype=np.int64)
        np.add.at(inter, (gt_inv, pr_inv), 1)
        gt_size = inter.sum(1)
        pr_size = inter.sum(0)
        gt_keep = gt_u > 0
        pr_keep = pr_u > 0
        self.gt_tubes += int(gt_keep.sum())
        self.pred_tubes += int(pr_keep.sum())
        inter = inter[np.ix_(gt_keep, pr_keep)].astype(np.float64)
        if inter.size == 0:
            return
        union = gt_size[gt_keep][:, None] + pr_size[pr_keep][None, :] - inter
        tpa = inter * inter / union
        self.total += float((tpa.sum(1) / gt_size[gt_keep]).sum())

    def value(self) -> float:
        if self.gt_tubes == 0:
            return 1.0 if self.pred_tubes == 0 else 0.0
        return self.total / self.gt_tubes


def s_assoc(pred_ids: np.ndarray, gt_ids: np.ndarray) -> float:
    """Mean over ground-truth tubes t of ``(1/|t|) sum_p |p & t| IoU(p, t)``; id 0 is no tube."""
    acc = AssocAccumulator()
    acc.add(pred_ids, gt_ids)
    return acc.value()


def lstq(s_assoc_value: float, s_cls_value: float) -> float:
    return math.sqrt(s_assoc_value * s_cls_value)


# --- panoptic quality ------------------------------------------------------------

@dataclass
class ClassPQ:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def rq(self) -> float:
        d = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / d if d else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def pq(self) -> float:
        d = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / d if d else 0.0


def _segments(sem: np.ndarray, inst: np.ndarray, cls: int, thing: bool) -> dict[int, np.ndarray]:
    mask = sem == cls
    if not thing:
        return {0: mask} if mask.any() else {}
    ids = np.unique(inst[mask & (inst > 0)])
    return {int(i): mask & (inst == i) for i in ids}


def class_pq(pred_sem, pred_inst, gt_sem, gt_inst, cls: int, thing: bool) -> ClassPQ:
    """Match segments of one class at IoU > 0.5 (such matches are unique)."""
    ps = _segments(pred_sem, pred_inst, cls, thing)
    gs = _segments(gt_sem, gt_inst, cls, thing)
    out = ClassPQ()
    matched_p: set[int] = set()
    for gmask in gs.values():
        hit = False
        for pid, pmask in ps.items():
            if pid in matched_p:
                continue
            inter = np.count_nonzero(gmask & pmask)
            if inter == 0:
                continue
            iou = inter / np.count_nonzero(gmask | pmask)
            if iou > MATCH_IOU:
                out.tp += 1
                out.iou_sum += iou
                matched_p.add(pid)
                hit = True
                break
        if not hit:
            out.fn += 1
    out.fp = len(ps) - len(matched_p)
    return out


@dataclass
class PQAccumulator:
    classes: Sequence[int]
    things: Sequence[int]
    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.parts = {int(c): ClassPQ() for c in self.classes}
        self._stuff_conf: dict[int, list[int]] = {int(c): [0, 0] for c in self.classes}

    def add(self, pred_sem, pred_inst, gt_sem, gt_inst) -> None:
        pred_sem, pred_inst, gt_sem, gt_inst = (np.asarray(a, dtype=np.int64) for a in (pred_sem, pred_inst, gt_sem, gt_inst))
        _check_lengths(pred_sem, pred_inst, gt_sem, gt_inst)
        for c in self.classes:
            thing = c in self.things
            r = class_pq(pred_sem, pred_inst, gt_sem, gt_inst, c, thing)
            acc = self.parts[int(c)]
            acc.iou_sum += r.iou_sum
            acc.tp += r.tp
            acc.fp += r.fp
            acc.fn += r.fn
            if not thing:
                inter = int(np.count_nonzero((gt_sem == c) & (pred_sem == c)))
                union = int(np.count_nonzero((gt_sem == c) | (pred_sem == c)))
                self._stuff_conf[int(c)][0] += inter
                self._stuff_conf[int(c)][1] += union

    def stuff_iou(self, c: int) -> float:
        inter, union = self._stuff_conf[int(c)]
        return inter / union if union else 0.0

    def summary(self) -> dict[str, float]:
        def mean(vals):
            return float(np.mean(vals)) if vals else 1.0

        present = [c for c in self.classes if self.parts[int(c)].present()]
        things = [c for c in present if c in self.things]
        stuff = [c for c in present if c not in self.things]
        p = self.parts
        dagger = [p[c].pq for c in things] + [self.stuff_iou(c) for c in stuff]
        return {
            "pq": mean([p[c].pq for c in present]),
            "sq": mean([p[c].sq for c in present]),
            "rq": mean([p[c].rq for c in present]),
            "pq_dagger": mean(dagger),
            "pq_things": mean([p[c].pq for c in things]),
            "sq_things": mean([p[c].sq for c in things]),
            "rq_things": mean([p[c].rq for c in things]),
            "pq_stuff": mean([p[c].pq for c in stuff]),
            "sq_stuff": mean([p[c].sq for c in stuff]),
            "rq_stuff": mean([p[c].rq for c in stuff]),
        }


def panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, classes: Sequence[int], things: Sequence[int]) -> dict[str, float]:
    acc = PQAccumulator(classes, things)
    acc.add(pred_sem, pred_inst, gt_sem, gt_inst)
    return acc.summary()


# --- report -----------------------------------------------------------------------

@dataclass
class MetricReport:
    lstq: float
    s_assoc: float
    s_cls: float
    iou_things: float
    iou_stuff: float
    pq: float
    pq_dagger: float
    sq: float
    rq: float
    pq_things: float
    sq_things: float
    rq_things: float
    pq_stuff: float
    sq_stuff: float
    rq_stuff: float
    miou: float
    per_class_iou: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def csv_columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "per_class_iou"]

    def csv_row(self) -> list[str]:
        return [repr(float(getattr(self, c))) for c in self.csv_columns()]

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash"] + self.csv_columns())
        w.writerow([config_hash] + self.csv_row())
        return buf.getvalue()


class Evaluator:
    """Accumulates sequences and produces a :class:`MetricReport`."""

    def __init__(self, classes: Sequence[int], things: Sequence[int]):
        self.classes = [int(c) for c in classes]
        self.things = [int(c) for c in things]
        self.num = max(self.classes) + 1
        self.conf = np.zeros((self.num, self.num), dtype=np.int64)
        self.assoc = AssocAccumulator()
        self.pq = PQAccumulator(self.classes, self.things)

    def add(self, pred_sem, pred_inst, gt_sem, gt_inst) -> None:
        pred_sem = np.asarray(pred_sem, dtype=np.int64)
        gt_sem = np.asarray(gt_sem, dtype=np.int64)
        if pred_sem.size and (pred_sem.max() >= self.num or gt_sem.max() >= self.num):
            raise CountMismatch("class id outside the configured class list")
        self.conf += confusion(pred_sem, gt_sem, self.num)
        self.assoc.add(pred_inst, gt_inst)
        self.pq.add(pred_sem, pred_inst, gt_sem, gt_inst)

    def report(self) -> MetricReport:
        sc, per = iou_from_confusion(self.conf, self.classes)
        sa = self.assoc.value()
        pq = self.pq.summary()

        def mean_of(cs):
            vals = [per[c] for c in cs if c in per]
            return float(np.mean(vals)) if vals else 1.0

        stuff = [c for c in self.classes if c not in self.things]
        return MetricReport(
            lstq=lstq(sa, sc), s_assoc=sa, s_cls=sc,
            iou_things=mean_of(self.things), iou_stuff=mean_of(stuff),
            miou=sc, per_class_iou=per, **pq,
        )
