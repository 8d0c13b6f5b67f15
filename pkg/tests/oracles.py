"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

THINGS = (2, 3)
CLASSES = (0, 1, 2, 3)


def micro_instance(rng: np.random.Generator, max_points: int = 30, max_tubes: int = 4):
    """Random (pred_sem, pred_inst, gt_sem, gt_inst) with ids on thing classes only."""
    m = int(rng.integers(1, max_points + 1))

    def side():
        sem = rng.integers(0, 4, size=m)
        k = int(rng.integers(0, max_tubes + 1))
        inst = rng.integers(0, k + 1, size=m) if k else np.zeros(m, dtype=np.int64)
        inst = np.where(np.isin(sem, THINGS), inst, 0)
        return sem, inst

    ps, pi = side()
    gs, gi = side()
    return ps, pi, gs, gi


def s_cls_oracle(pred, gt, classes=CLASSES) -> float:
    ious = []
    for c in classes:
        p = {i for i, v in enumerate(pred) if v == c}
        g = {i for i, v in enumerate(gt) if v == c}
        if p | g:
            ious.append(len(p & g) / len(p | g))
    return sum(ious) / len(ious) if ious else 1.0


def _tubes(ids) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for i, v in enumerate(ids):
        if v > 0:
            out.setdefault(int(v), set()).add(i)
    return out


def s_assoc_oracle(pred_ids, gt_ids) -> float:
    gt = _tubes(gt_ids)
    pr = _tubes(pred_ids)
    if not gt:
        return 1.0 if not pr else 0.0
    total = 0.0
    for t in gt.values():
        inner = 0.0
        for p in pr.values():
            inter = len(p & t)
            if inter:
                inner += inter * inter / len(p | t)
        total += inner / len(t)
    return total / len(gt)


def lstq_oracle(pred_sem, pred_inst, gt_sem, gt_inst) -> float:
    return math.sqrt(s_assoc_oracle(pred_inst, gt_inst) * s_cls_oracle(pred_sem, gt_sem))


def _segments(sem, inst, c, thing):
    pts = [i for i, v in enumerate(sem) if v == c]
    if not thing:
        return [set(pts)] if pts else []
    seg: dict[int, set[int]] = {}
    for i in pts:
        if inst[i] > 0:
            seg.setdefault(int(inst[i]), set()).add(i)
    return list(seg.values())


def _best_matching(ps, gs):
    """Exhaustive search over injective gt -> pred assignments, keeping pairs with IoU > 0.5."""
    best = (0, 0.0)
    options = list(range(len(ps))) + [None] * len(gs)
    for assign in itertools.permutations(options, len(gs)):
        tp, s = 0, 0.0
        for g, p in zip(gs, assign):
            if p is None:
                continue
            iou = len(g & ps[p]) / len(g | ps[p])
            if iou > 0.5:
                tp += 1
                s += iou
        if (tp, s) > best:
            best = (tp, s)
    return best


def pq_oracle(pred_sem, pred_inst, gt_sem, gt_inst, classes=CLASSES, things=THINGS) -> dict[str, float]:
    per = {}
    for c in classes:
        thing = c in things
        ps = _segments(pred_sem, pred_inst, c, thing)
        gs = _segments(gt_sem, gt_inst, c, thing)
        if not ps and not gs:
            continue
        tp, s = _best_matching(ps, gs)
        fp, fn = len(ps) - tp, len(gs) - tp
        d = tp + 0.5 * fp + 0.5 * fn
        p = {i for i, v in enumerate(pred_sem) if v == c}
        g = {i for i, v in enumerate(gt_sem) if v == c}
        per[c] = {
            "pq": s / d, "sq": s / tp if tp else 0.0, "rq": tp / d,
            "iou": len(p & g) / len(p | g), "thing": thing,
        }

    def mean(vals):
        return sum(vals) / len(vals) if vals else 1.0

    th = [v for v in per.values() if v["thing"]]
    st = [v for v in per.values() if not v["thing"]]
    allc = list(per.values())
    return {
        "pq": mean([v["pq"] for v in allc]),
        "sq": mean([v["sq"] for v in allc]),
        "rq": mean([v["rq"] for v in allc]),
        "pq_dagger": mean([v["pq"] for v in th] + [v["iou"] for v in st]),
        "pq_things": mean([v["pq"] for v in th]),
        "sq_things": mean([v["sq"] for v in th]),
        "rq_things": mean([v["rq"] for v in th]),
        "pq_stuff": mean([v["pq"] for v in st]),
        "sq_stuff": mean([v["sq"] for v in st]),
        "rq_stuff": mean([v["rq"] for v in st]),
    }
