"""From head outputs to 4D panoptic labels.

Thing points are shifted by their predicted offsets and clustered greedily;
semantic labels are made consistent inside each instance by majority vote,
and instance ids are carried across overlapping windows by point overlap on
the shared frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from eq4d.errors import InvalidArgument
from eq4d.pointcloud import encode_labels, radius_neighbors


@dataclass
class PanopticPrediction:
    semantic: np.ndarray
    instance: np.ndarray
    window: int = 0

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape:
            raise InvalidArgument("semantic and instance arrays differ in length")

    @property
    def m(self) -> int:
        return len(self.semantic)

    def check_things(self, things: Sequence[int]) -> None:
        bad = (self.instance > 0) & ~np.isin(self.semantic, list(things))
        if bad.any():
            raise InvalidArgument(f"{int(bad.sum())} points carry an instance id on a stuff class")

    def label_bytes(self, frame_index: Optional[np.ndarray] = None) -> list[bytes]:
        """One label binary per frame (a single one when ``frame_index`` is None)."""
        if frame_index is None:
            return [encode_labels(self.semantic, self.instance)]
        frame_index = np.asarray(frame_index)
        return [
            encode_labels(self.semantic[frame_index == t], self.instance[frame_index == t])
            for t in range(int(frame_index.max()) + 1 if len(frame_index) else 0)
        ]


def _compact(ids: np.ndarray) -> np.ndarray:
    """Renumber positive ids to 1..K in order of first appearance."""
    out = np.zeros_like(ids)
    mapping: dict[int, int] = {}
    for i, v in enumerate(ids.tolist()):
        if v > 0:
            out[i] = mapping.setdefault(v, len(mapping) + 1)
    return out


def cluster_by_center(shifted: np.ndarray, thing_mask: np.ndarray, r_cluster: float = 1.0,
                      min_points: int = 5) -> np.ndarray:
    """Greedy densest-seed clustering of predicted centers.

    The unassigned point with the most unassigned neighbors within
    ``r_cluster`` (ties to the smallest index) seeds a cluster that takes all
    of those neighbors. Clusters smaller than ``min_points`` get id 0.
    """
    if r_cluster <= 0:
        raise InvalidArgument("r_cluster must be positive")
    shifted = np.asarray(shifted, dtype=np.float64)
    thing_mask = np.asarray(thing_mask, dtype=bool)
    ids = np.zeros(len(shifted), dtype=np.int64)
    idx = np.flatnonzero(thing_mask)
    if len(idx) == 0:
        return ids
    pts = shifted[idx]
    nb = radius_neighbors(pts, pts, r_cluster)
    counts = np.diff(nb.offsets).astype(np.int64)
    free = np.ones(len(pts), dtype=bool)
    local = np.zeros(len(pts), dtype=np.int64)
    next_id = 1
    while free.any():
        cand = np.where(free, counts, -1)
        seed = int(cand.argmax())
        members = nb[seed]
        members = members[free[members]]
        free[members] = False
        for j in members:
            counts[nb[int(j)]] -= 1
        if len(members) >= min_points:
            local[members] = next_id
            next_id += 1
    ids[idx] = local
    return ids


def cluster_by_centerness(scores: np.ndarray, positions: np.ndarray, thing_mask: np.ndarray,
                          r_seed: float = 1.0, r_group: float = 2.0, min_score: float = 0.0) -> np.ndarray:
    """Seed at local score maxima and attach each thing point to the best seed in reach.

    A thing point is a seed when no thing point within ``r_seed`` has a higher
    score (equal scores defer to the smaller index) and its score is at least
    ``min_score``. Instance ids follow the seeds' index order.
    """
    if r_seed <= 0 or r_group <= 0:
        raise InvalidArgument("radii must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    ids = np.zeros(len(scores), dtype=np.int64)
    idx = np.flatnonzero(np.asarray(thing_mask, dtype=bool))
    if len(idx) == 0:
        return ids
    pts, sc = positions[idx], scores[idx]
    nb = radius_neighbors(pts, pts, r_seed)
    q = np.repeat(np.arange(len(pts)), np.diff(nb.offsets))
    beaten = (sc[nb.indices] > sc[q]) | ((sc[nb.indices] == sc[q]) & (nb.indices < q))
    is_seed = (np.bincount(q[beaten], minlength=len(pts)) == 0) & (sc >= min_score)
    seeds = np.flatnonzero(is_seed)
    if len(seeds) == 0:
        return ids
    reach = radius_neighbors(pts[seeds], pts, r_group)
    local = np.zeros(len(pts), dtype=np.int64)
    for p in range(len(pts)):
        cand = reach[p]
        if len(cand):
            # Highest score; among equals the earliest seed.
            best = cand[np.lexsort((cand, -sc[seeds[cand]]))[0]]
            local[p] = int(best) + 1
    ids[idx] = _compact(local)
    return ids


def majority_vote(instance: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Per-point argmax, replaced inside each instance by its most frequent class."""
    logits = np.asarray(logits)
    instance = np.asarray(instance, dtype=np.int64)
    classes = logits.argmax(1).astype(np.int64)
    out = classes.copy()
    things = instance > 0
    if not things.any():
        return out
    ids, inv = np.unique(instance[things], return_inverse=True)
    inv = inv.reshape(-1)
    table = np.zeros((len(ids), logits.shape[1]), dtype=np.int64)
    np.add.at(table, (inv, classes[things]), 1)
    out[things] = table.argmax(1)[inv]
    return out


def associate_windows(prev: PanopticPrediction, nxt: PanopticPrediction, prev_index: np.ndarray,
                      next_index: np.ndarray, next_free: int) -> tuple[PanopticPrediction, int]:
    """Carry instance ids from ``prev`` into ``nxt`` through shared-frame points.

    ``prev_index[i]`` and ``next_index[i]`` address the same physical point.
    Pairs are matched greedily by descending overlap (ties to the smaller
    next id, then the smaller prev id), each prev id at most once; unmatched
    next instances get fresh ids starting at ``next_free``. Returns the
    remapped prediction and the updated fresh-id counter.
    """
    prev_index = np.asarray(prev_index, dtype=np.int64)
    next_index = np.asarray(next_index, dtype=np.int64)
    if len(prev_index) == 0 or len(prev_index) != len(next_index):
        raise InvalidArgument("windows must share at least one frame of identified points")
    a = prev.instance[prev_index]
    b = nxt.instance[next_index]
    both = (a > 0) & (b > 0)
    pairs, overlap = np.unique(np.stack([b[both], a[both]], 1), axis=0, return_counts=True)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -overlap)) if len(pairs) else []
    mapping: dict[int, int] = {}
    used: set[int] = set()
    for k in order:
        nid, pid = int(pairs[k, 0]), int(pairs[k, 1])
        if nid in mapping or pid in used:
            continue
        mapping[nid] = pid
        used.add(pid)
    for nid in np.unique(nxt.instance[nxt.instance > 0]).tolist():
        if nid not in mapping:
            mapping[nid] = next_free
            next_free += 1
    remapped = np.array([mapping.get(int(v), 0) for v in nxt.instance.tolist()], dtype=np.int64)
    return PanopticPrediction(nxt.semantic.copy(), remapped, nxt.window), next_free


@dataclass
class ClusterConfig:
    method: str = "center"
    r_cluster: float = 1.0
    min_points: int = 5
    r_seed: float = 1.0
    r_group: float = 2.0
    min_score: float = 0.1

    def __post_init__(self):
        if self.method not in ("center", "centerness"):
            raise InvalidArgument("method must be 'center' or 'centerness'")


def assemble_prediction(positions: np.ndarray, logits: np.ndarray, offsets: np.ndarray,
                        things: Sequence[int], cfg: ClusterConfig = ClusterConfig(),
                        centerness: Optional[np.ndarray] = None, window: int = 0) -> PanopticPrediction:
    """Cluster, majority-vote, and drop instance ids that ended up on stuff classes."""
    positions = np.asarray(positions, dtype=np.float64)
    thing_mask = np.isin(np.asarray(logits).argmax(1), list(things))
    if cfg.method == "center":
        inst = cluster_by_center(positions + np.asarray(offsets, dtype=np.float64), thing_mask,
                                 cfg.r_cluster, cfg.min_points)
    else:
        if centerness is None:
            raise InvalidArgument("centerness clustering needs scores")
        inst = cluster_by_centerness(centerness, positions, thing_mask, cfg.r_seed, cfg.r_group, cfg.min_score)
    sem = majority_vote(inst, logits)
    inst = np.where(np.isin(sem, list(things)), inst, 0)
    return PanopticPrediction(sem, _compact(inst), window)
