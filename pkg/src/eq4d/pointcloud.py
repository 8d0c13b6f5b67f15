"""Point cloud container, exact radius search, voxel subsampling, SemanticKITTI I/O."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from eq4d.errors import CountMismatch, InvalidArgument, InvalidInput, MalformedScan
from eq4d.group import rotation_z

# 27 voxel offsets in a fixed order so candidate generation is deterministic.
_CELL_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    time_index: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    instance: Optional[np.ndarray] = None
    remission: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        m = len(pos)
        t = np.zeros(m, dtype=np.int64) if self.time_index is None else self.time_index
        object.__setattr__(self, "time_index", np.asarray(t, dtype=np.int64))
        for name, dtype in (("semantic", np.int64), ("instance", np.int64), ("remission", np.float64)):
            arr = getattr(self, name)
            if arr is not None:
                object.__setattr__(self, name, np.asarray(arr, dtype=dtype))
        for name in ("time_index", "semantic", "instance", "remission"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (m,):
                raise CountMismatch(f"{name} has shape {arr.shape}, expected ({m},)")

    def __len__(self) -> int:
        return len(self.positions)

    def check_things(self, things: Iterable[int]) -> None:
        """Raise if an instance id is set on a point whose class is not a thing class."""
        if self.instance is None:
            return
        if self.semantic is None:
            raise InvalidInput("instance ids without semantic labels")
        bad = (self.instance != 0) & ~np.isin(self.semantic, list(things))
        if bad.any():
            raise InvalidInput(f"{int(bad.sum())} points carry an instance id on a stuff class")

    def select(self, idx: np.ndarray) -> "PointCloud":
        def take(a):
            return None if a is None else a[idx]

        return PointCloud(
            self.positions[idx], take(self.time_index), take(self.semantic),
            take(self.instance), take(self.remission),
        )

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return replace(self, positions=positions)


@dataclass(frozen=True)
class NeighborLists:
    """CSR neighbor lists: neighbors of query ``q`` are ``indices[offsets[q]:offsets[q+1]]``."""

    offsets: np.ndarray
    indices: np.ndarray
    radius: float

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, q: int) -> np.ndarray:
        return self.indices[self.offsets[q]:self.offsets[q + 1]]

    def to_lists(self) -> list[list[int]]:
        return [self[q].tolist() for q in range(len(self))]

    def query_index(self) -> np.ndarray:
        """Query index of every (query, neighbor) edge, aligned with ``indices``."""
        return np.repeat(np.arange(len(self), dtype=np.int64), np.diff(self.offsets))


def _as_positions(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.positions
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def radius_neighbors(support, queries, r: float) -> NeighborLists:
    """Exact radius search (``||s - q|| <= r``) using a voxel hash with cell size ``r``."""
    if not r > 0:
        raise InvalidArgument(f"radius must be positive, got {r}")
    sup = _as_positions(support)
    qry = _as_positions(queries)
    if not (np.isfinite(sup).all() and np.isfinite(qry).all()):
        raise InvalidInput("non-finite coordinates")
    nq = len(qry)
    if len(sup) == 0 or nq == 0:
        return NeighborLists(np.zeros(nq + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), r)

    origin = np.minimum(sup.min(0), qry.min(0))
    scell = np.floor((sup - origin) / r).astype(np.int64)
    qcell = np.floor((qry - origin) / r).astype(np.int64)
    dims = np.maximum(scell.max(0), qcell.max(0)) + 3
    # Shift by one so neighbor offsets never go negative.
    def key(c):
        c = c + 1
        return (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]

    skey = key(scell)
    order = np.argsort(skey, kind="stable")
    sorted_keys = skey[order]

    q_parts, s_parts = [], []
    for off in _CELL_OFFSETS:
        k = key(qcell + off)
        lo = np.searchsorted(sorted_keys, k, side="left")
        hi = np.searchsorted(sorted_keys, k, side="right")
        cnt = hi - lo
        if not cnt.any():
            continue
        qi = np.repeat(np.arange(nq, dtype=np.int64), cnt)
        starts = np.repeat(lo - np.cumsum(cnt) + cnt, cnt)
        pos_in = np.arange(cnt.sum(), dtype=np.int64) + starts
        q_parts.append(qi)
        s_parts.append(order[pos_in])
    if not q_parts:
        return NeighborLists(np.zeros(nq + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), r)
    qi = np.concatenate(q_parts)
    si = np.concatenate(s_parts)
    d2 = np.sum((sup[si] - qry[qi]) ** 2, axis=1)
    keep = d2 <= r * r
    qi, si = qi[keep], si[keep]
    order = np.lexsort((si, qi))
    qi, si = qi[order], si[order]
    offsets = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(np.bincount(qi, minlength=nq), out=offsets[1:])
    return NeighborLists(offsets, si, r)


def _majority(groups: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    """Most frequent value per group; ties go to the smaller value."""
    pairs, counts = np.unique(np.stack([groups, values], 1), axis=0, return_counts=True)
    # Sort by group, then count descending, then value ascending.
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.ones(len(pairs), dtype=bool)
    first[1:] = pairs[1:, 0] != pairs[:-1, 0]
    out = np.zeros(n_groups, dtype=np.int64)
    out[pairs[first, 0]] = pairs[first, 1]
    return out


def voxel_groups(positions: np.ndarray, cell: float) -> tuple[np.ndarray, int]:
    """Voxel index of each point (voxels numbered in lexicographic key order) and voxel count."""
    keys = np.floor(positions / cell).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    return inverse, int(inverse.max()) + 1 if len(inverse) else 0


def grid_subsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One point per occupied voxel at the barycenter; labels by majority vote."""
    if not cell > 0:
        raise InvalidArgument(f"cell size must be positive, got {cell}")
    if len(cloud) == 0:
        return cloud
    inv, nv = voxel_groups(cloud.positions, cell)
    counts = np.bincount(inv, minlength=nv).astype(np.float64)
    pos = np.stack([np.bincount(inv, cloud.positions[:, d], nv) for d in range(3)], 1) / counts[:, None]

    def vote(a):
        return None if a is None else _majority(inv, a, nv)

    rem = None
    if cloud.remission is not None:
        rem = np.bincount(inv, cloud.remission, nv) / counts
    return PointCloud(pos, vote(cloud.time_index), vote(cloud.semantic), vote(cloud.instance), rem)


def rotate_cloud(cloud: PointCloud, theta: float) -> PointCloud:
    return cloud.with_positions(cloud.positions @ rotation_z(theta).T)


def transform_points(positions: np.ndarray, pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    return positions @ pose[:3, :3].T + pose[:3, 3]


def stack_frames(frames: Sequence[PointCloud], poses: Sequence[np.ndarray]) -> PointCloud:
    """Concatenate frames in frame-0 coordinates, tagging each point with its frame offset."""
    if len(frames) != len(poses):
        raise InvalidArgument(f"{len(frames)} frames but {len(poses)} poses")
    if not frames:
        return PointCloud(np.zeros((0, 3)))

    def cat(name):
        arrs = [getattr(f, name) for f in frames]
        if any(a is None for a in arrs):
            return None
        return np.concatenate(arrs)

    pos = np.concatenate([transform_points(f.positions, p) for f, p in zip(frames, poses)])
    t = np.concatenate([np.full(len(f), i, dtype=np.int64) for i, f in enumerate(frames)])
    return PointCloud(pos, t, cat("semantic"), cat("instance"), cat("remission"))


# --- SemanticKITTI binary layout ---------------------------------------------

def read_semantic_kitti(scan_bytes: bytes, label_bytes: Optional[bytes] = None) -> PointCloud:
    """Parse ``<f4`` (x, y, z, remission) quadruples and optional ``<u4`` label words.

    Label words hold the semantic class in the low 16 bits and the instance id
    in the high 16 bits.
    """
    if len(scan_bytes) % 16:
        raise MalformedScan(f"scan length {len(scan_bytes)} is not a multiple of 16")
    raw = np.frombuffer(scan_bytes, dtype="<f4").reshape(-1, 4)
    sem = inst = None
    if label_bytes is not None:
        sem, inst = decode_labels(label_bytes, len(raw))
    return PointCloud(
        raw[:, :3].astype(np.float64), semantic=sem, instance=inst,
        remission=raw[:, 3].astype(np.float64),
    )


def decode_labels(label_bytes: bytes, count: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Split ``<u4`` label words into (semantic, instance) arrays."""
    if len(label_bytes) % 4:
        raise MalformedScan(f"label length {len(label_bytes)} is not a multiple of 4")
    words = np.frombuffer(label_bytes, dtype="<u4")
    if count is not None and len(words) != count:
        raise CountMismatch(f"{len(words)} labels for {count} points")
    return (words & 0xFFFF).astype(np.int64), (words >> 16).astype(np.int64)


def encode_labels(semantic: np.ndarray, instance: np.ndarray) -> bytes:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if (semantic < 0).any() or (semantic > 0xFFFF).any() or (instance < 0).any() or (instance > 0xFFFF).any():
        raise InvalidArgument("semantic and instance ids must fit in 16 bits")
    words = (instance.astype(np.uint32) << 16) | semantic.astype(np.uint32)
    return words.astype("<u4").tobytes()


def write_semantic_kitti(cloud: PointCloud) -> tuple[bytes, Optional[bytes]]:
    m = len(cloud)
    rem = cloud.remission if cloud.remission is not None else np.zeros(m)
    raw = np.empty((m, 4), dtype="<f4")
    raw[:, :3] = cloud.positions
    raw[:, 3] = rem
    labels = None
    if cloud.semantic is not None:
        inst = cloud.instance if cloud.instance is not None else np.zeros(m, dtype=np.int64)
        labels = encode_labels(cloud.semantic, inst)
    return raw.tobytes(), labels


def load_scan(scan_path: Path, label_path: Optional[Path] = None) -> PointCloud:
    label_bytes = Path(label_path).read_bytes() if label_path is not None else None
    return read_semantic_kitti(Path(scan_path).read_bytes(), label_bytes)


def write_ply(path: Path, cloud: PointCloud, extra: Optional[dict[str, np.ndarray]] = None) -> None:
    """ASCII PLY with positions plus every available per-point label column."""
    cols: dict[str, np.ndarray] = {}
    for name in ("time_index", "semantic", "instance"):
        arr = getattr(cloud, name)
        if arr is not None:
            cols[name] = arr
    if extra:
        cols.update(extra)
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(cloud)}",
        "property double x", "property double y", "property double z",
    ]
    lines += [f"property int {name}" for name in cols]
    lines.append("end_header")
    body = [cloud.positions[:, 0], cloud.positions[:, 1], cloud.positions[:, 2]]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(len(cloud)):
            row = [f"{body[0][i]:.9g}", f"{body[1][i]:.9g}", f"{body[2][i]:.9g}"]
            row += [str(int(c[i])) for c in cols.values()]
            fh.write(" ".join(row) + "\n")
