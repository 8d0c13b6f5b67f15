"""Cyclic rotation groups C_n about the vertical (Z) axis.

Anchor ``i`` is the rotation by ``2*pi*i/n``. Angles are radians everywhere
inside the package; degrees only appear at the CLI boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from eq4d.errors import DegenerateDirection, InvalidArgument

TWO_PI = 2.0 * math.pi


def rotation_z(theta: float) -> np.ndarray:
    """3x3 rotation matrix about +Z by ``theta`` radians."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CyclicGroup:
    n: int
    anchors: np.ndarray = field(repr=False)
    matrices: np.ndarray = field(repr=False)

    @property
    def step(self) -> float:
        return TWO_PI / self.n

    def compose(self, i: int, j: int) -> int:
        return (i + j) % self.n

    def inverse(self, i: int) -> int:
        return (-i) % self.n

    def degrees(self) -> list[float]:
        return [math.degrees(a) for a in self.anchors]


def make_group(n: int) -> CyclicGroup:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgument(f"group order must be a positive integer, got {n!r}")
    n = int(n)
    anchors = np.array([TWO_PI * i / n for i in range(n)])
    matrices = np.stack([rotation_z(a) for a in anchors])
    anchors.setflags(write=False)
    matrices.setflags(write=False)
    return CyclicGroup(n=n, anchors=anchors, matrices=matrices)


def nearest_anchor(group: CyclicGroup, theta: float) -> int:
    """Circularly nearest anchor; an angle exactly on a bisector goes to the higher index."""
    t = math.fmod(theta, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    return int(math.floor(t / group.step + 0.5)) % group.n


def nearest_anchors(group: CyclicGroup, theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`nearest_anchor`."""
    t = np.mod(np.asarray(theta, dtype=np.float64), TWO_PI)
    return (np.floor(t / group.step + 0.5).astype(np.int64)) % group.n


def heading(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v[0] == 0.0 and v[1] == 0.0:
        raise DegenerateDirection(f"vector {v.tolist()} has no horizontal component")
    return math.atan2(v[1], v[0])


def anchor_of_vector(group: CyclicGroup, v) -> int:
    """Anchor label of a direction: nearest anchor to ``atan2(v_y, v_x)``; Z is ignored.

    Ties use the same higher-index rule as :func:`nearest_anchor`, which keeps
    the local heading ``theta(v) - anchor`` inside the half-open ``[-pi/n, pi/n)``.
    """
    return nearest_anchor(group, heading(v))


def anchors_of_vectors(group: CyclicGroup, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels for an (m, 3) array plus a boolean mask of degenerate (vertical or zero) rows.

    Degenerate rows get label 0.
    """
    v = np.asarray(v, dtype=np.float64)
    degenerate = (v[:, 0] == 0.0) & (v[:, 1] == 0.0)
    labels = nearest_anchors(group, np.arctan2(v[:, 1], v[:, 0]))
    labels[degenerate] = 0
    return labels, degenerate


@dataclass(frozen=True)
class FaithfulnessReport:
    group_order: int
    subgroup_order: int
    kernel_elements: tuple[int, ...]
    faithful: bool
    collapsed_pairs: tuple[tuple[int, int], ...]

    def kernel_degrees(self) -> list[float]:
        return [360.0 * i / self.group_order for i in self.kernel_elements]


def quotient_faithfulness(n: int, m: int) -> FaithfulnessReport:
    """Action of C_n on the cosets of its order-``m`` subgroup, by enumeration.

    Anchors in the kernel of the action fix every coset, so anchor pairs that
    differ by a kernel element produce identical quotient features.
    """
    if n < 1 or m < 1:
        raise InvalidArgument("group and subgroup orders must be positive")
    if n % m:
        raise InvalidArgument(f"subgroup order {m} does not divide {n}")
    stride = n // m
    subgroup = frozenset(range(0, n, stride))
    cosets = {frozenset((g + h) % n for h in subgroup) for g in range(n)}

    def act(a: int) -> dict[frozenset, frozenset]:
        return {c: frozenset((a + g) % n for g in c) for c in cosets}

    actions = [act(a) for a in range(n)]
    identity = actions[0]
    kernel = tuple(a for a in range(n) if actions[a] == identity)
    collapsed = tuple(
        (i, j) for i in range(n) for j in range(i + 1, n) if actions[i] == actions[j]
    )
    return FaithfulnessReport(
        group_order=n,
        subgroup_order=m,
        kernel_elements=kernel,
        faithful=kernel == (0,),
        collapsed_pairs=collapsed,
    )
