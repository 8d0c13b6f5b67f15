"""Kernel point layouts closed under C_n and their anchor permutation tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from eq4d.errors import InvalidArgument, KernelAsymmetry
from eq4d.group import CyclicGroup

SUPPORTED_ORDERS = (1, 2, 3, 4, 6)
MATCH_TOL = 1e-9


@dataclass(frozen=True)
class KernelLayout:
    points: np.ndarray
    radius: float
    sigma: float
    group_order: int
    permutations: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def support_radius(self) -> float:
        """Distance beyond which every kernel point has zero correlation."""
        return float(np.linalg.norm(self.points, axis=1).max() + self.sigma)

    def to_json(self) -> str:
        return json.dumps(
            {
                "radius": self.radius,
                "sigma": self.sigma,
                "group_order": self.group_order,
                "points": self.points.tolist(),
                "permutations": self.permutations.tolist(),
            },
            indent=2,
        )


def ring_size(n: int) -> int:
    if n not in SUPPORTED_ORDERS:
        raise InvalidArgument(f"unsupported anchor count {n}; expected one of {SUPPORTED_ORDERS}")
    return 8 if n == 4 else 6


def kernel_points(s: int, rho: float) -> np.ndarray:
    """Center, two axial points, and two horizontal rings of ``s`` points."""
    pts = [(0.0, 0.0, 0.0), (0.0, 0.0, 0.6 * rho), (0.0, 0.0, -0.6 * rho)]
    for r, z in ((0.5 * rho, -0.25 * rho), (rho, 0.25 * rho)):
        for q in range(s):
            a = 2.0 * math.pi * q / s
            pts.append((r * math.cos(a), r * math.sin(a), z))
    return np.array(pts)


def match_permutation(points: np.ndarray, rotation: np.ndarray, tol: float = MATCH_TOL) -> np.ndarray:
    """Index map ``perm`` with ``rotation @ points[i] == points[perm[i]]``."""
    rotated = points @ rotation.T
    dist = np.linalg.norm(rotated[:, None, :] - points[None, :, :], axis=2)
    hits = dist < tol
    counts = hits.sum(1)
    if (counts != 1).any():
        bad = int(np.flatnonzero(counts != 1)[0])
        raise KernelAsymmetry(f"kernel point {bad} has {int(counts[bad])} matches after rotation")
    perm = hits.argmax(1)
    if len(np.unique(perm)) != len(perm):
        raise KernelAsymmetry("rotation does not permute kernel points bijectively")
    return perm


def build_kernel(group: CyclicGroup, rho: float, sigma: float | None = None) -> KernelLayout:
    if not rho > 0:
        raise InvalidArgument(f"kernel radius must be positive, got {rho}")
    pts = kernel_points(ring_size(group.n), rho)
    perms = np.stack([match_permutation(pts, R) for R in group.matrices])
    pts.setflags(write=False)
    perms.setflags(write=False)
    return KernelLayout(pts, float(rho), float(0.3 * rho if sigma is None else sigma), group.n, perms)


def permutation_for_anchor(layout: KernelLayout, j: int) -> np.ndarray:
    if not 0 <= j < layout.group_order:
        raise InvalidArgument(f"anchor {j} out of range for n={layout.group_order}")
    return layout.permutations[j]


def correlation(d, p, sigma: float):
    """Linear kernel-point correlation ``max(0, 1 - ||d - p|| / sigma)``; broadcasts."""
    d = np.asarray(d, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return np.maximum(0.0, 1.0 - np.linalg.norm(d - p, axis=-1) / sigma)
