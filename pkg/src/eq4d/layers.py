"""Equivariant point-convolution layers over C_n regular-representation feature maps.

Feature maps are tensors of shape ``(points, anchors, channels)``. Rotating the
input cloud by anchor ``j`` must produce ``out[:, a] == out_orig[:, (a - j) % n]``,
i.e. ``torch.roll(out_orig, j, dims=1)``.

Kernel rotation is never computed geometrically at run time: anchor ``a`` reads
kernel point ``i`` through the permutation table, ``p_{sigma_a(i)} = R_a p_i``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from eq4d.errors import InvalidArgument, InvalidState
from eq4d.group import CyclicGroup
from eq4d.kernel import KernelLayout
from eq4d.pointcloud import NeighborLists, radius_neighbors

POOL_MODES = ("max", "avg", "attentive")
LEAKY_SLOPE = 0.1


@dataclass
class EquivariantFeatureMap:
    values: torch.Tensor
    positions: np.ndarray
    group: CyclicGroup

    def __post_init__(self):
        if self.values.dim() != 3:
            raise InvalidArgument(f"expected (m, n, c) values, got shape {tuple(self.values.shape)}")
        m, n, _ = self.values.shape
        if n != self.group.n:
            raise InvalidArgument(f"anchor axis {n} does not match group order {self.group.n}")
        if m != len(self.positions):
            raise InvalidArgument(f"{m} feature rows for {len(self.positions)} points")

    @property
    def size(self) -> int:
        return self.values.numel()

    def transported(self, j: int) -> torch.Tensor:
        """Values this map must take on the cloud rotated by anchor ``j``."""
        return transport(self.values, j)


@dataclass
class InvariantFeatureMap:
    values: torch.Tensor
    positions: np.ndarray


def transport(values: torch.Tensor, j: int) -> torch.Tensor:
    """Regular-representation action of anchor ``j``: shift the anchor axis by ``j``."""
    return torch.roll(values, shifts=j, dims=1)


# --- geometry -------------------------------------------------------------------

@dataclass
class ConvGeometry:
    """Precomputed kernel correlations between query points and their support neighbors.

    ``matrix`` is a sparse ``(k * m_q, m_s)`` matrix whose row ``i * m_q + q``
    holds ``correlation(y - x_q, p_i)`` for every support point ``y``.
    """

    matrix: torch.Tensor
    num_queries: int
    num_support: int
    kernel_size: int


def conv_geometry(
    support: np.ndarray,
    queries: np.ndarray,
    layout: KernelLayout,
    neighbors: Optional[NeighborLists] = None,
    dtype: Optional[torch.dtype] = None,
) -> ConvGeometry:
    support = np.asarray(support, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if neighbors is None:
        neighbors = radius_neighbors(support, queries, layout.support_radius)
    if len(neighbors) != len(queries):
        raise InvalidArgument("neighbor lists do not match the query count")
    qi = neighbors.query_index()
    si = neighbors.indices
    d = support[si] - queries[qi]
    w = np.maximum(0.0, 1.0 - np.linalg.norm(d[:, None, :] - layout.points[None], axis=2) / layout.sigma)
    e, i = np.nonzero(w)
    mq, ms, k = len(queries), len(support), layout.size
    rows = i * mq + qi[e]
    cols = si[e]
    # CSR with int32 indices keeps large pyramids cheap to cache.
    order = np.lexsort((cols, rows))
    crow = np.zeros(k * mq + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=k * mq), out=crow[1:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        matrix = torch.sparse_csr_tensor(
            torch.from_numpy(crow.astype(np.int32)),
            torch.from_numpy(cols[order].astype(np.int32)),
            torch.from_numpy(w[e, i][order]).to(dtype or torch.get_default_dtype()),
            (k * mq, ms),
            check_invariants=False,
        )
    return ConvGeometry(matrix, mq, ms, k)


def _aggregate(geom: ConvGeometry, flat: torch.Tensor) -> torch.Tensor:
    """Correlation-weighted neighbor sums, shape ``(k, m_q, cols)``."""
    if flat.shape[0] != geom.num_support:
        raise InvalidArgument(f"{flat.shape[0]} feature rows for {geom.num_support} support points")
    matrix = geom.matrix if geom.matrix.dtype == flat.dtype else geom.matrix.to(flat.dtype)
    out = torch.sparse.mm(matrix, flat)
    return out.view(geom.kernel_size, geom.num_queries, -1)


def _perm_index(layout: KernelLayout, device=None) -> torch.Tensor:
    return torch.tensor(np.array(layout.permutations), dtype=torch.long, device=device)


def lift_conv(features: torch.Tensor, geom: ConvGeometry, layout: KernelLayout, weight: torch.Tensor) -> torch.Tensor:
    """Plain per-point features ``(m_s, c_in)`` to an equivariant map ``(m_q, n, c_out)``.

    ``h(x, a) = sum_y sum_i corr(y - x, p_{sigma_a(i)}) W_i f(y)``.
    """
    k, c_in, c_out = weight.shape
    if features.dim() != 2 or features.shape[1] != c_in or k != layout.size:
        raise InvalidArgument(
            f"lift_conv shapes: features {tuple(features.shape)}, weight {tuple(weight.shape)}, kernel {layout.size}"
        )
    g = _aggregate(geom, features)                     # (k, m, c_in)
    perm = _perm_index(layout)                         # (n, k)
    gp = g[perm]                                       # (n, k, m, c_in); gp[a, i] = g[sigma_a(i)]
    gp = gp.permute(2, 0, 1, 3).reshape(geom.num_queries, layout.group_order, k * c_in)
    return gp @ weight.reshape(k * c_in, c_out)


def group_conv(features: torch.Tensor, geom: ConvGeometry, layout: KernelLayout, weight: torch.Tensor) -> torch.Tensor:
    """Spatial convolution of each anchor slice with its own permuted kernel.

    ``h(x, a) = sum_y sum_i corr(y - x, p_{sigma_a(i)}) W_i f(y, a)``.
    """
    k, c_in, c_out = weight.shape
    if features.dim() != 3:
        raise InvalidArgument(f"group_conv expects (m, n, c), got {tuple(features.shape)}")
    m_s, n, c = features.shape
    if n != layout.group_order:
        raise InvalidArgument(f"feature map has {n} anchors, kernel built for {layout.group_order}")
    if c != c_in or k != layout.size:
        raise InvalidArgument(f"group_conv shapes: features {tuple(features.shape)}, weight {tuple(weight.shape)}")
    g = _aggregate(geom, features.reshape(m_s, n * c_in)).view(k, geom.num_queries, n, c_in)
    perm = _perm_index(layout)
    anchors = torch.arange(n).view(n, 1)
    gp = g[perm, :, anchors, :]                        # (n, k, m, c_in); gp[a, i] = g[sigma_a(i), :, a]
    gp = gp.permute(2, 0, 1, 3).reshape(geom.num_queries, n, k * c_in)
    return gp @ weight.reshape(k * c_in, c_out)


def circulant_index(n: int) -> torch.Tensor:
    a = torch.arange(n).view(n, 1)
    b = torch.arange(n).view(1, n)
    return (b - a) % n


def anchor_mix(features: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Group convolution along the anchor axis: ``h(x, a) = sum_b M[(b - a) % n] f(x, b)``."""
    n, c_in, c_out = weight.shape
    if features.shape[1] != n or features.shape[2] != c_in:
        raise InvalidArgument(f"anchor_mix shapes: features {tuple(features.shape)}, weight {tuple(weight.shape)}")
    full = weight[circulant_index(n)]                  # (a, b, c_in, c_out)
    return torch.einsum("mbc,abcd->mad", features, full)


def pointwise_linear(features: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    out = features @ weight
    return out if bias is None else out + bias


def nearest_indices(coarse: np.ndarray, fine: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the nearest coarse point for every fine point; ties go to the smaller index."""
    coarse = np.asarray(coarse, dtype=np.float64)
    fine = np.asarray(fine, dtype=np.float64)
    if len(coarse) == 0:
        raise InvalidState("nearest-neighbor upsampling from an empty coarse cloud")
    out = np.empty(len(fine), dtype=np.int64)
    for s in range(0, len(fine), chunk):
        block = fine[s:s + chunk]
        d2 = ((block[:, None, :] - coarse[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = d2.argmin(1)
    return out


def nn_upsample(coarse: torch.Tensor, index: np.ndarray) -> torch.Tensor:
    """``f_fine(x, a) = f_coarse(nearest(x), a)`` given precomputed nearest indices."""
    if coarse.shape[0] == 0:
        raise InvalidState("nearest-neighbor upsampling from an empty coarse cloud")
    return coarse[torch.as_tensor(index, dtype=torch.long)]


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)


def invariant_pool(features: torch.Tensor, mode: str, score_weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Reduce the anchor axis: ``(m, n, c) -> (m, c)``.

    ``attentive`` weights anchors by a softmax over the scores ``f(x, a) . score_weight``.
    """
    if mode == "max":
        return features.max(dim=1).values
    if mode == "avg":
        return features.mean(dim=1)
    if mode == "attentive":
        if score_weight is None:
            raise InvalidArgument("attentive pooling needs a score vector")
        attn = torch.softmax(features @ score_weight.reshape(-1), dim=1)   # (m, n)
        return (attn.unsqueeze(-1) * features).sum(1)
    raise InvalidArgument(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")


def rotation_scores(features: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-anchor scores ``S_x[a] = phi(f(x, a))`` with one shared linear functional ``phi``."""
    s = features @ weight.reshape(-1)
    return s if bias is None else s + bias


def rotate_local(vectors: torch.Tensor, anchor: torch.Tensor, group: CyclicGroup) -> torch.Tensor:
    """Apply ``R_anchor`` to each row of ``vectors`` (local frame to global)."""
    mats = torch.tensor(np.array(group.matrices), dtype=vectors.dtype)[anchor]    # (m, 3, 3)
    return torch.einsum("mij,mj->mi", mats, vectors)


def unrotate_local(vectors: torch.Tensor, anchor: torch.Tensor, group: CyclicGroup) -> torch.Tensor:
    """Apply ``R_anchor^{-1}`` (global frame to local)."""
    mats = torch.tensor(np.array(group.matrices), dtype=vectors.dtype)[anchor]
    return torch.einsum("mji,mj->mi", mats, vectors)


def argmax_first(scores: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties resolved to the smallest index."""
    best = scores.max(dim=1, keepdim=True).values
    hits = scores == best
    idx = torch.arange(scores.shape[1]).expand_as(scores)
    return torch.where(hits, idx, scores.shape[1]).min(dim=1).values


def select_coordinate(
    features: torch.Tensor,
    scores: torch.Tensor,
    decoder_weight: torch.Tensor,
    decoder_bias: Optional[torch.Tensor],
    group: CyclicGroup,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick the top-scoring anchor, decode a local 3-vector there, rotate it to the global frame."""
    anchor = argmax_first(scores)
    chosen = features[torch.arange(features.shape[0]), anchor]
    local = pointwise_linear(chosen, decoder_weight, decoder_bias)
    return anchor, rotate_local(local, anchor, group)


# --- modules -------------------------------------------------------------------

def _init(shape, fan_in: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    bound = math.sqrt(3.0 / fan_in)
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


class LiftConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, layout: KernelLayout):
        super().__init__()
        self.layout = layout
        # Fan-in counts the handful of kernel points that are typically active.
        self.weight = nn.Parameter(_init((layout.size, c_in, c_out), 3 * c_in))

    def forward(self, x: torch.Tensor, geom: ConvGeometry) -> torch.Tensor:
        return lift_conv(x, geom, self.layout, self.weight)


class GroupConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, layout: KernelLayout):
        super().__init__()
        self.layout = layout
        self.weight = nn.Parameter(_init((layout.size, c_in, c_out), 3 * c_in))

    def forward(self, x: torch.Tensor, geom: ConvGeometry) -> torch.Tensor:
        return group_conv(x, geom, self.layout, self.weight)


class AnchorMix(nn.Module):
    def __init__(self, n: int, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(_init((n, c_in, c_out), n * c_in))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return anchor_mix(x, self.weight)


class PointwiseLinear(nn.Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(_init((c_in, c_out), c_in))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pointwise_linear(x, self.weight, self.bias)


class ChannelNorm(nn.Module):
    """Per-channel standardization with statistics pooled over points and anchors together."""

    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(c))
        self.shift = nn.Parameter(torch.zeros(c))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(-1, x.shape[-1])
        mean = flat.mean(0)
        var = ((flat - mean) ** 2).mean(0)
        return (x - mean) / torch.sqrt(var + self.eps) * self.scale + self.shift


class InvariantPool(nn.Module):
    def __init__(self, c: int, mode: str):
        super().__init__()
        if mode not in POOL_MODES:
            raise InvalidArgument(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.score = nn.Parameter(_init((c,), c)) if mode == "attentive" else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return invariant_pool(x, self.mode, self.score)
