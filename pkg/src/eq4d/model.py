"""Encoder/decoder backbone and the full panoptic network.

The multi-resolution geometry (subsampled clouds, correlation matrices,
upsampling indices) is built once per input cloud in numpy and reused by the
forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from eq4d.errors import InvalidConfig
from eq4d.group import CyclicGroup, make_group
from eq4d.heads import HeadConfig, PanopticHeads
from eq4d.kernel import SUPPORTED_ORDERS, KernelLayout, build_kernel
from eq4d.layers import (
    AnchorMix,
    ChannelNorm,
    ConvGeometry,
    GroupConv,
    LiftConv,
    PointwiseLinear,
    conv_geometry,
    leaky_relu,
    nearest_indices,
    nn_upsample,
)
from eq4d.pointcloud import PointCloud, grid_subsample

SUBSAMPLE_MODES = ("grid", "fps")


@dataclass
class NetConfig:
    n: int = 4
    width: int = 8
    levels: int = 3
    first_cell: float = 0.4
    kernel_scale: float = 2.0
    subsample: str = "grid"
    fps_ratio: int = 4
    num_classes: int = 4
    num_frames: int = 3
    rhead_anchors: int = 0

    def __post_init__(self):
        if self.n < 1 or self.width < 1 or self.levels < 1:
            raise InvalidConfig("n, width and levels must be positive")
        if self.n not in SUPPORTED_ORDERS or self.rhead_anchors not in (0,) + SUPPORTED_ORDERS:
            raise InvalidConfig(f"anchor counts must be one of {SUPPORTED_ORDERS}")
        if self.subsample not in SUBSAMPLE_MODES:
            raise InvalidConfig(f"subsample must be one of {SUBSAMPLE_MODES}")
        if self.rhead_anchors and self.n != 1:
            raise InvalidConfig("the plain rotation head runs on an n = 1 backbone")

    def cell(self, level: int) -> float:
        return self.first_cell * 2 ** level

    def kernel_radius(self, level: int) -> float:
        return self.kernel_scale * self.cell(level)

    def widths(self) -> list[int]:
        return [self.width * 2 ** level for level in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Pyramid:
    positions: list[np.ndarray]
    conv: list[ConvGeometry]
    down: list[ConvGeometry]
    up: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [len(p) for p in self.positions]


def farthest_point_indices(positions: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point sampling starting at index 0; depends only on pairwise distances."""
    m = len(positions)
    count = min(count, m)
    chosen = np.empty(count, dtype=np.int64)
    dist = np.full(m, np.inf)
    idx = 0
    for s in range(count):
        chosen[s] = idx
        dist = np.minimum(dist, ((positions - positions[idx]) ** 2).sum(1))
        idx = int(dist.argmax())
    return chosen


def layouts_for(cfg: NetConfig, group: CyclicGroup) -> list[KernelLayout]:
    return [build_kernel(group, cfg.kernel_radius(level)) for level in range(cfg.levels)]


def build_pyramid(positions: np.ndarray, cfg: NetConfig, layouts: list[KernelLayout],
                  dtype: Optional[torch.dtype] = None) -> Pyramid:
    """Subsample level by level and precompute every convolution and upsampling geometry.

    Level 0 is the input cloud itself. ``fps`` subsampling selects points by
    pairwise distances only, so it commutes exactly with rotations; ``grid``
    subsampling does not.
    """
    levels = [np.asarray(positions, dtype=np.float64)]
    for level in range(1, cfg.levels):
        prev = levels[-1]
        if cfg.subsample == "grid":
            nxt = grid_subsample(PointCloud(prev), cfg.cell(level)).positions
        else:
            nxt = prev[farthest_point_indices(prev, max(1, len(prev) // cfg.fps_ratio))]
        levels.append(nxt)
    conv = [conv_geometry(p, p, layouts[i], dtype=dtype) for i, p in enumerate(levels)]
    down = [conv_geometry(levels[i - 1], levels[i], layouts[i], dtype=dtype) for i in range(1, len(levels))]
    up = [nearest_indices(levels[i + 1], levels[i]) for i in range(len(levels) - 1)]
    return Pyramid(levels, conv, down, up)


class GroupBlock(nn.Module):
    """Spatial group convolution, anchor mixing, normalization, activation."""

    def __init__(self, c_in: int, c_out: int, layout: KernelLayout, residual: bool = False):
        super().__init__()
        self.conv = GroupConv(c_in, c_out, layout)
        self.mix = AnchorMix(layout.group_order, c_out, c_out)
        self.norm = ChannelNorm(c_out)
        self.residual = residual and c_in == c_out

    def forward(self, x: torch.Tensor, geom: ConvGeometry) -> torch.Tensor:
        y = leaky_relu(self.norm(self.mix(self.conv(x, geom))))
        return x + y if self.residual else y


class UpBlock(nn.Module):
    def __init__(self, c_coarse: int, c_skip: int, c_out: int):
        super().__init__()
        self.lin = PointwiseLinear(c_coarse + c_skip, c_out)
        self.norm = ChannelNorm(c_out)

    def forward(self, coarse: torch.Tensor, skip: torch.Tensor, index: np.ndarray) -> torch.Tensor:
        up = nn_upsample(coarse, index)
        return leaky_relu(self.norm(self.lin(torch.cat([up, skip], dim=-1))))


class Backbone(nn.Module):
    """U-shaped equivariant encoder/decoder producing an ``(m, n, width)`` map on level 0."""

    def __init__(self, cfg: NetConfig, layouts: list[KernelLayout], in_channels: int):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.lift = LiftConv(in_channels, widths[0], layouts[0])
        self.lift_norm = ChannelNorm(widths[0])
        self.blocks = nn.ModuleList([GroupBlock(w, w, layouts[i], residual=True) for i, w in enumerate(widths)])
        self.downs = nn.ModuleList([GroupBlock(widths[i - 1], widths[i], layouts[i]) for i in range(1, cfg.levels)])
        self.ups = nn.ModuleList([UpBlock(widths[i + 1], widths[i], widths[i]) for i in range(cfg.levels - 1)])

    def forward(self, features: torch.Tensor, pyr: Pyramid) -> torch.Tensor:
        x = leaky_relu(self.lift_norm(self.lift(features, pyr.conv[0])))
        x = self.blocks[0](x, pyr.conv[0])
        skips = [x]
        for level in range(1, self.cfg.levels):
            x = self.downs[level - 1](x, pyr.down[level - 1])
            x = self.blocks[level](x, pyr.conv[level])
            skips.append(x)
        for level in range(self.cfg.levels - 2, -1, -1):
            x = self.ups[level](x, skips[level], pyr.up[level])
        return x


def input_features(cloud: PointCloud, num_frames: int, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Rotation-invariant per-point inputs: constant, height, normalized frame offset."""
    t = cloud.time_index.astype(np.float64) / max(num_frames - 1, 1)
    feats = np.stack([np.ones(len(cloud)), cloud.positions[:, 2], t], 1)
    return torch.from_numpy(feats).to(dtype or torch.get_default_dtype())


IN_CHANNELS = 3


class PanopticNet(nn.Module):
    def __init__(self, cfg: NetConfig, head_cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.head_cfg = head_cfg
        self.group = make_group(cfg.n)
        self.layouts = layouts_for(cfg, self.group)
        self.backbone = Backbone(cfg, self.layouts, IN_CHANNELS)
        plain = make_group(cfg.rhead_anchors) if cfg.rhead_anchors else None
        self.heads = PanopticHeads(cfg.width, cfg.num_classes, self.group, head_cfg, plain_anchors=plain)

    @property
    def offset_group(self) -> CyclicGroup:
        return self.heads.offset_group

    def pyramid(self, positions: np.ndarray, dtype: Optional[torch.dtype] = None) -> Pyramid:
        return build_pyramid(positions, self.cfg, self.layouts, dtype)

    def forward(self, cloud: PointCloud, pyr: Optional[Pyramid] = None, rcs_labels=None) -> dict[str, torch.Tensor]:
        dtype = next(self.parameters()).dtype
        pyr = pyr or self.pyramid(cloud.positions, dtype)
        feats = self.backbone(input_features(cloud, self.cfg.num_frames, dtype), pyr)
        out = self.heads(feats, rcs_labels)
        out["features"] = feats
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
