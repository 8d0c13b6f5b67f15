"""Equivariance audit: rotate the input by every anchor and compare against transported outputs.

For an equivariant layer ``f`` and anchor ``j`` the residual is
``max |f(R_j x, T_j h) - T_j f(x, h)|`` where ``T_j`` rolls the anchor axis.
Invariant outputs (pooling, semantic and centerness heads) are compared
without transport, and decoded offsets are compared after rotating by ``R_j``.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from eq4d.diffcore import torch_dtype
from eq4d.group import CyclicGroup, make_group
from eq4d.heads import HeadConfig, PanopticHeads
from eq4d.kernel import KernelLayout, build_kernel
from eq4d.layers import (
    AnchorMix,
    GroupConv,
    InvariantPool,
    LiftConv,
    PointwiseLinear,
    conv_geometry,
    nearest_indices,
    nn_upsample,
    transport,
)
from eq4d.model import IN_CHANNELS, Backbone, NetConfig, PanopticNet, build_pyramid, farthest_point_indices
from eq4d.pointcloud import PointCloud

TOLERANCE = {"f32": 1e-5, "f64": 1e-10}
SCORE_MARGIN = {"f32": 1e-3, "f64": 1e-8}
AUDIT_COLUMNS = ("config_hash", "layer", "n", "anchor", "precision", "clouds", "max_residual", "tolerance", "ok")
LAYERS = (
    "lift_conv", "group_conv", "anchor_mix", "pointwise_linear", "nn_upsample", "encoder_decoder",
    "pool_max", "pool_avg", "pool_attentive", "semantic_head", "centerness_head", "offset_head",
)
CHANNELS = 4
KERNEL_RADIUS = 1.0
EXTENT = 2.0


@dataclass
class AuditRow:
    layer: str
    n: int
    anchor: int
    precision: str
    clouds: int
    max_residual: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_residual < self.tolerance


@dataclass
class AuditResult:
    rows: list[AuditRow]
    seconds: float

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def worst(self, layer: Optional[str] = None) -> float:
        vals = [r.max_residual for r in self.rows if layer is None or r.layer == layer]
        return max(vals, default=0.0)

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for r in self.rows:
            w.writerow([config_hash, r.layer, r.n, r.anchor, r.precision, r.clouds,
                        repr(r.max_residual), repr(r.tolerance), str(r.ok).lower()])
        return buf.getvalue()


def corrupt_permutations(layout: KernelLayout) -> KernelLayout:
    """Negative control: swap two entries of the first non-identity permutation."""
    perms = np.array(layout.permutations)
    if layout.group_order > 1:
        row = perms[1]
        a, b = len(row) - 1, len(row) - 2
        row[a], row[b] = row[b], row[a]
    perms.setflags(write=False)
    return replace(layout, permutations=perms)


def _max_abs(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max()) if a.numel() else 0.0


class _Probe:
    """Everything built for one (cloud, n) pair, reused across anchors."""

    def __init__(self, pos: np.ndarray, group: CyclicGroup, dtype: torch.dtype, seed: int, corrupt: bool):
        self.pos = pos
        self.group = group
        self.dtype = dtype
        n, c = group.n, CHANNELS
        layout = build_kernel(group, KERNEL_RADIUS)
        self.layout = corrupt_permutations(layout) if corrupt else layout
        self.coarse = farthest_point_indices(pos, max(1, len(pos) // 4))
        gen = torch.Generator().manual_seed(seed)
        self.plain = torch.randn(len(pos), IN_CHANNELS, generator=gen, dtype=torch.float64).to(dtype)
        self.feats = torch.randn(len(pos), n, c, generator=gen, dtype=torch.float64).to(dtype)
        self.coarse_feats = torch.randn(len(self.coarse), n, c, generator=gen, dtype=torch.float64).to(dtype)
        torch.manual_seed(seed)
        self.lift = LiftConv(IN_CHANNELS, c, self.layout).to(dtype)
        self.gconv = GroupConv(c, c, self.layout).to(dtype)
        self.mix = AnchorMix(n, c, c).to(dtype)
        self.lin = PointwiseLinear(c, c).to(dtype)
        self.pools = {m: InvariantPool(c, m).to(dtype) for m in ("max", "avg", "attentive")}
        self.heads = PanopticHeads(c, 4, group, HeadConfig(invariant_pool_mode="attentive")).to(dtype)
        self.net_cfg = NetConfig(n=n, width=c, levels=2, first_cell=KERNEL_RADIUS / 2, subsample="fps")
        layouts = [build_kernel(group, self.net_cfg.kernel_radius(l)) for l in range(self.net_cfg.levels)]
        if corrupt:
            layouts = [corrupt_permutations(l) for l in layouts]
        self.net_layouts = layouts
        self.backbone = Backbone(self.net_cfg, layouts, IN_CHANNELS).to(dtype)
        self.base = self.outputs(0)

    @torch.no_grad()
    def outputs(self, j: int) -> dict[str, torch.Tensor]:
        R = self.group.matrices[j]
        pos = self.pos @ R.T
        feats = transport(self.feats, j)
        coarse_feats = transport(self.coarse_feats, j)
        geom = conv_geometry(pos, pos, self.layout, dtype=self.dtype)
        up = nearest_indices(pos[self.coarse], pos)
        pyr = build_pyramid(pos, self.net_cfg, self.net_layouts, self.dtype)
        heads = self.heads(feats)
        _, offsets = self.heads.predict_offsets(heads)
        out = {
            "lift_conv": self.lift(self.plain, geom),
            "group_conv": self.gconv(feats, geom),
            "anchor_mix": self.mix(feats),
            "pointwise_linear": self.lin(feats),
            "nn_upsample": nn_upsample(coarse_feats, up),
            "encoder_decoder": self.backbone(self.plain, pyr),
            "semantic_head": heads["logits"],
            "centerness_head": heads["centerness"],
            "offset_head": offsets,
        }
        for mode, pool in self.pools.items():
            out[f"pool_{mode}"] = pool(feats)
        return out

    def residuals(self, j: int) -> dict[str, float]:
        got = self.outputs(j)
        R = torch.tensor(self.group.matrices[j], dtype=self.dtype)
        res = {}
        for name, value in got.items():
            ref = self.base[name]
            if name == "offset_head":
                ref = ref @ R.T
            elif ref.dim() == 3:
                ref = transport(ref, j)
            res[name] = _max_abs(value, ref)
        return res


def random_cloud(rng: np.random.Generator, max_points: int) -> np.ndarray:
    m = int(rng.integers(max(2, max_points // 8), max_points + 1))
    return rng.uniform(-EXTENT, EXTENT, size=(m, 3))


def audit_layers(
    orders: Sequence[int] = (2, 3, 4, 6),
    clouds: int = 50,
    max_points: int = 512,
    precision: str = "f64",
    seed: int = 0,
    corrupt: bool = False,
    progress: Optional[Callable[[int], None]] = None,
) -> AuditResult:
    """Worst residual per (layer, n, anchor) over ``clouds`` random clouds."""
    t0 = time.perf_counter()
    dtype = torch_dtype(precision)
    tol = TOLERANCE[precision]
    rng = np.random.Generator(np.random.Philox(seed))
    worst: dict[tuple[str, int, int], float] = {}
    for ci in range(clouds):
        pos = random_cloud(rng, max_points)
        for n in orders:
            group = make_group(n)
            probe = _Probe(pos, group, dtype, seed * 1000 + ci, corrupt)
            for j in range(n):
                res = probe.residuals(j) if j else {name: 0.0 for name in LAYERS}
                for name, r in res.items():
                    key = (name, n, j)
                    worst[key] = max(worst.get(key, 0.0), r)
        if progress is not None:
            progress(ci)
    rows = [AuditRow(name, n, j, precision, clouds, worst[(name, n, j)], tol)
            for name in LAYERS for n in orders for j in range(n)]
    return AuditResult(rows, time.perf_counter() - t0)


def audit_model(model: PanopticNet, clouds: int = 5, max_points: int = 512, seed: int = 0) -> AuditResult:
    """Whole-network audit of a (possibly trained) model on random clouds.

    Grid subsampling is not rotation-equivariant, so the pyramids here always
    use farthest-point subsampling with the model's radii.
    """
    t0 = time.perf_counter()
    dtype = next(model.parameters()).dtype
    precision = "f64" if dtype == torch.float64 else "f32"
    tol = TOLERANCE[precision]
    group = model.group
    cfg = replace(model.cfg, subsample="fps")
    rng = np.random.Generator(np.random.Philox(seed))
    worst: dict[tuple[str, int], float] = {}
    model.eval()
    for _ in range(clouds):
        pos = random_cloud(rng, max_points)
        time_index = rng.integers(0, model.cfg.num_frames, size=len(pos))

        @torch.no_grad()
        def run(j):
            p = pos @ group.matrices[j].T
            cloud = PointCloud(p, time_index=time_index)
            out = model(cloud, build_pyramid(p, cfg, model.layouts, dtype))
            _, off = model.heads.predict_offsets(out)
            return {"features": out["features"], "logits": out["logits"],
                    "centerness": out["centerness"], "offsets": off, "scores": out["scores"]}

        base = run(0)
        # Near-tied rotation scores may legitimately pick another anchor; skip those points.
        top = base.pop("scores").topk(min(2, base["features"].shape[1]), dim=1).values
        clear = (top[:, 0] - top[:, -1] > SCORE_MARGIN[precision]) if top.shape[1] > 1 else torch.ones(len(top), dtype=torch.bool)
        for j in range(group.n):
            got = run(j) if j else dict(base)
            got.pop("scores", None)
            R = torch.tensor(group.matrices[j], dtype=dtype)
            for name, value in got.items():
                ref = base[name]
                if name == "offsets":
                    ref, value = ref[clear] @ R.T, value[clear]
                elif name == "features":
                    ref = transport(ref, j)
                key = (f"network_{name}", j)
                worst[key] = max(worst.get(key, 0.0), _max_abs(value, ref))
    rows = [AuditRow(name, group.n, j, precision, clouds, r, tol) for (name, j), r in worst.items()]
    return AuditResult(rows, time.perf_counter() - t0)
