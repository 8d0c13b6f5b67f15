"""Analytic parameter and feature-size accounting at a fixed feature budget ``K = c * n``.

Memory is counted in feature-map elements, not bytes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from eq4d.errors import InvalidArgument
from eq4d.kernel import ring_size

SCALING_COLUMNS = ("n", "c", "k", "conv_params", "feature_elems_per_1000")


def kernel_size_for(n: int) -> int:
    """Kernel points used for group order ``n``: a center, two axial points, two rings."""
    return 3 + 2 * ring_size(n)


def conv_params(k: int, n: int, c_in: int, c_out: int) -> int:
    if min(k, n, c_in, c_out) < 1:
        raise InvalidArgument("conv_params arguments must be positive")
    return k * n * c_in * c_out


def feature_elems(m: int, c: int, n: int) -> int:
    if min(m, c, n) < 1:
        raise InvalidArgument("feature_elems arguments must be positive")
    return m * c * n


@dataclass(frozen=True)
class ScalingRow:
    n: int
    c: int
    k: int
    conv_params: int
    feature_elems_per_1000: int

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n, self.c, self.k, self.conv_params, self.feature_elems_per_1000)


def scaling_table(K: int, orders: Sequence[int] = (1, 2, 3, 4, 6)) -> list[ScalingRow]:
    """One row per group order with ``c = floor(K / n)``."""
    rows = []
    for n in orders:
        c = K // n
        if c < 1:
            raise InvalidArgument(f"K={K} leaves no channels for n={n}")
        k = kernel_size_for(n)
        rows.append(ScalingRow(n, c, k, conv_params(k, n, c, c), feature_elems(1000, c, n)))
    return rows


def below_baseline(rows: Iterable[ScalingRow]) -> bool:
    """Whether every ``n > 1`` row needs fewer conv parameters than the ``n = 1`` row."""
    rows = list(rows)
    base = [r for r in rows if r.n == 1]
    if not base:
        raise InvalidArgument("table has no n = 1 row")
    return all(r.conv_params < base[0].conv_params for r in rows if r.n > 1)


def table_csv(rows: Sequence[ScalingRow], config_hash: str = "") -> str:
    """CSV with a header, one row per order, and a ``# below_baseline=`` footer."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("config_hash",) + SCALING_COLUMNS)
    for r in rows:
        w.writerow((config_hash,) + r.as_tuple())
    buf.write(f"# below_baseline={str(below_baseline(rows)).lower()}\n")
    return buf.getvalue()


@dataclass
class ModelSizeReport:
    """Per-layer parameter counts and the largest feature map of a concrete network."""

    layers: dict[str, int]
    total: int
    peak_feature_elems: int
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if sum(self.layers.values()) != self.total:
            raise InvalidArgument("layer counts do not sum to the total")


def model_size(model, sizes: Sequence[int]) -> ModelSizeReport:
    """Count parameters by top-level submodule path and the peak ``m * c * n`` over levels."""
    layers: dict[str, int] = {}
    for name, p in model.named_parameters():
        layers[name] = p.numel()
    cfg = model.cfg
    peak = max(feature_elems(m, c, cfg.n) for m, c in zip(sizes, cfg.widths()))
    return ModelSizeReport(layers, sum(layers.values()), peak,
                           {"n": cfg.n, "widths": cfg.widths(), "points": list(sizes)})
