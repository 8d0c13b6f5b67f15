"""Desk-scale comparison runs: equivariant vs. plain backbones, and pooling variants.

Every variant in a comparison shares the dataset, the feature budget
``K = n * width``, the epoch count, and the batch size, so all of them take
the same number of optimizer steps.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from eq4d.config import RunConfig, build_config
from eq4d.errors import InvalidConfig
from eq4d.training import PyramidCache, SceneData, train

EXPERIMENT_COLUMNS = ("config_hash", "variant", "seed", "params", "lstq", "s_assoc", "s_cls", "pq", "seconds")


def trend_variants(cfg: RunConfig, n: int = 4) -> dict[str, RunConfig]:
    """Equivariant ``C_n`` model, plain baseline, and rotation head on the plain backbone."""
    K = cfg.net.n * cfg.net.width
    if K % n:
        raise InvalidConfig(f"feature budget {K} is not divisible by n={n}")
    base = cfg.to_dict()
    return {
        "equivariant": build_config(base, [f"net.n={n}", f"net.width={K // n}", "net.rhead_anchors=0"]),
        "baseline": build_config(base, ["net.n=1", f"net.width={K}", "net.rhead_anchors=0"]),
        "rhead_plain": build_config(base, ["net.n=1", f"net.width={K}", f"net.rhead_anchors={n}"]),
    }


def pooling_variants(cfg: RunConfig) -> dict[str, RunConfig]:
    base = cfg.to_dict()
    return {mode: build_config(base, [f"heads.invariant_pool_mode={mode}"])
            for mode in ("max", "avg", "attentive", "rcs")}


@dataclass
class RunRow:
    config_hash: str
    variant: str
    seed: int
    params: int
    lstq: float
    s_assoc: float
    s_cls: float
    pq: float
    seconds: float


@dataclass
class ExperimentResult:
    rows: list[RunRow] = field(default_factory=list)

    def median(self, variant: str, metric: str = "s_assoc") -> float:
        return statistics.median(getattr(r, metric) for r in self.rows if r.variant == variant)

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EXPERIMENT_COLUMNS)
        for r in self.rows:
            w.writerow([r.config_hash, r.variant, r.seed, r.params, repr(r.lstq), repr(r.s_assoc),
                        repr(r.s_cls), repr(r.pq), f"{r.seconds:.1f}"])
        return buf.getvalue()


def trend_holds(result: ExperimentResult) -> dict[str, bool]:
    """The two directional checks on median validation association quality."""
    eq = result.median("equivariant")
    return {
        "equivariant_at_least_baseline": eq >= result.median("baseline"),
        "rhead_plain_at_most_equivariant": result.median("rhead_plain") <= eq,
    }


def run_variants(
    variants: dict[str, RunConfig],
    seeds: Sequence[int],
    train_scenes: list[SceneData],
    val_scenes: list[SceneData],
    cache: Optional[PyramidCache] = None,
    progress: Optional[Callable[[RunRow], None]] = None,
) -> ExperimentResult:
    """Train each variant once per seed and record its final validation metrics."""
    cache = cache or PyramidCache()
    result = ExperimentResult()
    for name, cfg in variants.items():
        for seed in seeds:
            run_cfg = build_config(cfg.to_dict(), [f"train.seed={seed}", "eval.eval_every=0"])
            t0 = time.perf_counter()
            out = train(run_cfg, cache=cache, train_scenes=train_scenes, val_scenes=val_scenes)
            rep = out.report
            row = RunRow(run_cfg.config_hash(), name, seed, out.model.num_parameters(),
                         rep.lstq, rep.s_assoc, rep.s_cls, rep.pq, time.perf_counter() - t0)
            result.rows.append(row)
            if progress is not None:
                progress(row)
    return result
