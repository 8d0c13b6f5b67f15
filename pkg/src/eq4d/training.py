"""Dataset generation, training, and evaluation pipelines.

Everything here is deterministic in single-threaded mode: scene content is
keyed by per-scene seeds, shuffling by ``(seed, epoch)``, and model
initialization by ``train.seed``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from eq4d.config import RunConfig, build_config
from eq4d.diffcore import (
    backward,
    load_checkpoint,
    make_optimizer,
    read_arrays,
    save_checkpoint,
    single_threaded,
    step,
    torch_dtype,
    unpack_json,
)
from eq4d.errors import InvalidArgument, SchemaError
from eq4d.heads import total_loss
from eq4d.metrics import Evaluator, MetricReport
from eq4d.model import PanopticNet, Pyramid
from eq4d.panoptic import PanopticPrediction, assemble_prediction, associate_windows
from eq4d.pointcloud import PointCloud, decode_labels, stack_frames
from eq4d.scenegen import (
    CLASS_NAMES,
    DEFAULT_SIGMA_C,
    THING_CLASSES,
    generate_sequence,
    offset_targets,
    read_scene,
    write_scene,
)

VAL_SEED_OFFSET = 1_000_000
SPLITS = ("train", "val")
LOG_COLUMNS = ("config_hash", "epoch", "loss", "sem", "off", "rot", "ctr", "val_lstq", "val_s_assoc", "val_s_cls", "val_pq")


# --- dataset ------------------------------------------------------------------------

def scene_seed(base: int, split: str, index: int) -> int:
    return base + (VAL_SEED_OFFSET if split == "val" else 0) + index


def generate_dataset(cfg: RunConfig, root: Optional[Path] = None) -> Path:
    """Write train/val splits in SemanticKITTI layout plus ``manifest.json``."""
    root = Path(root or cfg.data.root)
    base = cfg.data.scene.seed
    manifest = {"generator_seed": base, "scene": cfg.data.scene.to_dict(), "splits": {}}
    for split, count in (("train", cfg.data.num_train), ("val", cfg.data.num_val)):
        entries = []
        for i in range(count):
            spec = replace(cfg.data.scene, seed=scene_seed(base, split, i))
            write_scene(root / split, i, generate_sequence(spec))
            entries.append({"sequence": f"{i:04d}", "seed": spec.seed})
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


@dataclass
class SceneData:
    key: str
    frames: list[PointCloud]
    poses: list[np.ndarray]
    sigma_c: float = DEFAULT_SIGMA_C


def load_split(root: Path, split: str, limit: int = 0) -> list[SceneData]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    entries = json.loads(manifest_path.read_text())["splits"].get(split, [])
    if limit:
        entries = entries[:limit]
    scenes = []
    for e in entries:
        frames, poses, meta = read_scene(root / split, int(e["sequence"]))
        scenes.append(SceneData(f"{split}/{e['sequence']}", frames, poses, meta.get("sigma_c", DEFAULT_SIGMA_C)))
    return scenes


def windows(num_frames: int, window_frames: int) -> list[tuple[int, int]]:
    """``[start, stop)`` frame ranges; consecutive windows share exactly one frame."""
    w = window_frames or num_frames
    if w >= num_frames:
        return [(0, num_frames)]
    if w < 2:
        raise InvalidArgument("sliding windows need at least two frames to share one")
    out, s = [], 0
    while True:
        out.append((s, min(s + w, num_frames)))
        if s + w >= num_frames:
            return out
        s += w - 1


def stack_window(scene: SceneData, start: int, stop: int) -> PointCloud:
    """Frames ``start..stop-1`` in the coordinates of frame ``start``."""
    ref = np.linalg.inv(scene.poses[start])
    rel = [ref @ scene.poses[t] for t in range(start, stop)]
    return stack_frames(scene.frames[start:stop], rel)


@dataclass
class Sample:
    cloud: PointCloud
    pyramid: Pyramid
    targets: dict


class PyramidCache:
    """Memoizes pyramids by window and kernel geometry, so runs sharing geometry share work."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key: str, cloud: PointCloud, model: PanopticNet, dtype: torch.dtype) -> Pyramid:
        cfg = model.cfg
        geom = (cfg.levels, cfg.first_cell, cfg.kernel_scale, cfg.subsample, cfg.fps_ratio,
                tuple(l.points.tobytes() for l in model.layouts), str(dtype))
        full = (key, geom)
        if full not in self._store:
            self._store[full] = model.pyramid(cloud.positions, dtype)
        return self._store[full]


def make_targets(cloud: PointCloud, model: PanopticNet, sigma_c: float, dtype: torch.dtype) -> dict:
    gt = offset_targets(cloud, model.offset_group, sigma_c)
    return {
        "offsets": torch.from_numpy(gt.offsets).to(dtype),
        "labels": torch.from_numpy(gt.rotation_label),
        "degenerate": torch.from_numpy(gt.degenerate),
        "thing_mask": torch.from_numpy(gt.thing_mask),
        "semantic": torch.from_numpy(gt.semantic),
        "centerness": torch.from_numpy(gt.centerness).to(dtype),
    }


def prepare_samples(scenes: Sequence[SceneData], model: PanopticNet, window_frames: int,
                    dtype: torch.dtype, cache: Optional[PyramidCache] = None) -> list[Sample]:
    cache = cache or PyramidCache()
    out = []
    for scene in scenes:
        for start, stop in windows(len(scene.frames), window_frames):
            cloud = stack_window(scene, start, stop)
            pyr = cache.get(f"{scene.key}@{start}:{stop}", cloud, model, dtype)
            out.append(Sample(cloud, pyr, make_targets(cloud, model, scene.sigma_c, dtype)))
    return out


# --- training --------------------------------------------------------------------------

def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(count)


def build_model(cfg: RunConfig) -> PanopticNet:
    torch.manual_seed(cfg.train.seed)
    model = PanopticNet(cfg.net, cfg.heads)
    return model.to(torch_dtype(cfg.precision))


def sample_loss(model: PanopticNet, sample: Sample) -> dict[str, torch.Tensor]:
    rcs = None
    if model.head_cfg.invariant_pool_mode == "rcs":
        rcs = (sample.targets["labels"], ~sample.targets["degenerate"])
    out = model(sample.cloud, sample.pyramid, rcs_labels=rcs)
    return model.heads.losses(out, sample.targets)


@dataclass
class TrainResult:
    model: PanopticNet
    log: list[dict]
    report: Optional[MetricReport]


def _log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def train(cfg: RunConfig, out_dir: Optional[Path] = None, resume: bool = False,
          cache: Optional[PyramidCache] = None, train_scenes: Optional[list[SceneData]] = None,
          val_scenes: Optional[list[SceneData]] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train for ``cfg.train.epochs`` epochs; with ``out_dir`` set, checkpoint and log every epoch.

    Resuming from ``out_dir/last.ckpt`` continues the same trajectory bit for bit
    (single-threaded); a checkpoint written under a different configuration is
    rejected with :class:`SchemaError`.
    """
    single_threaded()
    dtype = torch_dtype(cfg.precision)
    cache = cache or PyramidCache()
    if train_scenes is None:
        train_scenes = load_split(Path(cfg.data.root), "train")
    if val_scenes is None:
        val_scenes = load_split(Path(cfg.data.root), "val", cfg.eval.max_scenes)
    model = build_model(cfg)
    opt = make_optimizer(model.parameters(), cfg.train)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / "last.ckpt" if out_dir is not None else None
    log: list[dict] = []
    start = 0
    if resume and ckpt is not None and ckpt.exists():
        meta = load_checkpoint(ckpt, model, opt)
        if meta.get("training_hash") != cfg.training_hash():
            raise SchemaError("checkpoint was written under a different training configuration")
        start = int(meta["epoch"])
        log = list(meta.get("log", []))

    samples = prepare_samples(train_scenes, model, cfg.eval.window_frames, dtype, cache)
    weights = cfg.heads.weights
    report = None
    for epoch in range(start, cfg.train.epochs):
        model.train()
        sums: dict[str, float] = {}
        order = epoch_order(cfg.train.seed, epoch, len(samples))
        bs = cfg.train.batch_size
        for b in range(0, len(order), bs):
            opt.zero_grad(set_to_none=True)
            batch = order[b:b + bs]
            loss = None
            for i in batch:
                parts = sample_loss(model, samples[int(i)])
                term = total_loss(parts, weights) / len(batch)
                loss = term if loss is None else loss + term
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach())
                sums["loss"] = sums.get("loss", 0.0) + float(total_loss(parts, weights).detach())
            backward(loss)
            step(opt)
        row = {"config_hash": cfg.training_hash(), "epoch": epoch + 1}
        for k in ("loss", "sem", "off", "rot", "ctr"):
            row[k] = sums.get(k, 0.0) / max(len(samples), 1)
        last = epoch + 1 == cfg.train.epochs
        every = cfg.eval.eval_every
        if val_scenes and (last or (every and (epoch + 1) % every == 0)):
            report = evaluate(model, val_scenes, cfg, cache)
            row.update(val_lstq=report.lstq, val_s_assoc=report.s_assoc, val_s_cls=report.s_cls, val_pq=report.pq)
        log.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            meta = {"epoch": epoch + 1, "training_hash": cfg.training_hash(), "config": cfg.to_dict(), "log": log}
            save_checkpoint(ckpt, model, opt, meta)
            (out_dir / "train_log.csv").write_text(_log_csv(log))
    if report is None and val_scenes and start >= cfg.train.epochs:
        report = evaluate(model, val_scenes, cfg, cache)
    return TrainResult(model, log, report)


# --- evaluation --------------------------------------------------------------------------

@dataclass
class SequencePrediction:
    prediction: PanopticPrediction
    frame_index: np.ndarray
    gt_semantic: np.ndarray
    gt_instance: np.ndarray


@torch.no_grad()
def predict_window(model: PanopticNet, cloud: PointCloud, pyr: Pyramid, cfg: RunConfig, window: int) -> PanopticPrediction:
    model.eval()
    out = model(cloud, pyr)
    _, offsets = model.heads.predict_offsets(out)
    return assemble_prediction(
        cloud.positions, out["logits"].double().numpy(), offsets.double().numpy(), THING_CLASSES,
        cfg.cluster, centerness=out["centerness"].double().numpy(), window=window,
    )


def predict_sequence(model: PanopticNet, scene: SceneData, cfg: RunConfig,
                     cache: Optional[PyramidCache] = None) -> SequencePrediction:
    """Predict every window, stitch instance ids across shared frames, keep each frame's first prediction."""
    cache = cache or PyramidCache()
    dtype = next(model.parameters()).dtype
    sizes = [len(f) for f in scene.frames]
    frame_start = np.concatenate([[0], np.cumsum(sizes)])
    sem = np.zeros(frame_start[-1], dtype=np.int64)
    inst = np.zeros(frame_start[-1], dtype=np.int64)
    prev: Optional[PanopticPrediction] = None
    prev_range = None
    next_free = 1
    for w, (start, stop) in enumerate(windows(len(scene.frames), cfg.eval.window_frames)):
        cloud = stack_window(scene, start, stop)
        pyr = cache.get(f"{scene.key}@{start}:{stop}", cloud, model, dtype)
        pred = predict_window(model, cloud, pyr, cfg, w)
        local_start = np.concatenate([[0], np.cumsum(sizes[start:stop])])
        if prev is None:
            pred = PanopticPrediction(pred.semantic, pred.instance, w)
            next_free = int(pred.instance.max(initial=0)) + 1
        else:
            shared = start  # first frame of this window is the last frame of the previous one
            p0 = int(np.sum(sizes[prev_range[0]:shared]))
            prev_idx = np.arange(p0, p0 + sizes[shared])
            next_idx = np.arange(0, sizes[shared])
            pred, next_free = associate_windows(prev, pred, prev_idx, next_idx, next_free)
        first_new = start if prev is None else start + 1
        for t in range(first_new, stop):
            a, b = local_start[t - start], local_start[t - start + 1]
            sem[frame_start[t]:frame_start[t + 1]] = pred.semantic[a:b]
            inst[frame_start[t]:frame_start[t + 1]] = pred.instance[a:b]
        prev, prev_range = pred, (start, stop)
    frame_index = np.concatenate([np.full(s, t, dtype=np.int64) for t, s in enumerate(sizes)])
    gt_sem = np.concatenate([f.semantic for f in scene.frames])
    gt_inst = np.concatenate([f.instance for f in scene.frames])
    return SequencePrediction(PanopticPrediction(sem, inst), frame_index, gt_sem, gt_inst)


def evaluate(model: PanopticNet, scenes: Sequence[SceneData], cfg: RunConfig,
             cache: Optional[PyramidCache] = None, write_to: Optional[Path] = None) -> MetricReport:
    """Run the full pipeline on ``scenes`` and score it; optionally write label binaries."""
    if cfg.net.num_classes != len(CLASS_NAMES):
        raise SchemaError(f"model predicts {cfg.net.num_classes} classes, data has {len(CLASS_NAMES)}")
    ev = Evaluator(sorted(CLASS_NAMES), THING_CLASSES)
    for scene in scenes:
        sp = predict_sequence(model, scene, cfg, cache)
        ev.add(sp.prediction.semantic, sp.prediction.instance, sp.gt_semantic, sp.gt_instance)
        if write_to is not None:
            d = Path(write_to) / "sequences" / scene.key.split("/")[-1] / "predictions"
            d.mkdir(parents=True, exist_ok=True)
            for t, data in enumerate(sp.prediction.label_bytes(sp.frame_index)):
                (d / f"{t:06d}.label").write_bytes(data)
    return ev.report()


def load_trained(path: Path, overrides: Sequence[str] = ()) -> tuple[RunConfig, PanopticNet]:
    """Rebuild the run configuration stored in a checkpoint and load its weights.

    ``overrides`` may change evaluation settings (paths, clustering, windows);
    changes that alter the architecture are caught by the weight-shape check.
    """
    arrays = read_arrays(Path(path).read_bytes())
    if "__meta__" not in arrays:
        raise SchemaError(f"{path} carries no run configuration")
    meta = unpack_json(arrays["__meta__"])
    cfg = build_config(meta.get("config", {}), overrides)
    model = build_model(cfg)
    load_checkpoint(path, model)
    return cfg, model


def read_label_dir(root: Path, scene: SceneData) -> PanopticPrediction:
    """Stacked prediction for one sequence from per-frame ``.label`` files."""
    d = Path(root) / "sequences" / scene.key.split("/")[-1]
    d = d / "predictions" if (d / "predictions").is_dir() else d / "labels"
    sem, inst = [], []
    for t, frame in enumerate(scene.frames):
        s, i = decode_labels((d / f"{t:06d}.label").read_bytes(), len(frame))
        sem.append(s)
        inst.append(i)
    return PanopticPrediction(np.concatenate(sem), np.concatenate(inst))


def evaluate_labels(pred_root: Path, scenes: Sequence[SceneData]) -> MetricReport:
    """Score label files already on disk (e.g. the ground truth itself) against ``scenes``."""
    ev = Evaluator(sorted(CLASS_NAMES), THING_CLASSES)
    for scene in scenes:
        pred = read_label_dir(pred_root, scene)
        gt_sem = np.concatenate([f.semantic for f in scene.frames])
        gt_inst = np.concatenate([f.instance for f in scene.frames])
        ev.add(pred.semantic, pred.instance, gt_sem, gt_inst)
    return ev.report()
