"""Deterministic synthetic 4D driving scenes with panoptic ground truth.

Randomness comes exclusively from numpy's Philox-4x64 counter-based generator
keyed by the scene seed (``numpy.random.Generator(numpy.random.Philox(seed))``),
so a scene is a pure function of its :class:`SceneSpec`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from eq4d.errors import InvalidConfig
from eq4d.group import CyclicGroup, anchors_of_vectors, make_group, rotation_z
from eq4d.pointcloud import PointCloud, load_scan, stack_frames, transform_points, write_semantic_kitti

CLASS_NAMES = {0: "ground", 1: "wall", 2: "vehicle", 3: "pedestrian"}
STUFF_CLASSES = (0, 1)
THING_CLASSES = (2, 3)
SHAPE_OF_CLASS = {2: "box", 3: "cylinder"}
FOOTPRINT = {"box": 2.4, "cylinder": 0.45}

DEFAULT_SIGMA_C = 1.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_objects: int = 8
    object_classes: tuple[int, ...] = THING_CLASSES
    extent: float = 12.0
    frames: int = 3
    points_per_object: int = 80
    points_ground: int = 450
    num_walls: int = 2
    points_per_wall: int = 120
    max_speed: float = 1.0
    max_yaw_rate: float = 0.15
    ego_speed: float = 0.8
    noise: float = 0.02
    object_margin: float = 0.4

    def __post_init__(self):
        if self.extent <= 0:
            raise InvalidConfig("extent must be positive")
        counts = (self.num_objects, self.frames, self.points_per_object, self.points_ground,
                  self.num_walls, self.points_per_wall)
        if min(counts) < 0 or self.frames < 1:
            raise InvalidConfig("counts must be non-negative and frames >= 1")
        bad = set(self.object_classes) - set(SHAPE_OF_CLASS)
        if bad:
            raise InvalidConfig(f"no shape defined for classes {sorted(bad)}")
        object.__setattr__(self, "object_classes", tuple(self.object_classes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_classes"] = list(self.object_classes)
        return d


@dataclass
class GroundTruthFields:
    semantic: np.ndarray
    instance: np.ndarray
    offsets: np.ndarray
    centers: np.ndarray
    centerness: np.ndarray
    rotation_label: np.ndarray
    degenerate: np.ndarray

    @property
    def thing_mask(self) -> np.ndarray:
        return self.instance > 0


@dataclass
class Scene:
    spec: SceneSpec
    frames: list[PointCloud]
    poses: list[np.ndarray]
    stacked: PointCloud
    fields: GroundTruthFields


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _box_surface(rng, dims, count):
    """Uniform samples on the sides and top of an axis-aligned box resting on z=0."""
    l, w, h = dims
    faces = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=count, p=faces / faces.sum())
    u, v = rng.random(count), rng.random(count)
    x = (u - 0.5) * l
    y = (v - 0.5) * w
    z = rng.random(count) * h
    pts = np.stack([x, y, z], 1)
    pts[face == 0, 0] = -0.5 * l
    pts[face == 1, 0] = 0.5 * l
    pts[face == 0, 1] = (u[face == 0] - 0.5) * w
    pts[face == 1, 1] = (u[face == 1] - 0.5) * w
    pts[face == 2, 1] = -0.5 * w
    pts[face == 3, 1] = 0.5 * w
    pts[face == 4, 2] = h
    return pts


def _cylinder_surface(rng, radius, height, count):
    side = 2 * math.pi * radius * height
    top = math.pi * radius * radius
    on_top = rng.random(count) < top / (side + top)
    a = rng.random(count) * 2 * math.pi
    r = np.where(on_top, radius * np.sqrt(rng.random(count)), radius)
    z = np.where(on_top, height, rng.random(count) * height)
    return np.stack([r * np.cos(a), r * np.sin(a), z], 1)


def _place_objects(rng, spec: SceneSpec):
    objects = []
    tries = 0
    while len(objects) < spec.num_objects and tries < 200 * max(spec.num_objects, 1):
        tries += 1
        cls = int(spec.object_classes[rng.integers(len(spec.object_classes))])
        shape = SHAPE_OF_CLASS[cls]
        rad = spec.extent * 0.8 * math.sqrt(rng.random())
        ang = rng.random() * 2 * math.pi
        center = np.array([rad * math.cos(ang), rad * math.sin(ang)])
        ok = all(
            np.linalg.norm(center - o["center"]) > FOOTPRINT[shape] + FOOTPRINT[o["shape"]] + spec.object_margin
            for o in objects
        )
        if not ok:
            continue
        if shape == "box":
            dims = (rng.uniform(3.5, 4.5), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8))
        else:
            dims = (rng.uniform(0.25, 0.4), rng.uniform(1.5, 1.9))
        speed = rng.uniform(0.0, spec.max_speed)
        heading = rng.random() * 2 * math.pi
        objects.append({
            "cls": cls, "shape": shape, "center": center, "dims": dims,
            "yaw": rng.random() * 2 * math.pi,
            "velocity": speed * np.array([math.cos(heading), math.sin(heading)]),
            "yaw_rate": rng.uniform(-spec.max_yaw_rate, spec.max_yaw_rate),
        })
    return objects


def _ego_poses(rng, spec: SceneSpec) -> list[np.ndarray]:
    heading = rng.random() * 2 * math.pi
    yaw_rate = rng.uniform(-0.05, 0.05)
    poses = []
    for t in range(spec.frames):
        pose = np.eye(4)
        pose[:3, :3] = rotation_z(t * yaw_rate)
        pose[:3, 3] = [t * spec.ego_speed * math.cos(heading), t * spec.ego_speed * math.sin(heading), 0.0]
        poses.append(pose)
    return poses


def generate_sequence(spec: SceneSpec, group: Optional[CyclicGroup] = None,
                      sigma_c: float = DEFAULT_SIGMA_C) -> Scene:
    """Frames in their own sensor coordinates, sensor-to-frame-0 poses, and stacked ground truth."""
    rng = make_rng(spec.seed)
    objects = _place_objects(rng, spec)
    walls = []
    for _ in range(spec.num_walls):
        ang = rng.random() * 2 * math.pi
        dist = rng.uniform(0.85, 1.0) * spec.extent
        walls.append({
            "anchor": np.array([dist * math.cos(ang), dist * math.sin(ang)]),
            "direction": ang + math.pi / 2,
            "length": rng.uniform(6.0, 12.0),
            "height": rng.uniform(2.0, 4.0),
        })
    poses = _ego_poses(rng, spec)

    frames = []
    for t, pose in enumerate(poses):
        pts, sem, inst = [], [], []
        # Ground disk around the sensor, in world coordinates.
        r = spec.extent * np.sqrt(rng.random(spec.points_ground))
        a = rng.random(spec.points_ground) * 2 * math.pi
        g = np.stack([r * np.cos(a), r * np.sin(a), np.zeros_like(r)], 1) + [pose[0, 3], pose[1, 3], 0.0]
        pts.append(g)
        sem.append(np.zeros(len(g), dtype=np.int64))
        inst.append(np.zeros(len(g), dtype=np.int64))
        for wall in walls:
            s = (rng.random(spec.points_per_wall) - 0.5) * wall["length"]
            z = rng.random(spec.points_per_wall) * wall["height"]
            d = np.array([math.cos(wall["direction"]), math.sin(wall["direction"])])
            xy = wall["anchor"] + s[:, None] * d
            pts.append(np.column_stack([xy, z]))
            sem.append(np.full(len(z), 1, dtype=np.int64))
            inst.append(np.zeros(len(z), dtype=np.int64))
        for oid, obj in enumerate(objects, start=1):
            if obj["shape"] == "box":
                local = _box_surface(rng, obj["dims"], spec.points_per_object)
            else:
                local = _cylinder_surface(rng, obj["dims"][0], obj["dims"][1], spec.points_per_object)
            yaw = obj["yaw"] + t * obj["yaw_rate"]
            center = obj["center"] + t * obj["velocity"]
            world = local @ rotation_z(yaw).T + [center[0], center[1], 0.0]
            pts.append(world)
            sem.append(np.full(len(world), obj["cls"], dtype=np.int64))
            inst.append(np.full(len(world), oid, dtype=np.int64))
        world = np.concatenate(pts)
        world = world + rng.normal(0.0, spec.noise, world.shape)
        inv = np.linalg.inv(pose)
        frames.append(PointCloud(
            transform_points(world, inv), semantic=np.concatenate(sem), instance=np.concatenate(inst),
            remission=np.zeros(len(world)),
        ))

    stacked = stack_frames(frames, poses)
    fields = offset_targets(stacked, group or make_group(1), sigma_c)
    return Scene(spec, frames, poses, stacked, fields)


def offset_targets(cloud: PointCloud, group: CyclicGroup, sigma_c: float = DEFAULT_SIGMA_C) -> GroundTruthFields:
    """Offsets ``v = center - x`` to the 4D instance centroid, centerness, and anchor labels.

    Stuff points get zero offset, centerness 0, label 0, and are flagged degenerate
    together with points whose offset has no horizontal component.
    """
    if cloud.instance is None:
        raise InvalidConfig("offset targets need instance ids")
    m = len(cloud)
    inst = cloud.instance
    centers = np.zeros((m, 3))
    things = inst > 0
    if things.any():
        ids, inv = np.unique(inst[things], return_inverse=True)
        inv = inv.reshape(-1)
        counts = np.bincount(inv).astype(np.float64)
        pos = cloud.positions[things]
        ctr = np.stack([np.bincount(inv, pos[:, d]) for d in range(3)], 1) / counts[:, None]
        centers[things] = ctr[inv]
    offsets = np.where(things[:, None], centers - cloud.positions, 0.0)
    # Single-point instances are their own center.
    dist2 = (offsets ** 2).sum(1)
    centerness = np.where(things, np.exp(-dist2 / (2.0 * sigma_c ** 2)), 0.0)
    labels, degenerate = anchors_of_vectors(group, offsets)
    degenerate = degenerate | ~things
    labels[degenerate] = 0
    semantic = cloud.semantic if cloud.semantic is not None else np.zeros(m, dtype=np.int64)
    return GroundTruthFields(semantic, inst.copy(), offsets, centers, centerness, labels, degenerate)


# --- on-disk layout -----------------------------------------------------------

def scene_dir(root: Path, seq: int) -> Path:
    return Path(root) / "sequences" / f"{seq:04d}"


def write_scene(root: Path, seq: int, scene: Scene, sigma_c: float = DEFAULT_SIGMA_C) -> Path:
    d = scene_dir(root, seq)
    (d / "velodyne").mkdir(parents=True, exist_ok=True)
    (d / "labels").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(scene.frames):
        scan, labels = write_semantic_kitti(frame)
        (d / "velodyne" / f"{t:06d}.bin").write_bytes(scan)
        (d / "labels" / f"{t:06d}.label").write_bytes(labels)
    meta = {
        "spec": scene.spec.to_dict(),
        "poses": [p.tolist() for p in scene.poses],
        "sigma_c": sigma_c,
        "frames": len(scene.frames),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def read_scene(root: Path, seq: int) -> tuple[list[PointCloud], list[np.ndarray], dict]:
    d = scene_dir(root, seq)
    meta = json.loads((d / "meta.json").read_text())
    frames = [
        load_scan(d / "velodyne" / f"{t:06d}.bin", d / "labels" / f"{t:06d}.label")
        for t in range(meta["frames"])
    ]
    return frames, [np.array(p) for p in meta["poses"]], meta
