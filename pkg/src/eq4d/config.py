"""Run configuration: one JSON document validated against a published schema.

Unknown keys are rejected at every level. Command-line ``--set a.b=value``
overrides are applied to the raw document before validation.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from eq4d.diffcore import TrainConfig
from eq4d.errors import InvalidConfig
from eq4d.heads import HeadConfig
from eq4d.model import NetConfig
from eq4d.panoptic import ClusterConfig
from eq4d.scenegen import SceneSpec

_STRICT = ConfigDict(extra="forbid")
for _cls in (TrainConfig, HeadConfig, NetConfig, ClusterConfig, SceneSpec):
    _cls.__pydantic_config__ = _STRICT


class DataConfig(BaseModel):
    model_config = _STRICT
    root: str = "data"
    num_train: int = Field(200, ge=0)
    num_val: int = Field(40, ge=0)
    scene: SceneSpec = SceneSpec()


class EvalConfig(BaseModel):
    model_config = _STRICT
    window_frames: int = Field(0, ge=0, description="frames per window; 0 stacks the whole sequence")
    eval_every: int = Field(1, ge=0, description="validate every k epochs during training; 0 only at the end")
    max_scenes: int = Field(0, ge=0, description="cap on validation scenes; 0 uses all")


class AuditConfig(BaseModel):
    model_config = _STRICT
    clouds: int = Field(50, ge=1)
    max_points: int = Field(512, ge=1)
    orders: list[int] = [2, 3, 4, 6]
    seed: int = 0


class ScalingConfig(BaseModel):
    model_config = _STRICT
    K: int = Field(256, ge=1)
    orders: list[int] = [1, 2, 3, 4, 6]


class RunConfig(BaseModel):
    model_config = _STRICT
    precision: Literal["f32", "f64"] = "f32"
    out: str = "runs/default"
    data: DataConfig = DataConfig()
    net: NetConfig = NetConfig()
    heads: HeadConfig = HeadConfig()
    train: TrainConfig = TrainConfig()
    cluster: ClusterConfig = ClusterConfig()
    eval: EvalConfig = EvalConfig()
    audit: AuditConfig = AuditConfig()
    scaling: ScalingConfig = ScalingConfig()

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def training_hash(self) -> str:
        """Hash of everything that determines trained weights (epoch count and paths excluded)."""
        d = self.to_dict()
        d["train"] = {k: v for k, v in d["train"].items() if k != "epochs"}
        keep = {k: d[k] for k in ("precision", "net", "heads", "train")}
        keep["data"] = {k: v for k, v in d["data"].items() if k != "root"}
        canonical = json.dumps(keep, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def schema() -> dict:
    return RunConfig.model_json_schema()


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Set dotted keys, e.g. ``net.n=4`` or ``heads.invariant_pool_mode=max``."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return doc


def build_config(doc: Optional[dict] = None, overrides: Sequence[str] = ()) -> RunConfig:
    try:
        return RunConfig.model_validate(apply_overrides(doc or {}, overrides))
    except ValidationError as e:
        raise InvalidConfig(str(e)) from None


def load_config(path: Optional[Path], overrides: Sequence[str] = ()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{path}: {e}") from None
        if not isinstance(doc, dict):
            raise InvalidConfig(f"{path}: top level must be an object")
    return build_config(doc, overrides)
