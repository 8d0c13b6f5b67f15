"""Differentiation substrate: precision switch, named-node tape, gradient checking,
optimizers, and the checkpoint container.

Reverse-mode gradients come from torch autograd. The finite-difference checker
here is deliberately independent of it and only calls forward passes.

Checkpoint layout (all integers little-endian)::

    magic    8 bytes   b"EQ4DCKPT"
    version  uint32    currently 1
    count    uint32    number of entries
    entry*   name_len uint32, name utf-8 bytes,
             dtype uint8 (0=float32, 1=float64, 2=int64, 3=uint8),
             ndim uint8, shape uint64 * ndim,
             data  prod(shape) * itemsize bytes, C order
"""

from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
import torch

from eq4d.errors import InvalidConfig, InvalidState, NumericFailure, SchemaError

DTYPES = {"f32": torch.float32, "f64": torch.float64}

CKPT_MAGIC = b"EQ4DCKPT"
CKPT_VERSION = 1
_CODE_OF = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_DTYPE_OF = {v: k for k, v in _CODE_OF.items()}


def torch_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise InvalidConfig(f"precision must be one of {sorted(DTYPES)}, got {precision!r}") from None


@contextlib.contextmanager
def precision(name: str) -> Iterator[torch.dtype]:
    """Temporarily switch torch's default floating dtype."""
    old = torch.get_default_dtype()
    dtype = torch_dtype(name)
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(old)


def single_threaded(seed: Optional[int] = None) -> None:
    """Pin torch to one thread (the bitwise-reproducible regime) and optionally seed it."""
    torch.set_num_threads(1)
    if seed is not None:
        torch.manual_seed(seed)


class Tape:
    """Records named intermediate tensors so a non-finite loss can be traced to its source."""

    def __init__(self):
        self.nodes: list[tuple[str, torch.Tensor]] = []

    def watch(self, name: str, value: torch.Tensor) -> torch.Tensor:
        self.nodes.append((name, value))
        return value

    def first_nonfinite(self) -> Optional[str]:
        for name, value in self.nodes:
            if not torch.isfinite(value.detach()).all():
                return name
        return None


def _watch(tape: Optional[Tape], name: str, value: torch.Tensor) -> torch.Tensor:
    return value if tape is None else tape.watch(name, value)


def backward(loss: torch.Tensor, tape: Optional[Tape] = None) -> None:
    if loss.dim() != 0:
        raise InvalidState("backward expects a scalar loss")
    if not torch.isfinite(loss.detach()):
        node = tape.first_nonfinite() if tape is not None else None
        raise NumericFailure(node or "loss")
    loss.backward()


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences over ``params``.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    Parameters must be float64. With ``max_coords`` only that many randomly
    chosen coordinates per parameter are differenced.
    """
    params = [p for p in params if p.numel()]
    if not params:
        return 0.0
    for p in params:
        if p.dtype != torch.float64:
            raise InvalidState("grad_check requires float64 parameters")
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and len(coords) > max_coords:
                coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                up = fn().item()
                flat[c] = orig - eps
                down = fn().item()
                flat[c] = orig
                numeric = (up - down) / (2.0 * eps)
                worst = max(worst, relative_error(g.view(-1)[c].item(), numeric))
    return worst


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfig(f"learning rate must be positive, got {self.lr}")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def make_optimizer(params: Iterable[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay, foreach=False)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, foreach=False)


def step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one update after checking every gradient matches its parameter."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and p.grad.shape != p.shape:
                raise InvalidState(f"gradient shape {tuple(p.grad.shape)} != parameter shape {tuple(p.shape)}")
    optimizer.step()


# --- checkpoint container -----------------------------------------------------

def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float32:
        return arr.astype("<f4")
    if arr.dtype == np.float64:
        return arr.astype("<f8")
    if arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        return arr.astype("<i8")
    if arr.dtype == np.uint8:
        return arr
    raise SchemaError(f"unsupported array dtype {arr.dtype}")


def write_arrays(arrays: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
    for name, value in arrays.items():
        arr = np.array(_to_array(value), order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _CODE_OF[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_arrays(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != CKPT_MAGIC:
        raise SchemaError("not a checkpoint: bad magic bytes")
    try:
        version, count = struct.unpack_from("<II", data, 8)
        if version != CKPT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {version}")
        pos = 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            if code not in _DTYPE_OF:
                raise SchemaError(f"entry {name!r} has unknown dtype code {code}")
            dtype = _DTYPE_OF[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise SchemaError(f"entry {name!r} is truncated")
            out[name] = np.frombuffer(data[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise SchemaError(f"corrupt checkpoint: {e}") from None
    if pos != len(data):
        raise SchemaError("trailing bytes after the last entry")
    return out


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def unpack_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def optimizer_arrays(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    """Flatten optimizer state into named arrays (``opt/<param index>/<key>``)."""
    state = optimizer.state_dict()["state"]
    out = {}
    for idx, entries in sorted(state.items()):
        for key, value in sorted(entries.items()):
            if isinstance(value, torch.Tensor):
                out[f"opt/{idx}/{key}"] = value
            else:
                out[f"opt/{idx}/{key}"] = np.asarray(value, dtype=np.float64)
    return out


def load_optimizer_arrays(optimizer: torch.optim.Optimizer, arrays: Mapping[str, np.ndarray]) -> None:
    sd = optimizer.state_dict()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        if not name.startswith("opt/"):
            continue
        _, idx, key = name.split("/", 2)
        idx = int(idx)
        if idx >= len(params):
            raise SchemaError(f"optimizer state for missing parameter {idx}")
        t = torch.from_numpy(np.array(value))
        if key in ("exp_avg", "exp_avg_sq", "momentum_buffer") and t.shape != params[idx].shape:
            raise SchemaError(f"optimizer state {name} has shape {tuple(t.shape)}, expected {tuple(params[idx].shape)}")
        if key == "step":
            t = t.to(torch.float32)
        else:
            t = t.to(params[idx].dtype)
        state.setdefault(idx, {})[key] = t
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_checkpoint(path: Path, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                    meta: Optional[dict] = None) -> None:
    arrays: dict[str, object] = {"__meta__": pack_json(meta or {})}
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p
    if optimizer is not None:
        arrays.update(optimizer_arrays(optimizer))
    Path(path).write_bytes(write_arrays(arrays))


def load_checkpoint(path: Path, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    arrays = read_arrays(Path(path).read_bytes())
    meta = unpack_json(arrays.pop("__meta__")) if "__meta__" in arrays else {}
    expected = model.state_dict()
    got = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(got) != set(expected):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise SchemaError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    state = {}
    for k, ref in expected.items():
        t = torch.from_numpy(np.array(got[k]))
        if t.shape != ref.shape:
            raise SchemaError(f"parameter {k} has shape {tuple(t.shape)}, expected {tuple(ref.shape)}")
        state[k] = t.to(ref.dtype)
    model.load_state_dict(state)
    if optimizer is not None:
        load_optimizer_arrays(optimizer, arrays)
    return meta
