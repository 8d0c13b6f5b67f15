"""Prediction heads and losses.

Invariant targets (semantic class, centerness) are read from pooled features or,
in ``rcs`` mode, from one selected anchor. The offset field is equivariant: it
is classified into an anchor and regressed in that anchor's local frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from eq4d.errors import InvalidConfig
from eq4d.group import CyclicGroup, anchors_of_vectors, make_group
from eq4d.layers import (
    InvariantPool,
    PointwiseLinear,
    _init,
    argmax_first,
    leaky_relu,
    rotate_local,
    rotation_scores,
    unrotate_local,
)

INVARIANT_MODES = ("max", "avg", "attentive", "rcs")
LOSS_PARTS = ("sem", "off", "rot", "ctr")


@dataclass
class HeadConfig:
    invariant_pool_mode: str = "avg"
    use_rotation_head: bool = True
    rhead_on_plain_backbone: bool = False
    lambda_sem: float = 1.0
    lambda_off: float = 1.0
    lambda_rot: float = 1.0
    lambda_ctr: float = 1.0
    offset_loss: str = "L1"

    def __post_init__(self):
        if self.invariant_pool_mode not in INVARIANT_MODES:
            raise InvalidConfig(f"invariant_pool_mode must be one of {INVARIANT_MODES}")
        if self.invariant_pool_mode == "rcs" and not self.use_rotation_head:
            raise InvalidConfig("rcs invariant prediction needs the rotation head")
        if self.offset_loss != "L1":
            raise InvalidConfig("only the L1 offset loss is supported")

    @property
    def weights(self) -> dict[str, float]:
        return {"sem": self.lambda_sem, "off": self.lambda_off, "rot": self.lambda_rot, "ctr": self.lambda_ctr}


# --- targets ------------------------------------------------------------------

def local_offset_targets(offsets: np.ndarray, group: CyclicGroup) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor label ``i(v)``, local target ``R_{i(v)}^{-1} v`` and degenerate mask per row.

    Degenerate rows (no horizontal component) get label 0, so their local
    target is ``v`` itself.
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    labels, degenerate = anchors_of_vectors(group, offsets)
    mats = np.asarray(group.matrices)[labels]
    local = np.einsum("mji,mj->mi", mats, offsets)
    return labels, local, degenerate


def decode_offsets(local: np.ndarray, labels: np.ndarray, group: CyclicGroup) -> np.ndarray:
    mats = np.asarray(group.matrices)[np.asarray(labels)]
    return np.einsum("mij,mj->mi", mats, np.asarray(local, dtype=np.float64))


# --- functional heads -----------------------------------------------------------

def semantic_head(features: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    logits = features @ weight
    return logits if bias is None else logits + bias


def semantic_loss(logits: torch.Tensor, target: torch.Tensor, class_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    return F.cross_entropy(logits, target, weight=class_weights)


def centerness_head(features: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    z = features @ weight.reshape(-1)
    return torch.sigmoid(z if bias is None else z + bias)


def centerness_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def offset_losses(
    scores: torch.Tensor,
    local: torch.Tensor,
    offsets: torch.Tensor,
    labels: torch.Tensor,
    degenerate: torch.Tensor,
    thing_mask: torch.Tensor,
    group: CyclicGroup,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotation-classification cross-entropy and local-frame L1 regression on thing points.

    ``scores`` is ``(m, n)``; ``local`` holds a decoded vector per anchor, ``(m, n, 3)``.
    Returns ``(rot_ce, off_l1)``; both are zero when there are no thing points.
    """
    things = torch.nonzero(thing_mask, as_tuple=True)[0]
    rot_pts = torch.nonzero(thing_mask & ~degenerate, as_tuple=True)[0]
    if len(rot_pts):
        rot_ce = F.cross_entropy(scores[rot_pts], labels[rot_pts])
    else:
        rot_ce = scores.sum() * 0.0
    if len(things):
        lab = labels[things]
        target = unrotate_local(offsets[things], lab, group)
        pred = local[things, lab]
        off_l1 = (pred - target).abs().sum(1).mean()
    else:
        off_l1 = local.sum() * 0.0
    return rot_ce, off_l1


def decode_prediction(scores: torch.Tensor, local: torch.Tensor, group: CyclicGroup) -> tuple[torch.Tensor, torch.Tensor]:
    """Inference-time offsets: top-scoring anchor, its local vector rotated to the global frame."""
    anchor = argmax_first(scores)
    chosen = local[torch.arange(local.shape[0]), anchor]
    return anchor, rotate_local(chosen, anchor, group)


def total_loss(parts: Mapping[str, torch.Tensor], weights: Mapping[str, float]) -> torch.Tensor:
    active = [name for name in parts if weights.get(name, 0.0) != 0.0]
    if not active:
        raise InvalidConfig("every loss weight is zero")
    return sum(weights[name] * parts[name] for name in active)


# --- modules ----------------------------------------------------------------------

class _Branch(nn.Module):
    """Equivariant 1x1 layer + activation feeding one head."""

    def __init__(self, c: int):
        super().__init__()
        self.lin = PointwiseLinear(c, c)

    def forward(self, x):
        return leaky_relu(self.lin(x))


class PanopticHeads(nn.Module):
    """Semantic, centerness, and offset heads on an equivariant ``(m, n, c)`` feature map.

    With ``plain_anchors`` set, the backbone is expected to be non-equivariant
    (``n = 1``) and the rotation scores and per-anchor local vectors come from
    plain linear maps instead (the rotation head on a plain backbone). Without
    the rotation head, offsets are regressed from average-pooled features in
    the global frame, i.e. treated as if they were invariant.
    """

    def __init__(self, c: int, num_classes: int, group: CyclicGroup, cfg: HeadConfig,
                 plain_anchors: Optional[CyclicGroup] = None):
        super().__init__()
        self.cfg = cfg
        self.group = group
        self.plain = plain_anchors is not None
        if self.plain and group.n != 1:
            raise InvalidConfig("the plain rotation head needs a backbone with n = 1")
        if self.plain:
            self.offset_group = plain_anchors
        elif cfg.use_rotation_head:
            self.offset_group = group
        else:
            self.offset_group = make_group(1)
        self.sem_branch = _Branch(c)
        self.ctr_branch = _Branch(c)
        self.off_branch = _Branch(c)
        pool_mode = cfg.invariant_pool_mode
        self.pool = None if pool_mode == "rcs" else InvariantPool(c, pool_mode)
        self.ctr_pool = InvariantPool(c, "avg" if pool_mode == "rcs" else pool_mode)
        self.sem_out = PointwiseLinear(c, num_classes)
        self.ctr_out = PointwiseLinear(c, 1)
        k = self.offset_group.n
        if self.plain:
            self.score_out = PointwiseLinear(c, k)
            self.vec_out = PointwiseLinear(c, 3 * k)
        else:
            self.score_weight = nn.Parameter(_init((c,), c))
            self.score_bias = nn.Parameter(torch.zeros(()))
            self.vec_out = PointwiseLinear(c, 3)

    def offset_fields(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Rotation scores ``(m, k)`` and a decoded local vector per anchor ``(m, k, 3)``."""
        h = self.off_branch(feats)
        if self.plain:
            flat = h[:, 0]
            return self.score_out(flat), self.vec_out(flat).view(-1, self.offset_group.n, 3)
        if not self.cfg.use_rotation_head:
            pooled = h.mean(1)
            return pooled.new_zeros(len(pooled), 1), self.vec_out(pooled).unsqueeze(1)
        return rotation_scores(h, self.score_weight, self.score_bias), self.vec_out(h)

    def forward(self, feats: torch.Tensor, rcs_labels: Optional[tuple[torch.Tensor, torch.Tensor]] = None
                ) -> dict[str, torch.Tensor]:
        """Head outputs; ``rcs_labels = (labels, valid)`` selects ground-truth anchors in rcs mode."""
        scores, local = self.offset_fields(feats)
        sem = self.sem_branch(feats)
        if self.pool is not None:
            sem = self.pool(sem)
        elif self.plain:
            sem = sem[:, 0]
        else:
            anchor = argmax_first(scores.detach())
            if rcs_labels is not None:
                labels, valid = rcs_labels
                anchor = torch.where(valid, labels, anchor)
            sem = sem[torch.arange(sem.shape[0]), anchor]
        logits = self.sem_out(sem)
        ctr = torch.sigmoid(self.ctr_out(self.ctr_pool(self.ctr_branch(feats))).squeeze(-1))
        return {"logits": logits, "centerness": ctr, "scores": scores, "local": local}

    def losses(self, out: Mapping[str, torch.Tensor], targets: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Unweighted loss parts; ``targets`` labels must be computed for ``offset_group``."""
        rot, off = offset_losses(
            out["scores"], out["local"], targets["offsets"], targets["labels"],
            targets["degenerate"], targets["thing_mask"], self.offset_group,
        )
        parts = {
            "sem": semantic_loss(out["logits"], targets["semantic"]),
            "off": off,
            "ctr": centerness_loss(out["centerness"], targets["centerness"]),
        }
        if self.offset_group.n > 1:
            parts["rot"] = rot
        return parts

    def predict_offsets(self, out: Mapping[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        return decode_prediction(out["scores"], out["local"], self.offset_group)
