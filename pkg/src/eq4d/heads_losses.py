"""Alias of :mod:`eq4d.heads` under its long name."""

from __future__ import annotations

from eq4d.heads import (  # noqa: F401
    INVARIANT_MODES,
    LOSS_PARTS,
    HeadConfig,
    PanopticHeads,
    centerness_head,
    centerness_loss,
    decode_offsets,
    decode_prediction,
    local_offset_targets,
    offset_losses,
    semantic_head,
    semantic_loss,
    total_loss,
)
