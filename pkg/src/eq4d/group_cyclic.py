"""Alias of :mod:`eq4d.group` under its long name."""

from __future__ import annotations

from eq4d.group import (  # noqa: F401
    TWO_PI,
    CyclicGroup,
    FaithfulnessReport,
    anchor_of_vector,
    anchors_of_vectors,
    heading,
    make_group,
    nearest_anchor,
    nearest_anchors,
    quotient_faithfulness,
    rotation_z,
)
