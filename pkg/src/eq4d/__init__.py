"""Cyclic-group rotation-equivariant point convolutions for 4D panoptic segmentation."""

from eq4d.group import CyclicGroup, make_group

__version__ = "0.1.0"

__all__ = ["CyclicGroup", "make_group", "__version__"]
