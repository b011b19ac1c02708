"""Face reconstruction from 2D renders with a linear morphable decoder, SwAV
pretraining, and wound-filling extraction for printable meshes."""

from .decoder import MorphableBasis, decode, synth_basis
from .mesh import TriangleMesh, extract_filling, fill_holes, is_watertight, remove_detached_components

__all__ = [
    "MorphableBasis",
    "TriangleMesh",
    "decode",
    "extract_filling",
    "fill_holes",
    "is_watertight",
    "remove_detached_components",
    "synth_basis",
]
