"""GL(2) steerers for keypoint descriptions.

Exact polynomial representations of GL(2), analytically steerable jet
descriptors on synthetic scenes, steered matching, toy-scale steerer training
and a homography-estimation harness.
"""
from .repr_gl2 import IrrepSpec, SteererSpec, default_spec, irrep_matrix, irrep_scaled, steer, steerer_matrix

__all__ = ["IrrepSpec", "SteererSpec", "default_spec", "irrep_matrix", "irrep_scaled", "steer", "steerer_matrix"]
__version__ = "0.1.0"
