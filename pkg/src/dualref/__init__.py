"""Reference-based video super-resolution with dual-stream bidirectional
recurrent propagation, patch-matching alignment, and FoV-aware evaluation.
"""

from .data import Clip, TripletSample, load_clip, resample_bicubic, synthesize_triplet
from .flow import FlowProvider, estimate_flow, scale_flow
from .network import ModelConfig, build_model, super_resolve

__all__ = [
    "Clip",
    "TripletSample",
    "load_clip",
    "resample_bicubic",
    "synthesize_triplet",
    "FlowProvider",
    "estimate_flow",
    "scale_flow",
    "ModelConfig",
    "build_model",
    "super_resolve",
]

__version__ = "0.1.0"
