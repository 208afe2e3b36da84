"""Fisheye field-of-view extension toolkit.

Synthesizes fisheye imagery with a parametric radial distortion model,
moves images between Cartesian and polar domains, estimates the radial
distortion-level profile, outpaints the invalid border in the polar
domain with small from-scratch trained networks, and scores the results.
"""

__version__ = "0.1.0"

from .distortion import (
    DistortionLevelVector,
    DistortionProfile,
    ParamRanges,
    distortion_level,
    expand_level_map,
    is_valid_profile,
    level_vector,
    sample_profile,
    synthesize_fisheye,
)
from .image import BorderPolicy, ImageBuffer, Mask, RangeTag
from .metrics import SymmetryReport, fov_gain, psnr, ssim, symmetry_metrics, vector_l1
from .polar import PolarGrid, default_grid, fill_band, polar_validity, to_cartesian, to_polar

__all__ = [
    "BorderPolicy",
    "DistortionLevelVector",
    "DistortionProfile",
    "ImageBuffer",
    "Mask",
    "ParamRanges",
    "PolarGrid",
    "RangeTag",
    "SymmetryReport",
    "default_grid",
    "distortion_level",
    "expand_level_map",
    "fill_band",
    "fov_gain",
    "is_valid_profile",
    "level_vector",
    "polar_validity",
    "psnr",
    "sample_profile",
    "ssim",
    "symmetry_metrics",
    "synthesize_fisheye",
    "to_cartesian",
    "to_polar",
    "vector_l1",
]
