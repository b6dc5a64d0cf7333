"""Geometry and motion-field toolkit for 3DMM-guided face animation."""

from .fitting import FitOptions, FitResult, LandmarkSet, fit_params, loss_3dmm
from .generator import GadeWeights, contextual_attention, gade_apply
from .model import Mesh, MorphableModel, ParamSet, decode, load_model, make_toy_model
from .motion import KeypointSet, affine_motion, fuse_dense_motion, warp
from .render import AttributeImage, ImageGrid, rasterize
from .transfer import relative_params, select_reference_frame

__version__ = "0.1.0"

__all__ = [
    "AttributeImage",
    "FitOptions",
    "FitResult",
    "GadeWeights",
    "ImageGrid",
    "KeypointSet",
    "LandmarkSet",
    "Mesh",
    "MorphableModel",
    "ParamSet",
    "affine_motion",
    "contextual_attention",
    "decode",
    "fit_params",
    "fuse_dense_motion",
    "gade_apply",
    "load_model",
    "loss_3dmm",
    "make_toy_model",
    "rasterize",
    "relative_params",
    "select_reference_frame",
    "warp",
]
