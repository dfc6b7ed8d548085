"""Model-extraction workbench for pixel-wise dual-energy CT algorithms."""

from dect_extract._backend import available as available_backends
from dect_extract.imaging import (
    AffineTransform2D,
    DualEnergySlice,
    GeometryError,
    ImageGrid,
    ShapeError,
    flatten_pairs,
    invert,
    resample,
)
from dect_extract.metrics import EvalReport, SsimParams, pearson_r, scatter_pairs, ssim
from dect_extract.models import (
    LinearPixelModel,
    RegressionTree,
    RepTreeParams,
    fit_constrained_blend,
    fit_ols,
    fit_rep_tree,
    predict_linear,
    predict_tree,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform2D",
    "DualEnergySlice",
    "EvalReport",
    "GeometryError",
    "ImageGrid",
    "LinearPixelModel",
    "RegressionTree",
    "RepTreeParams",
    "ShapeError",
    "SsimParams",
    "available_backends",
    "fit_constrained_blend",
    "fit_ols",
    "fit_rep_tree",
    "flatten_pairs",
    "invert",
    "pearson_r",
    "predict_linear",
    "predict_tree",
    "resample",
    "scatter_pairs",
    "ssim",
]
