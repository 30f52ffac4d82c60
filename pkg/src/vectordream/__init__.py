"""Differentiable vector graphics with score distillation against oracle denoisers."""

from .model import (
    ColorRGBA,
    ContractError,
    Path,
    Scene,
    StrokeStyle,
    Style,
    StyleConfig,
    pack_params,
    unpack_params,
    validate_scene,
)
from .optim import AdamConfig, LrSchedule, NumericalAbort, lr_at
from .raster import RasterImage, RenderOptions, render, render_vjp
from .score import NoiseSchedule, delta_oracle, gmm_oracle
from .sive import RegionSpec, SiveConfig, sive_optimize
from .svgio import SvgDocument, compose, parse_svg, write_svg
from .vpsd import RunConfig, vpsd_run

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "ColorRGBA",
    "ContractError",
    "LrSchedule",
    "NoiseSchedule",
    "NumericalAbort",
    "Path",
    "RasterImage",
    "RegionSpec",
    "RenderOptions",
    "RunConfig",
    "Scene",
    "SiveConfig",
    "StrokeStyle",
    "Style",
    "StyleConfig",
    "SvgDocument",
    "compose",
    "delta_oracle",
    "gmm_oracle",
    "lr_at",
    "pack_params",
    "parse_svg",
    "render",
    "render_vjp",
    "sive_optimize",
    "unpack_params",
    "validate_scene",
    "vpsd_run",
    "write_svg",
]
