"""Spectral neural radiance fields from broadband-filtered light-field subviews."""

from .field import FieldArch, SpectralField
from .geometry import CameraParams
from .optim import TrainConfig, train
from .renderer import QuadratureSpec, render_image, render_view
from .scenedata import SubviewStack, default_scene, grid_cameras, load_dataset, make_dataset
from .spectral import WavelengthGrid, build_response, default_filters, default_sensor

__version__ = "0.1.0"

__all__ = [
    "CameraParams",
    "FieldArch",
    "QuadratureSpec",
    "SpectralField",
    "SubviewStack",
    "TrainConfig",
    "WavelengthGrid",
    "build_response",
    "default_filters",
    "default_scene",
    "default_sensor",
    "grid_cameras",
    "load_dataset",
    "make_dataset",
    "render_image",
    "render_view",
    "train",
]
