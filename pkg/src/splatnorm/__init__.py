"""Desk-scale differentiable Gaussian splatting with normal-regularized meshing."""

from .core import (
    Camera,
    Gaussian,
    GaussianSet,
    covariance_from_rs,
    evaluate_gaussian,
    gradient_proxy,
    project_to_screen,
    sh_to_color,
)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Gaussian",
    "GaussianSet",
    "covariance_from_rs",
    "evaluate_gaussian",
    "gradient_proxy",
    "project_to_screen",
    "sh_to_color",
]
