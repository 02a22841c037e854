"""Sparse voxel radiance fields, optimized directly -- no neural networks.

A scene is a sparse 3D grid of opacities and degree-2 spherical-harmonic
color coefficients, fit to calibrated photographs through a differentiable
volume renderer with analytic gradients.
"""

from .artifact_io import (GridFileError, load_checkpoint, load_grid,
                          read_image, save_checkpoint, save_grid, write_image)
from .camera import (Camera, Dataset, DatasetError, Ray, generate_ray,
                     generate_rays, load_nerf_dataset, ndc_ray, to_ndc)
from .grid import EMPTY, GradientBuffer, SparseGrid
from .losses import (beta_loss, cauchy_sparsity_loss, mse_loss, psnr, ssim,
                     tv_loss)
from .msi import MsiBackground, render_rays_with_background, sample_background
from .optim import LrSchedule, OptimState, lr_at
from .render import (RenderOptions, RenderResult, march, render_image,
                     render_ray, render_ray_backward, render_rays,
                     render_rays_backward)
from .trainer import (LadderRung, TrainConfig, TrainResult, default_config,
                    evaluate, load_config, save_config, train)
from .toy import build_toy_grid, make_toy_dataset, toy_config

__version__ = "0.1.0"

__all__ = [
    "Camera", "Dataset", "DatasetError", "EMPTY", "GradientBuffer",
    "GridFileError", "LadderRung", "LrSchedule", "MsiBackground",
    "OptimState", "Ray", "RenderOptions", "RenderResult", "SparseGrid",
    "TrainConfig", "TrainResult", "beta_loss", "build_toy_grid",
    "cauchy_sparsity_loss", "default_config", "evaluate", "generate_ray",
    "generate_rays", "load_checkpoint", "load_config", "load_grid",
    "load_nerf_dataset", "lr_at", "make_toy_dataset", "march", "mse_loss",
    "ndc_ray", "psnr", "read_image", "render_image", "render_ray",
    "render_ray_backward", "render_rays", "render_rays_backward",
    "render_rays_with_background", "sample_background", "save_checkpoint",
    "save_config", "save_grid", "ssim", "to_ndc", "toy_config", "train",
    "tv_loss", "write_image",
]
