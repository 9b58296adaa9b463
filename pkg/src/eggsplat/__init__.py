"""CPU Gaussian-splatting fitter with an optional edge-weighted loss.

The package fits scenes of anisotropic 3D Gaussian particles to
multi-view images (and isotropic 2D particles to single images) with
hand-derived gradients, and exposes matched baseline / edge-weighted loss
variants so their effect can be compared under identical budgets.
"""

from .core import (Camera, Field2D, GaussianScene, ImageF, Particle2D,
                   Particle3D, Sym2, Sym3, activate_particle,
                   deactivate_particle, validate_scene)
from .edge import EdgeConfig, WeightMap, edge_weight_map, image_gradient, \
    scale_for_display
from .loss import LossConfig, l1_term, ssim, total_loss
from .metrics import EvalRecord, edge_region_psnr, particle_edge_alignment, psnr
from .render import (ProjectedGaussian, RenderConfig, RenderOutput,
                     build_covariance3d, depth_sort, project_covariance,
                     project_point, projection_jacobian, rasterize,
                     rasterize_backward, rasterize_naive)
from .splat2d import Fit2DConfig, fit2d, gradients2d, kernel2d, l2_distance, \
    reconstruct
from .train import (DensifyConfig, TrainConfig, adam_step, density_control,
                    init_scene_from_points, init_scene_random, train)

__version__ = "0.1.0"

__all__ = [
    "Camera", "DensifyConfig", "EdgeConfig", "EvalRecord", "Field2D",
    "Fit2DConfig", "GaussianScene", "ImageF", "LossConfig", "Particle2D",
    "Particle3D", "ProjectedGaussian", "RenderConfig", "RenderOutput",
    "Sym2", "Sym3", "TrainConfig", "WeightMap", "activate_particle",
    "adam_step", "build_covariance3d", "deactivate_particle",
    "density_control", "depth_sort", "edge_region_psnr", "edge_weight_map",
    "fit2d", "gradients2d", "image_gradient", "init_scene_from_points",
    "init_scene_random", "kernel2d", "l1_term", "l2_distance",
    "particle_edge_alignment", "project_covariance", "project_point",
    "projection_jacobian", "psnr", "rasterize", "rasterize_backward",
    "rasterize_naive", "reconstruct", "scale_for_display", "ssim",
    "total_loss", "train", "validate_scene",
]
