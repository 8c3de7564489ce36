"""Panoramic scene geometry: meshes, guidance rendering, routes and Gaussian reconstruction."""
from .errors import (
    AlignmentError,
    DecodeError,
    DegenerateInputError,
    DimensionMismatchError,
    DomainError,
    FormatError,
    NoPathError,
)
from .pano import CameraPose, PerspectiveViewSpec, Trajectory
from .mesh import SceneMesh, build_scene_mesh
from .raster import MaskedFrame, rasterize_perspective, render_equirect, render_guidance_video
from .routes import RouteParams, RouteSampler, sample_route
from .gaussians import GaussianCloud, OptimConfig, optimize_gaussians, render_gaussians
from .recon import align_depth_scales, fuse_point_cloud, sample_reference_views
from .config import PipelineConfig

__version__ = "0.1.0"
