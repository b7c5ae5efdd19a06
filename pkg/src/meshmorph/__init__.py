"""Mesh deformation and smoothing with variable-shape-parameter Matern RBF interpolation."""
from .geometry import DomainSpec, NodeSet, generate_nodes, select_data_sites
from .interpolation import DeformationInterpolant, evaluate_pointwise, evaluate_uniform, fit
from .kernel import KernelConfig, assemble, find_shape_parameter, matern_c4
from .mesh import SimplicialMesh, quality_report, tessellate
from .smoothing import SmoothingParams, laplace_smooth, run

__version__ = "0.1.0"

__all__ = [
    "DomainSpec", "NodeSet", "generate_nodes", "select_data_sites",
    "DeformationInterpolant", "fit", "evaluate_pointwise", "evaluate_uniform",
    "KernelConfig", "assemble", "find_shape_parameter", "matern_c4",
    "SimplicialMesh", "quality_report", "tessellate",
    "SmoothingParams", "laplace_smooth", "run",
]
