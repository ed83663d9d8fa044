"""Sinkhorn-normalized diffusion operators on graphs, point clouds,
Gaussian mixtures and voxel grids."""

__version__ = "0.1.0"

from .errors import CapabilityError, FormatError, NumericalError, ShapeError, SizeError
from .geometry_io import (
    GaussianMixture,
    Graph,
    PointCloud,
    VoxelGrid,
    load_gmm,
    load_graph,
    load_point_cloud,
    load_voxel_grid,
    write_table,
)
from .operators import (
    SmoothingOperator,
    build_dense_operator,
    build_exponential_operator,
    build_gaussian_operator,
    build_gmm_operator,
    build_graph_operator,
    build_operator,
    build_voxel_operator,
    estimate_voxel_masses,
    smatvec,
    smatvec_log,
)
from .normalize import (
    DiffusionOperator,
    ScalingVector,
    convergence_error,
    diffuse,
    row_normalize_apply,
    sinkhorn_normalize,
    spectral_truncation_apply,
    symmetric_normalize_apply,
)
from .spectral import SpectralBasis, estimate_laplacian_eigenvalues, top_eigenpairs
from .flows import FlowConfig, FlowTrajectory, energy_distance, energy_distance_gradient, run_flow
