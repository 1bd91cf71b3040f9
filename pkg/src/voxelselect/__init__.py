"""Bayesian group-level signal detection on voxel lattices under spatial uncertainty.

Subpackages cover voxel volumes and I/O, Gaussian-spline deformation fields,
the hierarchical regional model, MCMC/SAEM/annealing samplers, marginal
likelihoods and penalized network selection, random-threshold estimation,
classical multiple-testing baselines, simulation generators and a CLI.
"""

__version__ = "0.1.0"

from .volume import (
    VoxelGrid,
    ScalarMap,
    Parcellation,
    SubjectData,
    read_volume,
    write_volume,
    connected_components,
)
from .deform import (
    ControlLattice,
    DisplacementSet,
    build_lattice,
    interpolate_field,
    displace_index,
)
from .model import (
    Hyperparams,
    GroupParams,
    Network,
    LatentState,
    log_prior,
    block_loglik,
    data_loglik_given_w,
    sufficient_stats,
)

__all__ = [
    "VoxelGrid",
    "ScalarMap",
    "Parcellation",
    "SubjectData",
    "read_volume",
    "write_volume",
    "connected_components",
    "ControlLattice",
    "DisplacementSet",
    "build_lattice",
    "interpolate_field",
    "displace_index",
    "Hyperparams",
    "GroupParams",
    "Network",
    "LatentState",
    "log_prior",
    "block_loglik",
    "data_loglik_given_w",
    "sufficient_stats",
    "__version__",
]
