"""Identification of discontinuous diffusion coefficients from gradient data.

The package recovers a box-constrained diffusion coefficient of
``-div(q grad u) = f`` on the unit square from noisy per-triangle
observations of ``grad u``.  The outer loop is an alternating-direction
scheme whose coefficient update is an active-set Newton solve reduced by a
block factorization, and whose companion update is a pluggable denoiser
(total-variation prox by default, or an external process speaking a small
binary protocol).
"""
from .driver import AdmmConfig, AdmmState, Metrics, admm_init, admm_iterate, run
from .estimator import CoefficientIdentifier
from .linsolve import LinearSolverConfig, MultigridConfig, VCyclePreconditioner
from .mesh import Mesh, MeshHierarchy, build_hierarchy, build_uniform_mesh
from .problems import (
    ProblemSpec,
    build_problem,
    generate_observation,
    noise_floor,
    read_grid,
    read_observation,
    write_grid,
    write_observation,
)
from .psolver import (
    BridgeEndpoint,
    BridgeError,
    DenoiserSpec,
    discrete_tv,
    from_image,
    prox_tv,
    solve_p_subproblem,
    to_image,
)
from .qsolver import BoxBounds, NewtonConfig, solve_q_subproblem

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "BoxBounds",
    "BridgeEndpoint",
    "BridgeError",
    "CoefficientIdentifier",
    "DenoiserSpec",
    "LinearSolverConfig",
    "Mesh",
    "MeshHierarchy",
    "Metrics",
    "MultigridConfig",
    "NewtonConfig",
    "ProblemSpec",
    "VCyclePreconditioner",
    "admm_init",
    "admm_iterate",
    "build_hierarchy",
    "build_problem",
    "build_uniform_mesh",
    "discrete_tv",
    "from_image",
    "generate_observation",
    "noise_floor",
    "prox_tv",
    "read_grid",
    "read_observation",
    "run",
    "solve_p_subproblem",
    "solve_q_subproblem",
    "to_image",
    "write_grid",
    "write_observation",
]

__version__ = "0.1.0"
