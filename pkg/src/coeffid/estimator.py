"""Estimator facade over the identification pipeline.

`CoefficientIdentifier` wraps mesh construction, configuration, and the
outer splitting loop behind the scikit-learn estimator protocol: `fit`
takes the per-triangle gradient observations, `predict` evaluates the
identified coefficient at arbitrary points of the unit square, and
`transform` returns the reconstructed (denoised) gradient field.  All
constructor arguments are stored untouched so `clone` and `get_params`
behave; validation happens at fit time.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from . import assembly
from .driver import AdmmConfig, run
from .linsolve import LinearSolverConfig
from .mesh import Mesh, build_uniform_mesh
from .psolver import BridgeEndpoint, DenoiserSpec, resolve_bridge_command
from .qsolver import BoxBounds, NewtonConfig


def validate_observation(X, mesh: Mesh | None = None) -> np.ndarray:
    """Check a per-triangle gradient array: finite, shape (2*n*n, 2)."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValueError(
            f"observations need two gradient components, got {X.shape[1]}")
    if mesh is not None:
        if X.shape[0] != mesh.num_triangles:
            raise ValueError(
                f"{X.shape[0]} observation rows do not match the mesh "
                f"({mesh.num_triangles} triangles)")
        return X
    n = math.isqrt(X.shape[0] // 2)
    if 2 * n * n != X.shape[0] or n < 2:
        raise ValueError(
            f"{X.shape[0]} observation rows do not form a uniform "
            f"triangulation (expected 2*n*n with n >= 2)")
    return X


def validate_points(points) -> np.ndarray:
    points = check_array(points, dtype=np.float64, ensure_2d=True)
    if points.shape[1] != 2:
        raise ValueError(f"points must be (x, y) pairs, got {points.shape}")
    if points.min() < 0.0 or points.max() > 1.0:
        raise ValueError("points must lie in the closed unit square")
    return points


class CoefficientIdentifier(BaseEstimator):
    """Identify a diffusion coefficient from noisy gradient observations.

    Parameters mirror the solver configuration; `beta` is the splitting
    penalty, `theta` the TV prox weight, and `denoiser` picks the built-in
    prox ("rof_prox") or an external process ("external", launched with
    `bridge_command` unless the COEFFID_BRIDGE_CMD environment variable
    overrides it).
    """

    def __init__(self, beta: float = 0.1, theta: float = 0.05,
                 denoiser: str = "rof_prox", sigma: float = 9.0,
                 outer_iters: int = 50, f_const: float = 10.0,
                 lower: float = 0.1, upper: float = 5.0,
                 newton_tol: float = 1e-3, newton_max_inner: int = 10,
                 state_tol: float = 1e-10, h_tol: float = 1e-5,
                 rof_tol: float = 1e-6, rof_max_iters: int = 20000,
                 primal_tol: float | None = None,
                 bridge_command: str | None = None):
        self.beta = beta
        self.theta = theta
        self.denoiser = denoiser
        self.sigma = sigma
        self.outer_iters = outer_iters
        self.f_const = f_const
        self.lower = lower
        self.upper = upper
        self.newton_tol = newton_tol
        self.newton_max_inner = newton_max_inner
        self.state_tol = state_tol
        self.h_tol = h_tol
        self.rof_tol = rof_tol
        self.rof_max_iters = rof_max_iters
        self.primal_tol = primal_tol
        self.bridge_command = bridge_command

    def _admm_config(self) -> AdmmConfig:
        spec = DenoiserSpec(
            kind=self.denoiser,
            theta=self.theta if self.denoiser == "rof_prox" else None,
            sigma=self.sigma if self.denoiser == "external" else None,
            rof_tol=self.rof_tol, rof_max_iters=self.rof_max_iters)
        return AdmmConfig(
            beta=self.beta, denoiser=spec, outer_iters=self.outer_iters,
            newton=NewtonConfig(tol=self.newton_tol,
                                max_inner=self.newton_max_inner,
                                h_tol=self.h_tol),
            lin_state=LinearSolverConfig(tol=self.state_tol),
            bounds=BoxBounds(self.lower, self.upper),
            f_const=self.f_const, primal_tol=self.primal_tol)

    def fit(self, X, y=None) -> "CoefficientIdentifier":
        """Run the identification on observations X; y, when given, is
        the true nodal coefficient used for error reporting only."""
        X = validate_observation(X)
        n = math.isqrt(X.shape[0] // 2)
        mesh = build_uniform_mesh(n)
        truth = None
        if y is not None:
            truth = np.asarray(y, dtype=float).ravel()
            if truth.size != mesh.num_nodes:
                raise ValueError(
                    f"truth has {truth.size} values, mesh has "
                    f"{mesh.num_nodes} nodes")
        cfg = self._admm_config()
        endpoint = None
        command = resolve_bridge_command(self.bridge_command)
        if cfg.denoiser.kind == "external":
            if command is None:
                raise ValueError(
                    "external denoiser needs bridge_command or the "
                    "COEFFID_BRIDGE_CMD environment variable")
            endpoint = BridgeEndpoint.from_command_line(command)
        try:
            state, metrics = run(mesh, X, cfg, truth=truth,
                                 endpoint=endpoint)
        finally:
            if endpoint is not None:
                endpoint.close()
        self.mesh_ = mesh
        self.q_ = state.q
        self.state_ = state
        self.history_ = metrics
        self.n_iter_ = state.k
        return self

    def _check_fitted(self):
        if not hasattr(self, "q_"):
            raise NotFittedError(
                "this CoefficientIdentifier instance is not fitted yet")

    def predict(self, points) -> np.ndarray:
        """Piecewise-linear interpolation of the identified coefficient."""
        self._check_fitted()
        points = validate_points(points)
        mesh = self.mesh_
        n = mesh.n
        grid = self.q_.reshape(n + 1, n + 1)  # [j, i] layout
        xs = points[:, 0] * n
        ys = points[:, 1] * n
        i = np.minimum(xs.astype(int), n - 1)
        j = np.minimum(ys.astype(int), n - 1)
        s = xs - i
        t = ys - j
        ll = grid[j, i]
        lr = grid[j, i + 1]
        ul = grid[j + 1, i]
        ur = grid[j + 1, i + 1]
        # cells split along the ll-ur diagonal
        lower_vals = ll + s * (lr - ll) + t * (ur - lr)
        upper_vals = ll + s * (ur - ul) + t * (ul - ll)
        return np.where(s >= t, lower_vals, upper_vals)

    def transform(self, X=None) -> np.ndarray:
        """Reconstructed per-triangle gradient field of the fitted state."""
        self._check_fitted()
        if X is not None:
            validate_observation(X, mesh=self.mesh_)
        state = self.state_
        if state.grads is None:
            res = assembly.forward_solve(self.mesh_, state.q,
                                         state.cfg.f_const,
                                         cfg=state.cfg.lin_state)
            state.u = res.x
            state.grads = assembly.state_gradients(self.mesh_, res.x)
        return state.grads.copy()

    def score(self, X, y) -> float:
        """Negative relative coefficient error against the nodal truth y
        in the mass-matrix norm (greater is better)."""
        self._check_fitted()
        truth = np.asarray(y, dtype=float).ravel()
        if truth.size != self.mesh_.num_nodes:
            raise ValueError(
                f"truth has {truth.size} values, mesh has "
                f"{self.mesh_.num_nodes} nodes")
        M = self.state_.M
        diff = self.q_ - truth
        return -float(np.sqrt((diff @ (M @ diff))
                              / (truth @ (M @ truth))))
