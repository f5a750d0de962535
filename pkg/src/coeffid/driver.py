"""Outer splitting loop tying the two subproblem solvers together.

Each sweep solves the coefficient subproblem (active-set Newton), denoises
the pulled iterate (TV prox or external bridge), and advances the
multiplier by beta times the primal gap.  A fixed number of sweeps is run
by default; an optional primal-residual tolerance can stop early but is
off unless configured.  The Newton multiplier eta is carried across
sweeps as the warm start of the next active-set solve, as is the state
solution for the inner PCG.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import assembly
from .linsolve import LinearSolverConfig
from .mesh import Mesh, MeshHierarchy, build_hierarchy
from .psolver import BridgeEndpoint, DenoiserSpec, solve_p_subproblem
from .qsolver import BoxBounds, NewtonConfig, solve_q_subproblem

HIERARCHY_MIN_N = 8


@dataclass(frozen=True)
class AdmmConfig:
    beta: float
    denoiser: DenoiserSpec
    outer_iters: int = 50
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    lin_state: LinearSolverConfig = field(default_factory=LinearSolverConfig)
    lin_h: LinearSolverConfig | None = None
    bounds: BoxBounds = field(default_factory=BoxBounds)
    f_const: float = 10.0
    primal_tol: float | None = None

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be nonnegative")

    def newton_config(self) -> NewtonConfig:
        if self.lin_h is None:
            return self.newton
        return replace(self.newton, h_tol=self.lin_h.tol,
                       h_max_iters=self.lin_h.max_iters)


@dataclass(frozen=True)
class Metrics:
    rel_error: float | None
    grad_misfit: float | None


@dataclass
class HistoryRecord:
    iteration: int
    metrics: Metrics
    kkt_norm: float
    newton_steps: int
    pcg_state: int
    pcg_h: int
    wall_ms: float


@dataclass
class AdmmState:
    mesh: Mesh
    obs: np.ndarray
    cfg: AdmmConfig
    q: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    eta: np.ndarray
    M: "object"
    W: np.ndarray
    hierarchy: MeshHierarchy | None
    endpoint: BridgeEndpoint | None = None
    truth: np.ndarray | None = None
    clean_grads: np.ndarray | None = None
    u: np.ndarray | None = None
    grads: np.ndarray | None = None
    k: int = 0
    history: list[HistoryRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def primal_residual(self) -> float:
        return float(np.linalg.norm(self.q - self.p))


def admm_init(mesh: Mesh, obs: np.ndarray, cfg: AdmmConfig,
              endpoint: BridgeEndpoint | None = None,
              truth: np.ndarray | None = None) -> AdmmState:
    """Fresh state: q = 1, p = 0, multipliers 0, mass matrices ready."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (mesh.num_triangles, 2):
        raise ValueError(
            f"observation shape {obs.shape} does not match the mesh "
            f"({mesh.num_triangles} triangles)")
    nn = mesh.num_nodes
    hierarchy = (build_hierarchy(mesh.n)
                 if mesh.n >= HIERARCHY_MIN_N and mesh.n % 2 == 0 else None)
    state = AdmmState(
        mesh=mesh, obs=obs, cfg=cfg,
        q=np.ones(nn), p=np.zeros(nn), lam=np.zeros(nn), eta=np.zeros(nn),
        M=assembly.assemble_mass(mesh), W=assembly.lumped_mass(mesh),
        hierarchy=hierarchy, endpoint=endpoint, truth=truth)
    if truth is not None:
        state.clean_grads = assembly.state_gradients(
            mesh, assembly.forward_solve(
                mesh, truth, cfg.f_const,
                cfg=LinearSolverConfig(tol=1e-12)).x)
    return state


def compute_metrics(mesh: Mesh, state: AdmmState,
                    obs_clean: np.ndarray | None = None,
                    truth: np.ndarray | None = None) -> Metrics:
    """Relative coefficient error in the mass-matrix norm and the h-norm
    data misfit, each None when its reference is unknown."""
    truth = state.truth if truth is None else truth
    obs_clean = state.clean_grads if obs_clean is None else obs_clean
    rel_error = None
    if truth is not None:
        diff = state.q - truth
        num = float(diff @ (state.M @ diff))
        den = float(truth @ (state.M @ truth))
        rel_error = float(np.sqrt(num / den))
    grad_misfit = None
    if obs_clean is not None:
        if state.grads is None:
            res = assembly.forward_solve(mesh, state.q, state.cfg.f_const,
                                         cfg=state.cfg.lin_state)
            state.u = res.x
            state.grads = assembly.state_gradients(mesh, res.x)
        dg = state.grads - obs_clean
        squares = (dg ** 2).sum(axis=1)
        grad_misfit = float(
            mesh.h * np.sqrt(np.sum(mesh.areas * squares)))
    return Metrics(rel_error=rel_error, grad_misfit=grad_misfit)


def admm_iterate(state: AdmmState, cfg: AdmmConfig | None = None) -> AdmmState:
    """One outer sweep: coefficient step, denoising step, multiplier step."""
    cfg = state.cfg if cfg is None else cfg
    t0 = time.perf_counter()
    try:
        qres = solve_q_subproblem(
            state.mesh, state.obs, cfg.f_const,
            q_ref=state.q, p_ref=state.p, lam=state.lam, eta0=state.eta,
            beta=cfg.beta, bounds=cfg.bounds, M=state.M, W=state.W,
            cfg=cfg.newton_config(), state_cfg=cfg.lin_state,
            hierarchy=state.hierarchy, u0=state.u)
    except Exception as exc:
        raise RuntimeError(
            f"coefficient subproblem failed at outer iteration "
            f"{state.k + 1}") from exc
    state.q = qres.q
    state.eta = qres.eta
    state.u = qres.u
    state.grads = qres.grads

    t_den = time.perf_counter()
    try:
        state.p = solve_p_subproblem(state.q, state.lam, cfg.beta,
                                     cfg.denoiser, cfg.bounds,
                                     endpoint=state.endpoint)
    except Exception as exc:
        raise RuntimeError(
            f"denoising subproblem failed at outer iteration "
            f"{state.k + 1}") from exc
    denoiser_s = time.perf_counter() - t_den

    state.lam = state.lam + cfg.beta * (state.q - state.p)
    state.k += 1

    for key, val in qres.timings.items():
        state.timings[key] = state.timings.get(key, 0.0) + val
    state.timings["denoiser"] = (state.timings.get("denoiser", 0.0)
                                 + denoiser_s)

    metrics = compute_metrics(state.mesh, state)
    state.history.append(HistoryRecord(
        iteration=state.k, metrics=metrics, kkt_norm=qres.kkt_norm,
        newton_steps=qres.iterations, pcg_state=qres.pcg_state,
        pcg_h=qres.pcg_h,
        wall_ms=(time.perf_counter() - t0) * 1e3))
    return state


def run(mesh: Mesh, obs: np.ndarray, cfg: AdmmConfig,
        truth: np.ndarray | None = None,
        endpoint: BridgeEndpoint | None = None
        ) -> tuple[AdmmState, list[Metrics]]:
    """Full splitting run: outer_iters sweeps, no early stop unless a
    primal tolerance is configured."""
    state = admm_init(mesh, obs, cfg, endpoint=endpoint, truth=truth)
    for _ in range(cfg.outer_iters):
        admm_iterate(state)
        if (cfg.primal_tol is not None
                and state.primal_residual <= cfg.primal_tol):
            break
    return state, [record.metrics for record in state.history]
