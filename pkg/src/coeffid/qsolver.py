"""Active-set Newton solver for the box-constrained coefficient update.

Each outer iteration of the driver hands this module the subproblem

    minimize  J(q) + (beta/2) ||q - p + lam/beta||^2_M
    subject to  lower <= q <= upper,

where J is the gradient misfit.  The update is semi-implicit: the quadratic
penalty is split through the lumped mass diagonal W so that every Newton
system carries the constant convex term beta*W while the difference
beta*(W - M) is frozen at the previous iterate.  Equivalently, each step is
an exact active-set Newton step on the objective augmented with the
positive semidefinite proximal term (beta/2) ||q - q_ref||^2_{W-M}.

The expanded Newton system in the unknowns (r, dq, eta_active),

    [  A    N^T   0    ] [ r   ]   [ 0  ]
    [ -N   beta*W P_A^T] [ dq  ] = [ d2 ]
    [  0    P_A   0    ] [ eta ]   [ d3 ]

is solved through a block factorization whose only nontrivial solve is the
reduced operator H = A + (1/beta) N^T Pi_I W^-1 Pi_I N, handled by PCG with
the state V-cycle as preconditioner.  Because W is diagonal, the coupling
block G = N^T W^-1 P_A^T (P_A W^-1 P_A^T)^-1 collapses to N^T P_A^T, i.e. a
masked application of N^T.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import assembly
from .linsolve import LinearSolverConfig, VCyclePreconditioner, pcg, schur_operator
from .mesh import Mesh, MeshHierarchy


@dataclass(frozen=True)
class BoxBounds:
    lower: float = 0.1
    upper: float = 5.0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower bound must be below upper bound")
        if self.lower <= 0.0:
            raise ValueError("lower bound must be positive")


@dataclass
class NewtonConfig:
    tol: float = 1e-3            # stationarity residual target
    max_inner: int = 10
    c: float | None = None       # complementarity scaling, defaults to beta
    clamp_floor: float | None = None  # defaults to bounds.lower / 100
    h_tol: float = 1e-5          # PCG tolerance on the reduced system
    h_max_iters: int = 2000


@dataclass(frozen=True)
class ActiveSets:
    plus: np.ndarray    # nodes predicted on the upper bound
    minus: np.ndarray   # nodes predicted on the lower bound

    @property
    def active(self) -> np.ndarray:
        return self.plus | self.minus

    @property
    def inactive(self) -> np.ndarray:
        return ~self.active


def active_sets(q: np.ndarray, eta: np.ndarray, bounds: BoxBounds,
                c: float) -> ActiveSets:
    """Predict the bound-active nodes from the primal-dual pair."""
    if c <= 0.0:
        raise ValueError("complementarity scaling c must be positive")
    plus = eta + c * (q - bounds.upper) > 0.0
    minus = eta + c * (q - bounds.lower) < 0.0
    return ActiveSets(plus=plus, minus=minus)


@dataclass
class KktResidual:
    stationarity: np.ndarray
    complementarity: np.ndarray
    norm: float


def kkt_residual(q: np.ndarray, eta: np.ndarray, q_ref: np.ndarray,
                 p_ref: np.ndarray, lam: np.ndarray, grad: np.ndarray,
                 M: sp.csr_matrix, W: np.ndarray, beta: float,
                 bounds: BoxBounds, c: float) -> KktResidual:
    """Residual of the semi-implicit first-order system.

    The first component measures stationarity of the proximal objective in
    the inverse lumped-mass norm; the second is the nonsmooth
    complementarity function for the box constraints.
    """
    e1 = (-grad - beta * W * (q - q_ref)
          - beta * (M @ (q_ref - p_ref + lam / beta)) + eta)
    e2 = (eta - np.maximum(0.0, eta + c * (q - bounds.upper))
          - np.minimum(0.0, eta + c * (q - bounds.lower)))
    norm = max(float(np.sqrt(np.sum(e1 * e1 / W))),
               float(np.linalg.norm(e2)))
    return KktResidual(stationarity=e1, complementarity=e2, norm=norm)


@dataclass
class NewtonStepResult:
    dq: np.ndarray            # coefficient increment, all nodes
    eta_active: np.ndarray    # multiplier on the active nodes, index order
    r: np.ndarray             # state-perturbation variable (warm-start fodder)
    h_iterations: int


def newton_step(A: sp.csr_matrix, N: sp.csr_matrix, W: np.ndarray,
                beta: float, sets: ActiveSets, d2: np.ndarray,
                d3: np.ndarray, preconditioner=None,
                h_cfg: LinearSolverConfig | None = None,
                r0: np.ndarray | None = None) -> NewtonStepResult:
    """Solve the expanded Newton system by the block factorization.

    ``d2`` is the full-length second right-hand side, ``d3`` the active-set
    constraint values in active-index order.  Only the reduced solve is
    iterative; every other factor application is diagonal or a masked
    matvec, and the active constraints are satisfied exactly regardless of
    the reduced-solve tolerance.
    """
    act = sets.active
    idx = np.flatnonzero(act)
    if d3.shape != (idx.size,):
        raise ValueError(f"d3 has shape {d3.shape}, expected ({idx.size},)")

    # forward substitution through the left factor
    e3 = d3 - d2[idx] / W[idx] / beta
    lifted = d2 / (beta * W)
    lifted_active = np.zeros_like(d2)
    lifted_active[idx] = e3
    e1 = -(N.T @ (lifted + lifted_active))

    H = schur_operator(A, N, W, sets.inactive, beta)
    res = pcg(H, e1, preconditioner=preconditioner,
              cfg=h_cfg or LinearSolverConfig(tol=1e-5), x0=r0)
    r = res.x

    # diagonal middle block, then back substitution through the right factor
    Nr = N @ r
    eta_active = -beta * W[idx] * e3 + Nr[idx]
    dq = lifted + Nr / (beta * W)
    dq[idx] -= eta_active / (beta * W[idx])
    return NewtonStepResult(dq=dq, eta_active=eta_active, r=r,
                            h_iterations=res.iterations)


@dataclass
class QSubproblemResult:
    q: np.ndarray
    eta: np.ndarray
    u: np.ndarray               # interior state at the returned coefficient
    grads: np.ndarray           # its per-triangle gradients
    gradient: np.ndarray        # misfit derivative at the returned coefficient
    iterations: int
    pcg_state: int
    pcg_h: int
    kkt_norm: float
    converged: bool
    timings: dict = field(default_factory=dict)


def solve_q_subproblem(mesh: Mesh, obs: np.ndarray, f, q_ref: np.ndarray,
                       p_ref: np.ndarray, lam: np.ndarray, eta0: np.ndarray,
                       beta: float, bounds: BoxBounds,
                       M: sp.csr_matrix, W: np.ndarray,
                       cfg: NewtonConfig | None = None,
                       state_cfg: LinearSolverConfig | None = None,
                       hierarchy: MeshHierarchy | None = None,
                       u0: np.ndarray | None = None) -> QSubproblemResult:
    """Run the active-set Newton iteration for one coefficient update.

    Starts from ``q_ref`` (the previous outer iterate) and the carried-over
    multiplier ``eta0``.  Returns the final pair together with the state and
    misfit derivative at it, so the caller can reuse them.
    """
    cfg = cfg or NewtonConfig()
    state_cfg = state_cfg or LinearSolverConfig(tol=1e-10)
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    c = cfg.c if cfg.c is not None else beta
    floor = cfg.clamp_floor if cfg.clamp_floor is not None else bounds.lower / 100.0
    h_cfg = LinearSolverConfig(tol=cfg.h_tol, max_iters=cfg.h_max_iters)

    q = np.array(q_ref, dtype=float)
    eta = np.array(eta0, dtype=float)
    prox_pull = beta * (M @ (q_ref - p_ref + lam / beta))

    timings = {"a_assembly": 0.0, "n_assembly": 0.0,
               "state_system": 0.0, "h_system": 0.0}
    pcg_state = 0
    pcg_h = 0

    def state_at(qv, x0):
        nonlocal pcg_state
        t0 = time.perf_counter()
        A = assembly.assemble_stiffness(mesh, qv)
        timings["a_assembly"] += time.perf_counter() - t0
        precond = (VCyclePreconditioner(hierarchy, A)
                   if hierarchy is not None else None)
        t0 = time.perf_counter()
        res = pcg(A, assembly.assemble_load(mesh, f), preconditioner=precond,
                  cfg=state_cfg, x0=x0)
        timings["state_system"] += time.perf_counter() - t0
        pcg_state += res.iterations
        return A, precond, res.x

    A, precond, u = state_at(q, u0)
    grads = assembly.state_gradients(mesh, u)
    grad = assembly.misfit_gradient(mesh, grads, obs)

    iterations = 0
    kkt_norm = np.inf
    converged = False
    r_prev: np.ndarray | None = None
    while iterations < cfg.max_inner:
        sets = active_sets(q, eta, bounds, c)
        t0 = time.perf_counter()
        N = assembly.assemble_coupling(mesh, grads)
        timings["n_assembly"] += time.perf_counter() - t0

        d2 = -grad - beta * W * (q - q_ref) - prox_pull
        idx = np.flatnonzero(sets.active)
        d3 = np.where(sets.plus[idx], bounds.upper, bounds.lower) - q[idx]

        t0 = time.perf_counter()
        step = newton_step(A, N, W, beta, sets, d2, d3,
                           preconditioner=precond, h_cfg=h_cfg, r0=r_prev)
        timings["h_system"] += time.perf_counter() - t0
        pcg_h += step.h_iterations
        r_prev = step.r

        q = np.maximum(floor, q + step.dq)
        eta = np.zeros_like(eta)
        eta[idx] = step.eta_active
        iterations += 1

        A, precond, u = state_at(q, u)
        grads = assembly.state_gradients(mesh, u)
        grad = assembly.misfit_gradient(mesh, grads, obs)
        kkt = kkt_residual(q, eta, q_ref, p_ref, lam, grad, M, W, beta,
                           bounds, c)
        kkt_norm = kkt.norm
        if kkt_norm < cfg.tol:
            converged = True
            break

    return QSubproblemResult(q=q, eta=eta, u=u, grads=grads, gradient=grad,
                             iterations=iterations, pcg_state=pcg_state,
                             pcg_h=pcg_h, kkt_norm=kkt_norm,
                             converged=converged, timings=timings)
