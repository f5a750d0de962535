"""Preconditioned conjugate gradients and a geometric multigrid V-cycle.

The V-cycle is built once per system matrix from the mesh hierarchy
(Galerkin coarse matrices, damped Jacobi smoothing, direct solve on the
coarsest level) and is applied as a symmetric positive definite
preconditioner inside PCG.  The same object also preconditions the reduced
Newton systems, which share the sparsity and scale of the state matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import MeshHierarchy

Apply = Callable[[np.ndarray], np.ndarray]


class SolverFailure(RuntimeError):
    """Iteration budget exhausted; carries the best iterate seen."""

    def __init__(self, message: str, *, iterations: int, residual: float,
                 best: np.ndarray | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.best = best


class OperatorNotSPD(SolverFailure):
    """A curvature or preconditioner inner product came out nonpositive."""


@dataclass
class LinearSolverConfig:
    tol: float = 1e-10          # relative residual reduction
    max_iters: int = 2000


@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    residual: float


def _as_apply(A) -> Apply:
    if callable(A):
        return A
    if sp.issparse(A) or isinstance(A, np.ndarray):
        return lambda v: A @ v
    raise ValueError(f"cannot apply operator of type {type(A)!r}")


def pcg(A, b: np.ndarray, preconditioner=None, cfg: LinearSolverConfig | None = None,
        x0: np.ndarray | None = None) -> PcgResult:
    """Conjugate gradients for SPD operators with optional preconditioning.

    Convergence is declared when the true residual norm drops below
    ``cfg.tol * ||b||``.  A nonpositive curvature ``p^T A p`` raises
    :class:`OperatorNotSPD`; running out of iterations raises
    :class:`SolverFailure` with the best iterate attached.
    """
    cfg = cfg or LinearSolverConfig()
    apply_A = _as_apply(A)
    apply_M = _as_apply(preconditioner) if preconditioner is not None else None

    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return PcgResult(np.zeros_like(b), 0, 0.0)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x)
    rnorm = float(np.linalg.norm(r))
    if rnorm <= cfg.tol * bnorm:
        return PcgResult(x, 0, rnorm)

    z = apply_M(r) if apply_M is not None else r
    rho = float(r @ z)
    if rho <= 0.0:
        raise OperatorNotSPD("preconditioner is not positive definite",
                             iterations=0, residual=rnorm, best=x)
    p = z.copy()
    for k in range(1, cfg.max_iters + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise OperatorNotSPD("operator is not positive definite",
                                 iterations=k, residual=rnorm, best=x)
        alpha = rho / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rnorm = float(np.linalg.norm(r))
        if rnorm <= cfg.tol * bnorm:
            return PcgResult(x, k, rnorm)
        z = apply_M(r) if apply_M is not None else r
        rho_new = float(r @ z)
        if rho_new <= 0.0:
            raise OperatorNotSPD("preconditioner is not positive definite",
                                 iterations=k, residual=rnorm, best=x)
        p = z + (rho_new / rho) * p
        rho = rho_new
    raise SolverFailure(
        f"pcg did not reach tol={cfg.tol:g} within {cfg.max_iters} iterations "
        f"(residual {rnorm / bnorm:.3e} relative)",
        iterations=cfg.max_iters, residual=rnorm, best=x)


@dataclass
class MultigridConfig:
    smoother_sweeps: int = 2    # applied before and after coarse correction
    damping: float = 2.0 / 3.0


class VCyclePreconditioner:
    """Symmetric geometric V-cycle for interior-node systems.

    Coarse matrices are Galerkin products through the interior-restricted
    interpolation operators; the coarsest level is solved directly.  With a
    single-level hierarchy the application degenerates to a direct solve,
    i.e. the exact inverse.
    """

    def __init__(self, hierarchy: MeshHierarchy, fine_matrix: sp.csr_matrix,
                 cfg: MultigridConfig | None = None):
        self.cfg = cfg or MultigridConfig()
        nfine = hierarchy.fine.num_interior
        if fine_matrix.shape != (nfine, nfine):
            raise ValueError(
                f"matrix shape {fine_matrix.shape} does not match the "
                f"{nfine} interior nodes of the fine level")

        self._prolong: list[sp.csr_matrix] = []
        for l, P in enumerate(hierarchy.prolongations):
            coarse, fine = hierarchy.levels[l], hierarchy.levels[l + 1]
            self._prolong.append(P[fine.interior, :][:, coarse.interior].tocsr())

        mats = [fine_matrix.tocsr()]
        for P in reversed(self._prolong):
            mats.append((P.T @ mats[-1] @ P).tocsr())
        mats.reverse()  # coarse to fine, aligned with hierarchy.levels
        self._matrices = mats
        self._diags = [np.asarray(A.diagonal()) for A in mats]
        self._coarse_lu = spla.splu(mats[0].tocsc())

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return self._cycle(len(self._matrices) - 1, b)

    def _cycle(self, level: int, b: np.ndarray) -> np.ndarray:
        if level == 0:
            return self._coarse_lu.solve(b)
        A = self._matrices[level]
        d = self._diags[level]
        om = self.cfg.damping
        x = np.zeros_like(b)
        for _ in range(self.cfg.smoother_sweeps):
            x = x + om * (b - A @ x) / d
        P = self._prolong[level - 1]
        x = x + P @ self._cycle(level - 1, P.T @ (b - A @ x))
        for _ in range(self.cfg.smoother_sweeps):
            x = x + om * (b - A @ x) / d
        return x


def schur_operator(A: sp.csr_matrix, N: sp.csr_matrix, lumped_diag: np.ndarray,
                   inactive_mask: np.ndarray, beta: float) -> Apply:
    """Matrix-free reduced Newton operator.

    Applies ``v -> A v + (1/beta) * N^T Pi_I W^-1 Pi_I N v`` where ``Pi_I``
    zeroes the entries of active nodes and ``W`` is the lumped mass diagonal.
    The operator is symmetric positive definite whenever ``A`` is.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    scale = np.where(inactive_mask, 1.0 / lumped_diag, 0.0) / beta
    NT = N.T.tocsr()

    def apply(v: np.ndarray) -> np.ndarray:
        w = N @ v
        return A @ v + NT @ (scale * w)

    return apply
