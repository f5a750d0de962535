"""P1 finite element assembly and the misfit functional.

Quadrature conventions, applied consistently everywhere:

* the coefficient is nodal and enters element integrals through its vertex
  mean, so ``int_tau q * const = |tau| * mean(q at vertices) * const``;
* a hat function integrates to ``|tau|/3`` against constants.

The misfit is ``0.5 * int q |grad u(q) - g|^2`` for per-triangle observed
gradients ``g``.  Its nodal derivative has the closed form

    d_i = sum over triangles at node i of (|tau|/3) *
          (0.5*|g|^2 - 0.5*|grad u|^2),

which is exact for the discrete energy whenever the observation field is
itself the gradient of a P1 function vanishing on the boundary, and is the
model derivative used by the Newton solver in all cases.  The coupling
matrix ties coefficient perturbations to state perturbations:
``N[i, j] = int phi_i * grad u . grad phi_j`` with rows over all nodes and
columns over interior nodes, so that the misfit curvature acts as
``dq -> -N r`` with ``A r = -N^T dq``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .linsolve import LinearSolverConfig, PcgResult, pcg
from .mesh import Mesh, element_gradients, expand_interior

_MASS_TEMPLATE = np.array([[2.0, 1.0, 1.0],
                           [1.0, 2.0, 1.0],
                           [1.0, 1.0, 2.0]]) / 12.0


def _check_nodal(mesh: Mesh, v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mesh.num_nodes,):
        raise ValueError(f"{name} has shape {v.shape}, "
                         f"expected ({mesh.num_nodes},)")
    return v


def _check_obs(mesh: Mesh, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (mesh.num_triangles, 2):
        raise ValueError(f"observation has shape {g.shape}, "
                         f"expected ({mesh.num_triangles}, 2)")
    return g


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent mass matrix over all nodes."""
    tri = mesh.triangles
    local = mesh.areas[:, None, None] * _MASS_TEMPLATE[None, :, :]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    M = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(mesh.num_nodes, mesh.num_nodes))
    return M.tocsr()


def lumped_mass(mesh: Mesh) -> np.ndarray:
    """Row-sum lumped mass diagonal (all nodes, strictly positive)."""
    w = np.zeros(mesh.num_nodes)
    np.add.at(w, mesh.triangles.ravel(),
              np.repeat(mesh.areas / 3.0, 3))
    return w


def assemble_stiffness(mesh: Mesh, q: np.ndarray) -> sp.csr_matrix:
    """Weighted stiffness matrix on interior nodes.

    The weight is the vertex mean of the nodal coefficient ``q``, which must
    be strictly positive everywhere.
    """
    q = _check_nodal(mesh, q, "coefficient")
    if np.any(q <= 0.0):
        raise ValueError("coefficient must be strictly positive")
    tri = mesh.triangles
    qbar = q[tri].mean(axis=1)
    local = (qbar * mesh.areas)[:, None, None] * np.einsum(
        "tkd,tld->tkl", mesh.basis_grads, mesh.basis_grads)
    imap = mesh.interior_index
    rows = imap[np.repeat(tri, 3, axis=1).ravel()]
    cols = imap[np.tile(tri, (1, 3)).ravel()]
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix((local.ravel()[keep], (rows[keep], cols[keep])),
                      shape=(mesh.num_interior, mesh.num_interior))
    return A.tocsr()


def assemble_load(mesh: Mesh, f, all_nodes: bool = False) -> np.ndarray:
    """Load vector for a constant or nodal right-hand side.

    Constant ``f`` uses the exact formula ``f * |tau|/3`` per vertex; a nodal
    ``f`` goes through the consistent mass matrix.  Interior rows by default.
    """
    if np.isscalar(f):
        b = float(f) * lumped_mass(mesh)
    else:
        b = assemble_mass(mesh) @ _check_nodal(mesh, f, "right-hand side")
    return b if all_nodes else b[mesh.interior]


def forward_solve(mesh: Mesh, q: np.ndarray, f,
                  cfg: LinearSolverConfig | None = None,
                  preconditioner=None,
                  x0: np.ndarray | None = None,
                  matrix: sp.csr_matrix | None = None) -> PcgResult:
    """Solve the state equation for interior nodal values of ``u``.

    ``matrix`` may pass a previously assembled stiffness matrix for reuse.
    Returns the PCG result; ``result.x`` is the interior field.
    """
    A = assemble_stiffness(mesh, q) if matrix is None else matrix
    b = assemble_load(mesh, f)
    return pcg(A, b, preconditioner=preconditioner, cfg=cfg, x0=x0)


def state_gradients(mesh: Mesh, u_interior: np.ndarray) -> np.ndarray:
    """Per-triangle gradient of an interior (Dirichlet) field."""
    return element_gradients(mesh, expand_interior(mesh, u_interior))


def misfit_energy(mesh: Mesh, q: np.ndarray, grads: np.ndarray,
                  obs: np.ndarray) -> float:
    """Weighted misfit ``0.5 * sum |tau| qbar |grad u - g|^2``."""
    q = _check_nodal(mesh, q, "coefficient")
    obs = _check_obs(mesh, obs)
    qbar = q[mesh.triangles].mean(axis=1)
    diff = grads - obs
    return float(0.5 * np.sum(mesh.areas * qbar * np.einsum("td,td->t", diff, diff)))


def misfit_gradient(mesh: Mesh, grads: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Nodal derivative of the misfit, over all nodes."""
    obs = _check_obs(mesh, obs)
    s = 0.5 * (np.einsum("td,td->t", obs, obs)
               - np.einsum("td,td->t", grads, grads))
    g = np.zeros(mesh.num_nodes)
    np.add.at(g, mesh.triangles.ravel(),
              np.repeat(mesh.areas / 3.0 * s, 3))
    return g


def assemble_coupling(mesh: Mesh, grads: np.ndarray) -> sp.csr_matrix:
    """Coefficient-to-state coupling matrix for the given state gradients.

    Shape (num_nodes, num_interior); row ``i`` carries the hat-function
    weight ``|tau|/3`` of node ``i``, column ``j`` the dot product of the
    state gradient with ``grad phi_j``.
    """
    tri = mesh.triangles
    # value[t, a, b] = (|tau|/3) * (grad u_t . grad phi_b)
    dots = np.einsum("td,tbd->tb", grads, mesh.basis_grads)
    vals = (mesh.areas / 3.0)[:, None, None] * dots[:, None, :]
    vals = np.broadcast_to(vals, (tri.shape[0], 3, 3))
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = mesh.interior_index[np.tile(tri, (1, 3)).ravel()]
    keep = cols >= 0
    N = sp.coo_matrix((vals.ravel()[keep], (rows[keep], cols[keep])),
                      shape=(mesh.num_nodes, mesh.num_interior))
    return N.tocsr()
