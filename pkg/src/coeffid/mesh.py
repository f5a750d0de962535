"""Uniform triangulations of the unit square and their refinement hierarchy.

Conventions (load-bearing, relied on by every other module):

* The domain is the open unit square (0, 1) x (0, 1).
* ``n`` is the number of subdivisions per side, ``h = 1/n``.
* Nodes sit at ``(i*h, j*h)`` and are ordered lexicographically with the
  x index running fastest: node id = ``j*(n+1) + i``.
* Every cell is split by its lower-left to upper-right diagonal.  Cell
  ``(i, j)`` (id ``j*n + i``) produces triangle ``2*cell`` with vertices
  (ll, lr, ur) and triangle ``2*cell + 1`` with vertices (ll, ur, ul),
  both counterclockwise.  All triangles have area ``h^2 / 2``.
* Interior nodes are those with ``0 < i < n`` and ``0 < j < n``; fields
  attached to the homogeneous Dirichlet problem live on them in the same
  lexicographic order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Mesh:
    """Immutable uniform right triangulation of the unit square.

    Attributes
    ----------
    n : int
        Subdivisions per side.
    h : float
        Mesh width ``1/n``.
    nodes : ndarray, shape ((n+1)**2, 2)
        Node coordinates in lexicographic order (x fastest).
    triangles : ndarray, shape (2*n*n, 3)
        Vertex ids of each triangle, counterclockwise.
    areas : ndarray, shape (2*n*n,)
        Triangle areas (all equal to ``h*h/2``).
    basis_grads : ndarray, shape (2*n*n, 3, 2)
        Constant gradient of the hat function of each local vertex.
    interior : ndarray, shape ((n-1)**2,)
        Global ids of interior nodes, lexicographic.
    interior_index : ndarray, shape ((n+1)**2,)
        Position of each node in ``interior``, -1 for boundary nodes.
    """

    n: int
    h: float
    nodes: np.ndarray
    triangles: np.ndarray
    areas: np.ndarray
    basis_grads: np.ndarray
    interior: np.ndarray
    interior_index: np.ndarray

    @property
    def num_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def num_triangles(self) -> int:
        return 2 * self.n * self.n

    @property
    def num_interior(self) -> int:
        return (self.n - 1) ** 2


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build_uniform_mesh(n: int) -> Mesh:
    """Build the uniform right triangulation with ``n`` subdivisions per side."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    h = 1.0 / n

    side = np.arange(n + 1) * h
    xs, ys = np.meshgrid(side, side, indexing="xy")
    nodes = np.column_stack([xs.ravel(), ys.ravel()])

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ii = ii.ravel()
    jj = jj.ravel()
    ll = jj * (n + 1) + ii
    lr = ll + 1
    ul = ll + (n + 1)
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    p = nodes[triangles]  # (nt, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    areas = 0.5 * det  # positive by the CCW ordering

    # grad of the barycentric basis: rotate opposite edges by 90 degrees
    grads = np.empty((triangles.shape[0], 3, 2))
    for k in range(3):
        a = p[:, (k + 1) % 3]
        b = p[:, (k + 2) % 3]
        grads[:, k, 0] = (a[:, 1] - b[:, 1]) / det
        grads[:, k, 1] = (b[:, 0] - a[:, 0]) / det

    node_i = np.tile(np.arange(n + 1), n + 1)
    node_j = np.repeat(np.arange(n + 1), n + 1)
    is_interior = (node_i > 0) & (node_i < n) & (node_j > 0) & (node_j < n)
    interior = np.flatnonzero(is_interior)
    interior_index = np.full((n + 1) ** 2, -1, dtype=np.int64)
    interior_index[interior] = np.arange(interior.size)

    return Mesh(
        n=n,
        h=h,
        nodes=_freeze(nodes),
        triangles=_freeze(triangles),
        areas=_freeze(areas),
        basis_grads=_freeze(grads),
        interior=_freeze(interior),
        interior_index=_freeze(interior_index),
    )


def element_gradients(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Per-triangle gradient of the piecewise linear interpolant of ``nodal``.

    ``nodal`` holds one value per mesh node.  Returns an array of shape
    (num_triangles, 2) that is exact for piecewise linear fields.
    """
    nodal = np.asarray(nodal, dtype=float)
    if nodal.shape != (mesh.num_nodes,):
        raise ValueError(
            f"nodal field has shape {nodal.shape}, expected ({mesh.num_nodes},)"
        )
    return np.einsum("tk,tkd->td", nodal[mesh.triangles], mesh.basis_grads)


def expand_interior(mesh: Mesh, interior_values: np.ndarray) -> np.ndarray:
    """Zero-pad an interior (Dirichlet) field to all nodes."""
    interior_values = np.asarray(interior_values, dtype=float)
    if interior_values.shape != (mesh.num_interior,):
        raise ValueError(
            f"interior field has shape {interior_values.shape}, "
            f"expected ({mesh.num_interior},)"
        )
    full = np.zeros(mesh.num_nodes)
    full[mesh.interior] = interior_values
    return full


@dataclass(frozen=True)
class MeshHierarchy:
    """Nested meshes from coarse to fine with interpolation between levels.

    ``prolongations[l]`` maps nodal values on ``levels[l]`` to nodal values
    on ``levels[l+1]`` by piecewise linear interpolation, which is exact for
    linear functions.
    """

    levels: tuple[Mesh, ...]
    prolongations: tuple[sp.csr_matrix, ...]

    @property
    def fine(self) -> Mesh:
        return self.levels[-1]


def _prolongation(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    nc = coarse.n
    nf = fine.n
    assert nf == 2 * nc, "levels must double"

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    fi = np.tile(np.arange(nf + 1), nf + 1)
    fj = np.repeat(np.arange(nf + 1), nf + 1)
    fid = np.arange((nf + 1) ** 2)

    def cid(ci: np.ndarray, cj: np.ndarray) -> np.ndarray:
        return cj * (nc + 1) + ci

    even = (fi % 2 == 0) & (fj % 2 == 0)
    rows.append(fid[even])
    cols.append(cid(fi[even] // 2, fj[even] // 2))
    vals.append(np.ones(even.sum()))

    hmid = (fi % 2 == 1) & (fj % 2 == 0)  # on a horizontal coarse edge
    for shift in (-1, 1):
        rows.append(fid[hmid])
        cols.append(cid((fi[hmid] + shift) // 2, fj[hmid] // 2))
        vals.append(np.full(hmid.sum(), 0.5))

    vmid = (fi % 2 == 0) & (fj % 2 == 1)  # on a vertical coarse edge
    for shift in (-1, 1):
        rows.append(fid[vmid])
        cols.append(cid(fi[vmid] // 2, (fj[vmid] + shift) // 2))
        vals.append(np.full(vmid.sum(), 0.5))

    # cell centers lie on the lower-left/upper-right diagonal edge
    dmid = (fi % 2 == 1) & (fj % 2 == 1)
    for shift in (-1, 1):
        rows.append(fid[dmid])
        cols.append(cid((fi[dmid] + shift) // 2, (fj[dmid] + shift) // 2))
        vals.append(np.full(dmid.sum(), 0.5))

    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=((nf + 1) ** 2, (nc + 1) ** 2),
    )
    return P.tocsr()


def build_hierarchy(n: int, coarsest: int = 4) -> MeshHierarchy:
    """Build the doubling hierarchy below ``n``.

    Levels are obtained by halving ``n`` while it stays even and at least
    ``coarsest`` after halving; if no halving is possible the hierarchy has a
    single level and coarse solves degenerate to direct solves on it.
    """
    if coarsest < 1:
        raise ValueError("coarsest must be >= 1")
    ns = [n]
    while ns[-1] % 2 == 0 and ns[-1] // 2 >= coarsest:
        ns.append(ns[-1] // 2)
    ns.reverse()
    levels = tuple(build_uniform_mesh(m) for m in ns)
    prolongations = tuple(
        _prolongation(levels[l], levels[l + 1]) for l in range(len(levels) - 1)
    )
    return MeshHierarchy(levels=levels, prolongations=prolongations)
