"""Independent reference implementations used as test oracles.

Everything here recomputes quantities from first principles with dense
linear algebra and quadrature, deliberately avoiding the package's own
assembly and solver paths so that agreement is evidence, not tautology.
"""
from __future__ import annotations

import numpy as np


def plane_gradient(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Gradient of the affine function through three (point, value) pairs."""
    A = np.column_stack([np.ones(3), points])
    coeff = np.linalg.solve(A, values)
    return coeff[1:]


def plane_gradients_all(mesh, nodal: np.ndarray) -> np.ndarray:
    out = np.empty((mesh.num_triangles, 2))
    for t, tri in enumerate(mesh.triangles):
        out[t] = plane_gradient(mesh.nodes[tri], nodal[tri])
    return out


def dense_mass(mesh) -> np.ndarray:
    """Consistent mass matrix via the edge-midpoint rule (exact for quadratics)."""
    nn = mesh.num_nodes
    M = np.zeros((nn, nn))
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        area = 0.5 * abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                         - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]))
        mids = np.array([(p[0] + p[1]) / 2, (p[1] + p[2]) / 2, (p[2] + p[0]) / 2])
        # hat function of local vertex k at the three edge midpoints
        A = np.column_stack([np.ones(3), p])
        for k in range(3):
            ek = np.zeros(3)
            ek[k] = 1.0
            ck = np.linalg.solve(A, ek)
            phik = ck[0] + mids @ ck[1:]
            for l in range(3):
                el = np.zeros(3)
                el[l] = 1.0
                cl = np.linalg.solve(A, el)
                phil = cl[0] + mids @ cl[1:]
                M[tri[k], tri[l]] += area * np.mean(phik * phil)
    return M


def dense_stiffness(mesh, q: np.ndarray) -> np.ndarray:
    """All-node weighted stiffness matrix, vertex-averaged coefficient."""
    nn = mesh.num_nodes
    K = np.zeros((nn, nn))
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        area = 0.5 * abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                         - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]))
        qbar = np.mean(q[tri])
        grads = np.empty((3, 2))
        for k in range(3):
            ek = np.zeros(3)
            ek[k] = 1.0
            grads[k] = plane_gradient(p, ek)
        K[np.ix_(tri, tri)] += qbar * area * (grads @ grads.T)
    return K


def dense_load_const(mesh, f_const: float) -> np.ndarray:
    """All-node load vector for constant right-hand side."""
    b = np.zeros(mesh.num_nodes)
    for t, tri in enumerate(mesh.triangles):
        b[tri] += f_const * mesh.areas[t] / 3.0
    return b


def dense_forward(mesh, q: np.ndarray, f_const: float) -> np.ndarray:
    """Interior solution of the state equation by dense LU."""
    K = dense_stiffness(mesh, q)
    idx = mesh.interior
    b = dense_load_const(mesh, f_const)[idx]
    return np.linalg.solve(K[np.ix_(idx, idx)], b)


def dense_misfit_energy(mesh, q: np.ndarray, u_interior: np.ndarray,
                        obs: np.ndarray) -> float:
    full = np.zeros(mesh.num_nodes)
    full[mesh.interior] = u_interior
    grads = plane_gradients_all(mesh, full)
    qbar = np.mean(q[mesh.triangles], axis=1)
    diff = grads - obs
    return float(0.5 * np.sum(mesh.areas * qbar * np.sum(diff * diff, axis=1)))


def dense_misfit_gradient(mesh, q: np.ndarray, f_const: float,
                          obs: np.ndarray) -> np.ndarray:
    """Nodal derivative formula evaluated with dense solves."""
    u = dense_forward(mesh, q, f_const)
    full = np.zeros(mesh.num_nodes)
    full[mesh.interior] = u
    grads = plane_gradients_all(mesh, full)
    s = 0.5 * (np.sum(obs * obs, axis=1) - np.sum(grads * grads, axis=1))
    g = np.zeros(mesh.num_nodes)
    for t, tri in enumerate(mesh.triangles):
        g[tri] += mesh.areas[t] / 3.0 * s[t]
    return g


def projected_gradient_box(objective, objective_grad, x0: np.ndarray,
                           lo: float, hi: float, lipschitz0: float = 1.0,
                           tol: float = 1e-10,
                           max_iters: int = 200000) -> np.ndarray:
    """Accelerated projected gradient over a box with backtracking.

    ``objective``/``objective_grad`` evaluate the smooth objective and its
    gradient.  The local curvature estimate doubles until the standard
    sufficient-decrease inequality holds, and momentum restarts whenever it
    points uphill.  Stops when the projected step falls below ``tol`` in the
    infinity norm.
    """
    L = lipschitz0
    x = np.clip(x0, lo, hi)
    y = x.copy()
    tk = 1.0
    for _ in range(max_iters):
        g = objective_grad(y)
        fy = objective(y)
        while True:
            x_new = np.clip(y - g / L, lo, hi)
            d = x_new - y
            if objective(x_new) <= fy + g @ d + 0.5 * L * (d @ d) + 1e-15:
                break
            L *= 2.0
        if np.max(np.abs(x_new - x)) < tol and np.max(np.abs(x_new - y)) < tol:
            return x_new
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y_next = x_new + (tk - 1.0) / t_new * (x_new - x)
        if np.dot(y_next - x_new, x_new - x) < 0:
            y_next = x_new.copy()
            t_new = 1.0
        x, y, tk = x_new, y_next, t_new
        L *= 0.9  # allow the estimate to relax between steps
    raise AssertionError("projected gradient oracle did not converge")


def tv_value(x: np.ndarray) -> float:
    """Isotropic total variation with forward differences, reflexive edge."""
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:-1, :] = x[1:, :] - x[:-1, :]
    dy[:, :-1] = x[:, 1:] - x[:, :-1]
    return float(np.sum(np.sqrt(dx * dx + dy * dy)))


def tv_prox_pdhg(z: np.ndarray, theta: float, tol: float = 1e-12,
                 max_iters: int = 2000000) -> np.ndarray:
    """First-order primal-dual solver for the TV proximal problem.

    Minimizes ``theta * TV(x) + 0.5 * ||x - z||^2`` with the Chambolle-Pock
    iteration; structurally different from the dual projection scheme it is
    used to check.
    """
    m, n = z.shape

    def grad(x):
        gx = np.zeros((m, n))
        gy = np.zeros((m, n))
        gx[:-1, :] = x[1:, :] - x[:-1, :]
        gy[:, :-1] = x[:, 1:] - x[:, :-1]
        return gx, gy

    def div(px, py):
        d = np.zeros((m, n))
        d[0, :] += px[0, :]
        d[1:-1, :] += px[1:-1, :] - px[:-2, :]
        d[-1, :] -= px[-2, :]
        d[:, 0] += py[:, 0]
        d[:, 1:-1] += py[:, 1:-1] - py[:, :-2]
        d[:, -1] -= py[:, -2]
        return d

    # the quadratic coupling term is 1-strongly convex, so the accelerated
    # step-size schedule applies; periodic restarts turn its sublinear tail
    # into geometric convergence, and progress is judged between restarts
    # so a shrinking step size cannot trigger the stop early
    L2 = 8.0
    block = 2000
    x = z.copy()
    px = np.zeros((m, n))
    py = np.zeros((m, n))
    done = 0
    while done < max_iters:
        x_block = x.copy()
        tau = 1.0 / np.sqrt(L2)
        sig = 1.0 / np.sqrt(L2)
        xbar = x.copy()
        for _ in range(min(block, max_iters - done)):
            gx, gy = grad(xbar)
            px = px + sig * gx
            py = py + sig * gy
            norm = np.maximum(1.0, np.sqrt(px * px + py * py) / theta)
            px /= norm
            py /= norm
            x_old = x
            x = (x + tau * div(px, py) + tau * z) / (1.0 + tau)
            momentum = 1.0 / np.sqrt(1.0 + 2.0 * tau)
            tau *= momentum
            sig /= momentum
            xbar = x + momentum * (x - x_old)
        done += block
        if np.max(np.abs(x - x_block)) < tol:
            return x
    raise AssertionError("primal-dual TV oracle did not converge")
