import numpy as np
import pytest
import scipy.sparse as sp

from coeffid import assembly as asm
from coeffid.linsolve import LinearSolverConfig
from coeffid.mesh import build_uniform_mesh, expand_interior

from oracles import (
    dense_forward,
    dense_mass,
    dense_misfit_energy,
    dense_misfit_gradient,
    dense_stiffness,
)


def random_p1_observation(mesh, rng):
    """Gradient field of a random P1 function vanishing on the boundary.

    Such observations keep the closed-form misfit derivative exact for the
    discrete energy, which the finite difference oracles rely on.
    """
    w = expand_interior(mesh, rng.standard_normal(mesh.num_interior))
    from coeffid.mesh import element_gradients
    return element_gradients(mesh, w)


# ---------------------------------------------------------------- mass


def test_mass_total_is_domain_area():
    m = build_uniform_mesh(2)
    assert np.isclose(asm.assemble_mass(m).sum(), 1.0, atol=1e-14)


def test_mass_interior_row_sum_is_h_squared():
    m = build_uniform_mesh(4)
    M = asm.assemble_mass(m)
    rowsum = np.asarray(M.sum(axis=1)).ravel()
    assert np.allclose(rowsum[m.interior], m.h ** 2, atol=1e-15)


def test_mass_matches_midpoint_quadrature_oracle():
    m = build_uniform_mesh(3)
    M = asm.assemble_mass(m).toarray()
    assert np.allclose(M, dense_mass(m), atol=1e-14)
    assert np.allclose(M, M.T, atol=1e-16)


def test_mass_positive_definite():
    m = build_uniform_mesh(4)
    M = asm.assemble_mass(m).toarray()
    assert np.min(np.linalg.eigvalsh(M)) > 0


def test_lumped_mass_row_sums_and_trace():
    m = build_uniform_mesh(4)
    W = asm.lumped_mass(m)
    M = asm.assemble_mass(m)
    assert np.allclose(W, np.asarray(M.sum(axis=1)).ravel(), atol=1e-15)
    assert np.isclose(W.sum(), 1.0, atol=1e-14)
    assert np.all(W > 0)


def test_lumping_gap_positive_semidefinite():
    # the lumped-minus-consistent gap is what makes the semi-implicit
    # Newton objective convex, so it must never dip below zero
    for n in (2, 4, 8):
        m = build_uniform_mesh(n)
        gap = np.diag(asm.lumped_mass(m)) - asm.assemble_mass(m).toarray()
        assert np.min(np.linalg.eigvalsh(gap)) >= -1e-12


# ---------------------------------------------------------------- stiffness


def test_stiffness_unit_coefficient_is_five_point_stencil():
    for n in (4, 8):
        m = build_uniform_mesh(n)
        A = asm.assemble_stiffness(m, np.ones(m.num_nodes))
        d = A.diagonal()
        assert np.allclose(d, 4.0, atol=1e-13)  # h-independent
        off = A - 4.0 * sp.eye(m.num_interior, format="csr")
        vals = off.data[np.abs(off.data) > 1e-14]
        assert np.allclose(vals, -1.0, atol=1e-13)


def test_stiffness_neighbor_structure_n4():
    m = build_uniform_mesh(4)
    A = asm.assemble_stiffness(m, np.ones(m.num_nodes)).toarray()
    # interior node (2,2) couples only to its four axis neighbors
    center = m.interior_index[2 * 5 + 2]
    row = A[center]
    assert row[center] == pytest.approx(4.0)
    coupled = np.flatnonzero(np.abs(row) > 1e-14)
    assert len(coupled) == 5


def test_stiffness_linear_in_coefficient():
    m = build_uniform_mesh(5)
    rng = np.random.default_rng(3)
    q1 = rng.uniform(0.1, 5.0, m.num_nodes)
    q2 = rng.uniform(0.1, 5.0, m.num_nodes)
    A12 = asm.assemble_stiffness(m, q1 + q2).toarray()
    assert np.allclose(A12, asm.assemble_stiffness(m, q1).toarray()
                       + asm.assemble_stiffness(m, q2).toarray(), atol=1e-13)
    assert np.allclose(asm.assemble_stiffness(m, 2.0 * q1).toarray(),
                       2.0 * asm.assemble_stiffness(m, q1).toarray(), atol=1e-13)


def test_stiffness_matches_dense_oracle():
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(11)
    q = rng.uniform(0.1, 5.0, m.num_nodes)
    K = dense_stiffness(m, q)
    idx = m.interior
    A = asm.assemble_stiffness(m, q).toarray()
    assert np.allclose(A, K[np.ix_(idx, idx)], atol=1e-13)


def test_stiffness_spd_for_admissible_coefficients():
    m = build_uniform_mesh(8)
    rng = np.random.default_rng(5)
    q = rng.uniform(0.1, 5.0, m.num_nodes)
    A = asm.assemble_stiffness(m, q).toarray()
    np.linalg.cholesky(A)  # raises if not SPD
    assert np.allclose(A, A.T, atol=1e-14)


def test_stiffness_rejects_nonpositive_coefficient():
    m = build_uniform_mesh(2)
    q = np.ones(m.num_nodes)
    q[3] = 0.0
    with pytest.raises(ValueError):
        asm.assemble_stiffness(m, q)
    q[3] = -1.0
    with pytest.raises(ValueError):
        asm.assemble_stiffness(m, q)
    with pytest.raises(ValueError):
        asm.assemble_stiffness(m, np.ones(4))


# ---------------------------------------------------------------- load


def test_load_total_equals_source_strength():
    m = build_uniform_mesh(6)
    b = asm.assemble_load(m, 10.0, all_nodes=True)
    assert np.isclose(b.sum(), 10.0, atol=1e-13)


def test_load_single_interior_node_frozen():
    # n=2: one interior node supported on six triangles of area 1/8 each
    m = build_uniform_mesh(2)
    b = asm.assemble_load(m, 10.0)
    assert b.shape == (1,)
    assert b[0] == pytest.approx(2.5, abs=1e-15)


def test_load_nodal_rhs_through_mass():
    m = build_uniform_mesh(4)
    f = np.full(m.num_nodes, 10.0)
    const = asm.assemble_load(m, 10.0)
    nodal = asm.assemble_load(m, f)
    assert np.allclose(const, nodal, atol=1e-14)


# ---------------------------------------------------------------- forward solve


def test_forward_solve_zero_source():
    m = build_uniform_mesh(4)
    res = asm.forward_solve(m, np.ones(m.num_nodes), 0.0)
    assert res.iterations == 0
    assert np.all(res.x == 0.0)


def test_forward_solve_matches_dense_lu():
    m = build_uniform_mesh(16)
    res = asm.forward_solve(m, np.ones(m.num_nodes), 10.0)
    u_ref = dense_forward(m, np.ones(m.num_nodes), 10.0)
    assert np.max(np.abs(res.x - u_ref)) <= 1e-9
    assert res.iterations > 0


def test_forward_solve_variable_coefficient_dense_oracle():
    m = build_uniform_mesh(8)
    rng = np.random.default_rng(2)
    q = rng.uniform(0.5, 3.0, m.num_nodes)
    res = asm.forward_solve(m, q, 10.0, cfg=LinearSolverConfig(tol=1e-12))
    u_ref = dense_forward(m, q, 10.0)
    assert np.max(np.abs(res.x - u_ref)) <= 1e-9


def test_forward_solve_second_order_convergence():
    exact = lambda p: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
    errs = []
    for n in (8, 16):
        m = build_uniform_mesh(n)
        f = 2.0 * np.pi ** 2 * exact(m.nodes)
        res = asm.forward_solve(m, np.ones(m.num_nodes), f,
                                cfg=LinearSolverConfig(tol=1e-12))
        errs.append(np.max(np.abs(res.x - exact(m.nodes[m.interior]))))
    ratio = errs[0] / errs[1]
    assert 3.3 < ratio < 4.7  # O(h^2) in the maximum norm


# ---------------------------------------------------------------- misfit energy


def test_energy_zero_at_matching_observation():
    m = build_uniform_mesh(4)
    q = np.full(m.num_nodes, 2.0)
    res = asm.forward_solve(m, q, 10.0)
    g = asm.state_gradients(m, res.x)
    assert asm.misfit_energy(m, q, g, g) == 0.0


def test_energy_nonnegative_and_linear_in_coefficient():
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(8)
    q = rng.uniform(0.1, 5.0, m.num_nodes)
    res = asm.forward_solve(m, q, 10.0)
    g = asm.state_gradients(m, res.x)
    obs = g + rng.standard_normal(g.shape)
    e = asm.misfit_energy(m, q, g, obs)
    assert e > 0
    assert asm.misfit_energy(m, 2.0 * q, g, obs) == pytest.approx(2.0 * e)


def test_energy_matches_quadrature_oracle():
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(9)
    q = rng.uniform(0.1, 5.0, m.num_nodes)
    u = rng.standard_normal(m.num_interior)
    obs = rng.standard_normal((m.num_triangles, 2))
    g = asm.state_gradients(m, u)
    assert asm.misfit_energy(m, q, g, obs) == pytest.approx(
        dense_misfit_energy(m, q, u, obs), abs=1e-13)


# ---------------------------------------------------------------- misfit gradient


def test_gradient_zero_when_observation_matches():
    m = build_uniform_mesh(4)
    q = np.full(m.num_nodes, 1.5)
    res = asm.forward_solve(m, q, 10.0)
    g = asm.state_gradients(m, res.x)
    assert np.allclose(asm.misfit_gradient(m, g, g), 0.0, atol=1e-16)


def test_gradient_nonpositive_for_zero_observation():
    m = build_uniform_mesh(4)
    res = asm.forward_solve(m, np.ones(m.num_nodes), 10.0)
    g = asm.state_gradients(m, res.x)
    grad = asm.misfit_gradient(m, g, np.zeros_like(g))
    assert np.all(grad <= 0.0)
    assert grad.min() < 0.0


def test_gradient_frozen_values_n2():
    # q = 1, f = 10, zero observation: u = 5/8 at the center node and the
    # nodal derivative works out to simple fractions
    m = build_uniform_mesh(2)
    res = asm.forward_solve(m, np.ones(9), 10.0)
    assert res.x[0] == pytest.approx(0.625, abs=1e-12)
    grad = asm.misfit_gradient(m, asm.state_gradients(m, res.x),
                               np.zeros((8, 2)))
    expect = -np.array([25 / 384, 25 / 256, 0.0, 25 / 256, 25 / 96,
                        25 / 256, 0.0, 25 / 256, 25 / 384])
    assert np.allclose(grad, expect, atol=1e-12)


def test_gradient_matches_dense_oracle():
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(12)
    q = rng.uniform(0.5, 3.0, m.num_nodes)
    obs = random_p1_observation(m, rng)
    res = asm.forward_solve(m, q, 10.0, cfg=LinearSolverConfig(tol=1e-13))
    grad = asm.misfit_gradient(m, asm.state_gradients(m, res.x), obs)
    assert np.allclose(grad, dense_misfit_gradient(m, q, 10.0, obs), atol=1e-11)


def test_gradient_matches_finite_differences():
    # central differences of the energy with the state re-solved at every
    # perturbed coefficient; exact match requires gradient-type observations
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(4)
    q = rng.uniform(0.5, 3.0, m.num_nodes)
    obs = random_p1_observation(m, rng)
    tight = LinearSolverConfig(tol=1e-13)

    def energy(qv):
        r = asm.forward_solve(m, qv, 10.0, cfg=tight)
        return asm.misfit_energy(m, qv, asm.state_gradients(m, r.x), obs)

    res = asm.forward_solve(m, q, 10.0, cfg=tight)
    grad = asm.misfit_gradient(m, asm.state_gradients(m, res.x), obs)

    eps = 1e-5
    fd = np.empty_like(grad)
    for i in range(m.num_nodes):
        qp = q.copy(); qp[i] += eps
        qm = q.copy(); qm[i] -= eps
        fd[i] = (energy(qp) - energy(qm)) / (2.0 * eps)

    scale = np.abs(grad).max()
    rel = np.abs(fd - grad) / np.maximum(np.abs(grad), 1e-8 * scale)
    assert rel.max() <= 1e-5


def test_energy_midpoint_convexity_on_gradient_data():
    # convexity of the misfit holds for observations in the gradient space
    m = build_uniform_mesh(4)
    rng = np.random.default_rng(21)
    obs = random_p1_observation(m, rng)

    def energy(qv):
        u = dense_forward(m, qv, 10.0)
        return dense_misfit_energy(m, qv, u, obs)

    for _ in range(5):
        q1 = rng.uniform(0.1, 5.0, m.num_nodes)
        q2 = rng.uniform(0.1, 5.0, m.num_nodes)
        mid = energy(0.5 * (q1 + q2))
        assert mid <= 0.5 * energy(q1) + 0.5 * energy(q2) + 1e-10


# ---------------------------------------------------------------- coupling


def test_coupling_zero_state():
    m = build_uniform_mesh(3)
    N = asm.assemble_coupling(m, np.zeros((m.num_triangles, 2)))
    assert N.shape == (m.num_nodes, m.num_interior)
    assert N.nnz == 0 or np.allclose(N.data, 0.0)


def test_coupling_constant_gradient_columns_sum_to_zero():
    # with grad u = (1, 0) each column integrates d(phi_j)/dx over the
    # domain, which vanishes for interior hat functions
    m = build_uniform_mesh(4)
    g = np.zeros((m.num_triangles, 2))
    g[:, 0] = 1.0
    N = asm.assemble_coupling(m, g)
    assert np.allclose(np.asarray(N.sum(axis=0)).ravel(), 0.0, atol=1e-14)


def hessian_action(m, q, dq, obs, tol=1e-13):
    res = asm.forward_solve(m, q, 10.0, cfg=LinearSolverConfig(tol=tol))
    g = asm.state_gradients(m, res.x)
    N = asm.assemble_coupling(m, g)
    A = asm.assemble_stiffness(m, q).toarray()
    r = np.linalg.solve(A, -(N.T @ dq))
    return -(N @ r)


def test_curvature_action_matches_gradient_differences():
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(6)
    q = rng.uniform(0.5, 3.0, m.num_nodes)
    obs = rng.standard_normal((m.num_triangles, 2))  # any observation works
    tight = LinearSolverConfig(tol=1e-13)

    def grad(qv):
        r = asm.forward_solve(m, qv, 10.0, cfg=tight)
        return asm.misfit_gradient(m, asm.state_gradients(m, r.x), obs)

    eps = 1e-6
    for _ in range(3):
        dq = rng.standard_normal(m.num_nodes)
        fd = (grad(q + eps * dq) - grad(q - eps * dq)) / (2.0 * eps)
        act = hessian_action(m, q, dq, obs)
        assert np.linalg.norm(act - fd) <= 1e-4 * np.linalg.norm(act)


def test_curvature_symmetric_positive_semidefinite():
    m = build_uniform_mesh(3)
    rng = np.random.default_rng(14)
    q = rng.uniform(0.5, 3.0, m.num_nodes)
    obs = rng.standard_normal((m.num_triangles, 2))
    for _ in range(5):
        v = rng.standard_normal(m.num_nodes)
        w = rng.standard_normal(m.num_nodes)
        sv = hessian_action(m, q, v, obs)
        sw = hessian_action(m, q, w, obs)
        assert np.dot(w, sv) == pytest.approx(np.dot(v, sw), abs=1e-10)
        assert np.dot(v, sv) >= -1e-12
