import itertools
from math import factorial

import numpy as np
import pytest

from mlchf.fespace import FeSpace, prolongation, tet_quadrature, triple_product_tensor
from mlchf.mesh import build_box_mesh, refine, uniform_refine


def reference_monomial(a, b, c):
    """Integral of x^a y^b z^c over the unit simplex (Dirichlet formula)."""
    return factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3)


def test_quadrature_degree_five():
    lam, w = tet_quadrature()
    assert lam.shape == (14, 4)
    assert w.sum() == pytest.approx(1.0)
    x, y, z = lam[:, 1], lam[:, 2], lam[:, 3]
    worst = 0.0
    for a, b, c in itertools.product(range(6), repeat=3):
        if a + b + c <= 5:
            approx = (w * x**a * y**b * z**c).sum() / 6.0
            worst = max(worst, abs(approx - reference_monomial(a, b, c)))
    print(f"worst monomial error {worst:.1e}")
    assert worst < 1e-15


def test_triple_tensor_matches_quadrature():
    lam, w = tet_quadrature()
    t = np.einsum("q,qa,qb,qc->abc", w, lam, lam, lam)
    np.testing.assert_allclose(triple_product_tensor(), t, atol=1e-16)


def test_mass_and_stiffness(small_space):
    full_m = small_space.mass_full
    one = np.ones(small_space.n_vertices)
    assert one @ full_m @ one == pytest.approx(8.0**3)
    np.testing.assert_allclose(small_space.stiffness_full @ one, 0.0, atol=1e-12)
    # a linear function: integral |grad u|^2 is |g|^2 times the volume
    g = np.array([0.3, -1.0, 2.0])
    u = small_space.mesh.vertices @ g
    assert u @ small_space.stiffness_full @ u == pytest.approx((g @ g) * 8.0**3)


def test_restricted_matrices_are_spd(small_space):
    for mat in (small_space.mass, small_space.stiffness):
        d = mat.toarray()
        np.testing.assert_allclose(d, d.T, atol=1e-14)
        assert np.linalg.eigvalsh(d).min() > 0


def test_load_matches_weighted_mass(small_space):
    rng = np.random.default_rng(0)
    u = rng.standard_normal(small_space.n_vertices)
    v = rng.standard_normal(small_space.n_vertices)
    lhs = small_space.load_full(u, v)
    rhs = small_space.weighted_mass_full(u) @ v
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    # several right-hand sides at once
    uu = rng.standard_normal((small_space.n_vertices, 3))
    many = small_space.load_full(uu, v)
    np.testing.assert_allclose(many[:, 1], small_space.load_full(uu[:, 1], v), atol=1e-12)


def test_prolongation_reproduces_functions():
    coarse = build_box_mesh(np.array([[0, 0, 0], [1, 1, 1.0]]), (2, 2, 2))
    rng = np.random.default_rng(1)
    fine = coarse
    for _ in range(4):
        fine = refine(fine, rng.choice(fine.n_tets, fine.n_tets // 4, replace=False))
    cs, fs = FeSpace(coarse), FeSpace(fine)
    u = rng.standard_normal(coarse.n_vertices)
    P = prolongation(coarse, fine)
    expected = cs.evaluate(u, fine.vertices)
    np.testing.assert_allclose(P @ u, expected, atol=1e-12)
    # restricted version keeps the homogeneous boundary
    Pd = fs.prolongation(cs)
    assert Pd.shape == (fs.n_dofs, cs.n_dofs)


def test_coulomb_quadrature_against_refined_reference():
    mesh = build_box_mesh(np.array([[0, 0, 0], [1, 1, 1.0]]), (2, 2, 2))
    space = FeSpace(mesh)
    fine = FeSpace(uniform_refine(mesh, 9))
    P = fine.prolongation_full(space)
    for r in (np.array([0.5, 0.5, 0.5]), np.array([0.3, 0.2, 0.61])):
        ours = space.coulomb_matrix_full([1.0], [r]).toarray()
        ref = (P.T @ fine.coulomb_matrix_full([1.0], [r]) @ P).toarray()
        plain = space.potential_matrix_full(lambda x: -1.0 / np.linalg.norm(x - r, axis=1)).toarray()
        err, err_plain = np.abs(ours - ref).max(), np.abs(plain - ref).max()
        print(f"nucleus {r}: cone rule {err:.1e}, plain rule {err_plain:.1e}")
        assert err < 5e-5
        assert err < 0.1 * err_plain


def test_integrate_and_norm(small_space):
    x = small_space.mesh.vertices
    u = 1.0 + x[:, 0]
    assert small_space.integrate(u) == pytest.approx(8.0**3)
    # exact: integral of (1 + x)^2 over [-4, 4]^3
    assert small_space.l2_norm(u) ** 2 == pytest.approx(64.0 * (8.0 + 2 * 64.0 / 3.0))


def test_galerkin_consistency_and_nested_norms():
    coarse = build_box_mesh(np.array([[0, 0, 0], [1, 2, 1.0]]), (2, 3, 2))
    rng = np.random.default_rng(2)
    fine = refine(uniform_refine(coarse, 1), rng.choice(6 * 12 * 2, 30, replace=False))
    cs, fs = FeSpace(coarse), FeSpace(fine)
    P = fs.prolongation(cs)
    galerkin = (P.T @ fs.stiffness @ P - cs.stiffness).toarray()
    assert np.abs(galerkin).max() < 1e-10
    u = rng.standard_normal(cs.n_vertices)
    Pf = fs.prolongation_full(cs)
    assert fs.l2_norm(Pf @ u) == pytest.approx(cs.l2_norm(u), rel=1e-12)


def test_potential_matrix_constant(small_space):
    ones = small_space.potential_matrix(lambda x: np.ones(len(x)))
    assert np.abs((ones - small_space.mass).toarray()).max() < 1e-12
    three = small_space.potential_matrix(lambda x: np.full(len(x), 3.0))
    assert np.abs((three - 3.0 * small_space.mass).toarray()).max() < 1e-12


def test_assembled_matrices_symmetric(small_space):
    for mat in (small_space.stiffness_full, small_space.mass_full,
                small_space.coulomb_matrix_full([1.0], [[0.1, 0.2, 0.3]])):
        assert abs(mat - mat.T).max() <= 1e-13 * abs(mat).max()
