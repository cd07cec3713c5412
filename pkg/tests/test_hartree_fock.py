import numpy as np
import pytest

from mlchf.hartree_fock import HFSystem, MoleculeSpec, density, exchange_apply, initial_guess, scf_solve


def test_molecule_validation():
    with pytest.raises(ValueError):
        MoleculeSpec(np.array([-1.0]), np.zeros((1, 3)), 1, "spin")
    with pytest.raises(ValueError):
        MoleculeSpec(np.array([1.0]), np.zeros((1, 3)), 1, "closed")
    with pytest.raises(ValueError):
        MoleculeSpec(np.array([1.0, 1.0]), np.zeros((1, 3)), 2)
    with pytest.raises(ValueError):
        MoleculeSpec(np.array([1.0]), np.zeros((1, 3)), 1, "restricted")


def test_occupation_modes():
    lih = MoleculeSpec(np.array([3.0, 1.0]), np.array([[0, 0, 0], [0, 0, 3.015]]), 4)
    assert lih.n_orbitals == 2
    np.testing.assert_array_equal(lih.occupations, [2.0, 2.0])
    assert lih.nuclear_repulsion == pytest.approx(3.0 / 3.015)
    spin = MoleculeSpec(np.array([3.0]), np.zeros((1, 3)), 3, "spin")
    np.testing.assert_array_equal(spin.occupations, [1.0, 1.0, 1.0])


def test_hydrogen_self_interaction_cancels(small_space, hydrogen):
    system = HFSystem(small_space, hydrogen)
    orbs, pairs, rep = scf_solve(system, initial_guess(system), tol=1e-10)
    terms = system.energy(orbs, pairs)
    print(f"hartree {terms.hartree:.6f}  exchange {terms.exchange:.6f}")
    assert abs(terms.hartree - terms.exchange) < 1e-12
    phi = orbs.coeffs[:, 0]
    assert terms.total == pytest.approx(phi @ system.core @ phi, abs=1e-12)
    assert orbs.eigenvalues[0] == pytest.approx(terms.total, abs=1e-10)


def test_fock_operator_symmetric(h2_system):
    orbs = initial_guess(h2_system)
    pairs = h2_system.pair_potentials(orbs)
    op, _, _, _ = h2_system.fock_operator(h2_system.hartree(pairs, orbs.occupations), orbs, pairs)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, h2_system.space.n_dofs))
    assert abs(x @ (op @ y) - y @ (op @ x)) < 1e-10 * np.linalg.norm(x) * np.linalg.norm(y)


def test_eigenvalue_energy_identity(h2_system):
    orbs, pairs, rep = scf_solve(h2_system, initial_guess(h2_system), tol=1e-10, max_iter=80)
    assert rep.converged
    t = h2_system.energy(orbs, pairs)
    lhs = orbs.occupations @ orbs.eigenvalues
    rhs = t.kinetic + t.external + 2 * t.hartree - 2 * t.exchange
    print(f"sum f lambda {lhs:.10f}  one-body + 2(J - K) {rhs:.10f}")
    assert lhs == pytest.approx(rhs, abs=1e-10)
    assert orbs.orthonormality_error() < 1e-10


def test_exchange_apply_matches_vectors(h2_system):
    orbs = initial_guess(h2_system)
    pairs = h2_system.pair_potentials(orbs)
    w = h2_system.exchange_vectors(orbs, pairs)
    phi = orbs.nodal()
    for l in range(orbs.n_orbitals):
        np.testing.assert_allclose(exchange_apply(h2_system, orbs, phi[:, l]), -w[:, l], atol=1e-10)


def test_forced_iterations_and_density(h2_system):
    orbs, pairs, rep = scf_solve(h2_system, initial_guess(h2_system), force_iterations=3)
    assert rep.iterations == 3
    assert len(rep.energies) == 3
    rho = density(orbs)
    assert np.all(rho >= 0)
    assert np.trace(orbs.overlap()) == pytest.approx(2.0, rel=1e-10)
    with pytest.raises(ValueError):
        scf_solve(h2_system, orbs, mixing=0.0)
