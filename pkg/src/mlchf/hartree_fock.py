"""Hartree-Fock operators, total energy and the plain SCF iteration.

Orbitals are real and stored as dof coefficient matrices. Occupancies ``f``
are 1 (spin orbitals) or 2 (closed shell); the exchange weight is 1 in both
cases, so one formula covers both::

    E = sum_l f_l (1/2 |grad phi_l|^2 + V_ext phi_l^2)
        + 1/2 sum_ls f_l f_s J_ls - 1/2 sum_ls f_l g_s K_ls + E_nn

with ``J_ls = integral V(phi_s phi_s) phi_l^2`` and
``K_ls = integral V(phi_l phi_s) phi_l phi_s``, where ``V(u)`` is the Coulomb
potential of ``u``. Both terms use the same pair potentials, which makes the
self-interaction cancellation of a one-electron system exact.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .eigen import b_orthonormalize, solve_sparse_lowest
from .fespace import FeSpace
from .poisson import PoissonSolver, solve_pair_potentials

__all__ = [
    "MoleculeSpec",
    "OrbitalSet",
    "EnergyTerms",
    "ScfReport",
    "HFSystem",
    "density",
    "exchange_apply",
    "total_energy",
    "initial_guess",
    "scf_solve",
]


@dataclass
class MoleculeSpec:
    """Nuclei (charges, positions in Bohr) and electron count.

    ``occupancy`` is ``"closed"`` (doubly occupied spatial orbitals, even
    electron count) or ``"spin"`` (singly occupied spin orbitals).
    """

    charges: np.ndarray
    positions: np.ndarray
    n_electrons: int
    occupancy: str = "closed"
    symbols: Sequence[str] = ()

    def __post_init__(self):
        self.charges = np.atleast_1d(np.asarray(self.charges, dtype=float))
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.charges) != len(self.positions):
            raise ValueError("one position per nuclear charge required")
        if np.any(self.charges <= 0):
            raise ValueError("nuclear charges must be positive")
        if int(self.n_electrons) != self.n_electrons or self.n_electrons < 1:
            raise ValueError("electron count must be a positive integer")
        self.n_electrons = int(self.n_electrons)
        if self.occupancy not in ("closed", "spin"):
            raise ValueError(f"unknown occupancy mode {self.occupancy!r}")
        if self.occupancy == "closed" and self.n_electrons % 2:
            raise ValueError("closed-shell occupancy requires an even electron count")
        if not self.symbols:
            self.symbols = tuple("X" for _ in self.charges)

    @property
    def n_orbitals(self) -> int:
        return self.n_electrons // 2 if self.occupancy == "closed" else self.n_electrons

    @property
    def occupations(self) -> np.ndarray:
        return np.full(self.n_orbitals, 2.0 if self.occupancy == "closed" else 1.0)

    @property
    def exchange_weights(self) -> np.ndarray:
        return np.ones(self.n_orbitals)

    @property
    def nuclear_repulsion(self) -> float:
        e = 0.0
        for a in range(len(self.charges)):
            for b in range(a):
                e += self.charges[a] * self.charges[b] / np.linalg.norm(self.positions[a] - self.positions[b])
        return float(e)

    @property
    def charge_center(self) -> np.ndarray:
        return (self.charges[:, None] * self.positions).sum(0) / self.charges.sum()

    def external_potential(self, x: np.ndarray) -> np.ndarray:
        """``-sum_k Z_k / |x - R_k|``."""
        x = np.asarray(x, dtype=float)
        v = np.zeros(len(x))
        for z, r in zip(self.charges, self.positions):
            v -= z / np.linalg.norm(x - r, axis=1)
        return v


@dataclass
class OrbitalSet:
    """Orbitals on one space: ``coeffs`` is ``(n_dofs, n_orbitals)``."""

    space: FeSpace
    coeffs: np.ndarray
    eigenvalues: np.ndarray
    occupations: np.ndarray
    exchange_weights: np.ndarray

    @property
    def n_orbitals(self) -> int:
        return self.coeffs.shape[1]

    def nodal(self) -> np.ndarray:
        """Full-vertex values ``(nv, n_orbitals)``."""
        return self.space.to_nodal(self.coeffs)

    def overlap(self) -> np.ndarray:
        return self.coeffs.T @ (self.space.mass @ self.coeffs)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.overlap() - np.eye(self.n_orbitals)).max())

    def replace(self, coeffs, eigenvalues=None) -> "OrbitalSet":
        return OrbitalSet(
            self.space,
            np.asarray(coeffs, dtype=float),
            self.eigenvalues.copy() if eigenvalues is None else np.asarray(eigenvalues, dtype=float),
            self.occupations,
            self.exchange_weights,
        )


@dataclass
class EnergyTerms:
    kinetic: float
    external: float
    hartree: float
    exchange: float
    nuclear: float

    @property
    def electronic(self) -> float:
        return self.kinetic + self.external + self.hartree - self.exchange

    @property
    def total(self) -> float:
        return self.electronic + self.nuclear


@dataclass
class ScfReport:
    energies: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    eigenvalues: list = field(default_factory=list)
    poisson_solves: int = 0
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0


def density(orbitals: OrbitalSet) -> np.ndarray:
    """Nodal density ``sum_l f_l phi_l^2`` at all vertices."""
    phi = orbitals.nodal()
    return (phi**2) @ orbitals.occupations


class HFSystem:
    """Discrete one-body operators and Coulomb machinery on one space.

    Parameters
    ----------
    space : FeSpace
    molecule : MoleculeSpec
    poisson : PoissonSolver, optional
        Built with the molecule's charge centre as expansion centre if absent.
    """

    def __init__(self, space: FeSpace, molecule: MoleculeSpec, poisson: Optional[PoissonSolver] = None):
        self.space = space
        self.molecule = molecule
        self.poisson = poisson or PoissonSolver(space, center=molecule.charge_center)

    @cached_property
    def kinetic(self) -> sp.csr_matrix:
        return 0.5 * self.space.stiffness

    @cached_property
    def external(self) -> sp.csr_matrix:
        return self.space.coulomb_matrix(self.molecule.charges, self.molecule.positions)

    @cached_property
    def core(self) -> sp.csr_matrix:
        """One-electron operator ``1/2 A + V_ext``."""
        return sp.csr_matrix(self.kinetic + self.external)

    @cached_property
    def precond_shift(self) -> float:
        return 0.5 * float(self.molecule.charges.max()) ** 2 + 0.5

    @cached_property
    def preconditioner(self):
        """Inverse of the SPD matrix ``1/2 A + s M`` (LU or AMG)."""
        from .eigen import _preconditioner

        return _preconditioner(None, None, self.kinetic + self.precond_shift * self.space.mass, 0.0)

    # -- Coulomb terms ----------------------------------------------------

    def pair_potentials(self, orbitals: OrbitalSet) -> np.ndarray:
        """``V(phi_l phi_s)`` at all vertices, ``(nv, N, N)``; one solve per unordered pair."""
        return solve_pair_potentials(self.poisson, orbitals.nodal())

    @staticmethod
    def hartree(pairs: np.ndarray, occupations: np.ndarray) -> np.ndarray:
        return np.einsum("vss,s->v", pairs, occupations)

    def exchange_vectors(self, orbitals: OrbitalSet, pairs: np.ndarray) -> np.ndarray:
        """Dof vectors ``w_l[i] = sum_s g_s integral V(phi_l phi_s) phi_s psi_i``."""
        phi = orbitals.nodal()
        g = orbitals.exchange_weights
        N = orbitals.n_orbitals
        w = np.zeros((self.space.n_dofs, N))
        for l in range(N):
            w[:, l] = self.space.load(pairs[:, l, :], phi * g[None, :]).sum(axis=1)
        return w

    def energy(self, orbitals: OrbitalSet, pairs: np.ndarray) -> EnergyTerms:
        return total_energy(self, orbitals, pairs)

    def fock_operator(self, hartree_nodal: np.ndarray, orbitals: OrbitalSet, pairs: np.ndarray):
        """Fock matrix ``H_core + V_H - K`` as a linear operator.

        Exchange enters through its action on the occupied orbitals in the
        low-rank form ``K = W (Phi^T W)^-1 W^T`` with ``W = K Phi``, which is
        exact on the occupied span.
        """
        base = sp.csr_matrix(self.core + self.space.weighted_mass(hartree_nodal))
        W = self.exchange_vectors(orbitals, pairs)
        S = orbitals.coeffs.T @ W
        S = 0.5 * (S + S.T)
        Sinv = np.linalg.pinv(S)

        def matmat(X):
            X = X.reshape(X.shape[0], -1)
            return base @ X - W @ (Sinv @ (W.T @ X))

        n = self.space.n_dofs
        op = spla.LinearOperator((n, n), matvec=lambda x: matmat(x).ravel(), matmat=matmat, rmatvec=lambda x: matmat(x).ravel(), dtype=float)
        return op, base, W, Sinv


def exchange_apply(system: HFSystem, orbitals: OrbitalSet, target_nodal: np.ndarray, pair_potentials=None) -> np.ndarray:
    """Dof load vector of the exchange operator applied to ``target``:
    ``-sum_s g_s integral V(phi_s t) phi_s psi_i``.

    ``pair_potentials`` (``(nv, N)``, potentials of ``phi_s * target``) are
    solved for when not given.
    """
    phi = orbitals.nodal()
    if pair_potentials is None:
        pair_potentials = solve_pair_potentials(system.poisson, phi, target_nodal.reshape(-1, 1))[:, :, 0]
    g = orbitals.exchange_weights
    return -system.space.load(pair_potentials, phi * g[None, :]).sum(axis=1)


def total_energy(system: HFSystem, orbitals: OrbitalSet, pairs: np.ndarray) -> EnergyTerms:
    """Energy components of an orbital set, including nuclear repulsion."""
    C = orbitals.coeffs
    f = orbitals.occupations
    g = orbitals.exchange_weights
    phi = orbitals.nodal()
    kin = np.einsum("il,il->l", C, system.kinetic @ C)
    ext = np.einsum("il,il->l", C, system.external @ C)
    N = orbitals.n_orbitals
    # products phi_l phi_s loaded against the basis: P[a, l, s]
    J = np.empty((N, N))
    K = np.empty((N, N))
    space = system.space
    for l in range(N):
        prod_l = space.load_full(phi, phi[:, l])  # (nv, N): integral phi_s phi_l psi_a
        for s in range(N):
            J[l, s] = pairs[:, s, s] @ space.load_full(phi[:, l], phi[:, l])
            K[l, s] = pairs[:, l, s] @ prod_l[:, s]
    return EnergyTerms(
        kinetic=float(f @ kin),
        external=float(f @ ext),
        hartree=0.5 * float(f @ J @ f),
        exchange=0.5 * float(f @ K @ g),
        nuclear=system.molecule.nuclear_repulsion,
    )


def _orbital_set(space, molecule, coeffs, values):
    return OrbitalSet(space, coeffs, np.asarray(values, dtype=float), molecule.occupations, molecule.exchange_weights)


def initial_guess(system: HFSystem, seed: int = 0) -> OrbitalSet:
    """Lowest eigenpairs of the one-electron operator ``1/2 A + V_ext``."""
    N = system.molecule.n_orbitals
    res = solve_sparse_lowest(system.core, system.space.mass, N, precond=system.preconditioner, seed=seed)
    return _orbital_set(system.space, system.molecule, res.vectors, res.values)


def scf_solve(
    system: HFSystem,
    initial: OrbitalSet,
    tol: float = 1e-6,
    max_iter: int = 50,
    mixing: float = 0.5,
    force_iterations: Optional[int] = None,
    eig_tol: float = 1e-8,
) -> tuple[OrbitalSet, np.ndarray, ScfReport]:
    """Self-consistent field iteration on one space.

    Each step builds the Fock operator from the mixed Hartree potential and
    the current exchange, takes its lowest ``N`` eigenpairs, and stops when
    the relative change of the total energy is at most ``tol``. With
    ``force_iterations`` set, exactly that many steps are taken.

    Returns the orbitals, their pair potentials ``(nv, N, N)`` and a report.
    """
    if not 0.0 < mixing <= 1.0:
        raise ValueError("mixing parameter must lie in (0, 1]")
    t0 = time.perf_counter()
    solves0 = system.poisson.n_solves
    report = ScfReport()
    orbs = initial.replace(b_orthonormalize(initial.coeffs, system.space.mass))
    pairs = system.pair_potentials(orbs)
    v_h = system.hartree(pairs, orbs.occupations)
    e_old = system.energy(orbs, pairs).total
    n_iter = force_iterations if force_iterations is not None else max_iter
    for it in range(1, n_iter + 1):
        op, _, _, _ = system.fock_operator(v_h, orbs, pairs)
        res = solve_sparse_lowest(op, system.space.mass, orbs.n_orbitals, tol=eig_tol, x0=orbs.coeffs,
                                  precond=system.preconditioner, method="lobpcg" if system.space.n_dofs > 400 else "dense")
        orbs = orbs.replace(res.vectors, res.values)
        pairs = system.pair_potentials(orbs)
        v_h = (1.0 - mixing) * v_h + mixing * system.hartree(pairs, orbs.occupations)
        e_new = system.energy(orbs, pairs).total
        change = abs(e_new - e_old) / abs(e_new)
        report.energies.append(e_new)
        report.changes.append(change)
        report.eigenvalues.append(res.values.copy())
        report.iterations = it
        e_old = e_new
        if force_iterations is None and change <= tol:
            break
    report.converged = bool(report.changes and report.changes[-1] <= tol)
    # eigenvalue estimates consistent with the final orbitals and their own potentials
    op, _, _, _ = system.fock_operator(system.hartree(pairs, orbs.occupations), orbs, pairs)
    C = orbs.coeffs
    orbs = orbs.replace(C, np.einsum("il,il->l", C, op @ C))
    report.poisson_solves = system.poisson.n_solves - solves0
    report.wall_time = time.perf_counter() - t0
    return orbs, pairs, report
