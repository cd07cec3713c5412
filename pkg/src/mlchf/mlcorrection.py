"""Multilevel correction step with precomputed correction-space tensors.

For every orbital ``l`` the correction space is the fixed coarse space
``V_H`` plus one fine function ``phi~_l`` (the solution of a linear boundary
value problem on the refined mesh). The small Hartree-Fock problem posed on
that space is solved by an SCF loop whose matrices are pure contractions of
tensors computed once per correction step, so the loop never touches a
fine-grid object.

Notation used below (all real, ``psi_m`` coarse hat functions, ``V(u)`` the
Coulomb potential of ``u``)::

    V_mn      = V(psi_m psi_n)                  run constant
    Vt_lm     = V(phi~_l psi_m)                 N_H solves per orbital
    Vtt_ls    = V(phi~_l phi~_s)                N solves per orbital
    V4[m,n,j,i] = int V_mn psi_j psi_i
    Vt[m,j,i]   = int Vt_lm psi_j psi_i
    Vtt[j,i]    = int Vtt_ll psi_j psi_i
    Wt[j,i]     = int Vt_lj phi~_l psi_i
    V3[i]       = int Vtt_ll phi~_l psi_i
    V4s         = int Vtt_ll phi~_l^2

Sparse tensors are stored as CSR matrices over flattened index pairs.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .eigen import solve_dense_generalized
from .fespace import FeSpace
from .hartree_fock import HFSystem, MoleculeSpec, OrbitalSet
from .poisson import PoissonSolver, SpdSolver

__all__ = [
    "MemoryAudit",
    "RunConstantCache",
    "CorrectionLevel",
    "CorrectionCache",
    "CorrectionState",
    "CorrectionReport",
    "build_run_constant_cache",
    "solve_linearized_bvp",
    "build_correction_level",
    "build_correction_cache",
    "assemble_block_operator",
    "assemble_block_direct",
    "correction_scf",
    "reconstruct_orbital",
    "exchange_for_next_level",
    "correct_orbitals",
]


class MemoryAudit:
    """Largest dense allocation not indexed by fine-grid vertices.

    Every coarse-sized dense array created while building caches or running
    the correction loop is registered here; ``check`` raises if any exceeds
    ``(N_H + 1)^2 + N N_H`` entries.
    """

    def __init__(self, n_coarse: int, n_orbitals: int):
        self.bound = (n_coarse + 1) ** 2 + n_orbitals * n_coarse
        self.max_entries = 0
        self.largest = ""

    def __call__(self, name: str, arr):
        size = int(np.size(arr))
        if size > self.max_entries:
            self.max_entries, self.largest = size, name
        return arr

    def check(self):
        if self.max_entries > self.bound:
            raise AssertionError(f"dense allocation {self.largest!r} has {self.max_entries} entries, bound {self.bound}")
        return True


# -- coarse-on-fine helpers -------------------------------------------------


class _Embedding:
    """Coarse hat functions represented on a nested fine space."""

    def __init__(self, coarse: FeSpace, fine: FeSpace):
        self.coarse = coarse
        self.fine = fine
        self.psi = sp.csc_matrix(fine.prolongation_full(coarse)[:, coarse.dofs])  # (nv_fine, N_H)
        self.psi_dofs = sp.csr_matrix(self.psi[fine.dofs])
        self.n = coarse.n_dofs

    def column(self, m: int) -> np.ndarray:
        return self.psi[:, m].toarray().ravel()

    def pair_integrals(self, w: np.ndarray) -> np.ndarray:
        """``int w psi_j psi_i`` for all coarse ``j, i`` (``N_H x N_H``)."""
        W = self.fine.weighted_mass_full(w)
        return np.asarray((self.psi.T @ (W @ self.psi)).todense())

    def loads(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``int u v psi_i`` for all coarse ``i``; ``u`` may have a column axis."""
        return self.psi.T @ self.fine.load_full(u, v)


def _sparse_rows(rows_iter, n_rows, n_cols):
    data, ri, ci = [], [], []
    for r, vec in rows_iter:
        nz = np.flatnonzero(vec)
        data.append(vec[nz])
        ri.append(np.full(nz.size, r))
        ci.append(nz)
    if not data:
        return sp.csr_matrix((n_rows, n_cols))
    return sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(n_rows, n_cols))


def _swap_layout(t: sp.csr_matrix, n: int, kind: str) -> sp.csr_matrix:
    """Re-index a tensor stored as rows ``r`` and columns ``(j, i)``.

    ``kind="3"``: from ``T[m, (j, i)]`` build ``R[(m, i), j] = T[m, j, i]``.
    ``kind="4"``: from ``T[(a, b), (c, d)]`` build ``R[(a, d), (b, c)]``.
    """
    coo = t.tocoo()
    if kind == "3":
        m, j, i = coo.row, coo.col // n, coo.col % n
        return sp.csr_matrix((coo.data, (m * n + i, j)), shape=(n * n, n))
    a, b = coo.row // n, coo.row % n
    c, d = coo.col // n, coo.col % n
    return sp.csr_matrix((coo.data, (a * n + d, b * n + c)), shape=(n * n, n * n))


# -- run-constant block ----------------------------------------------------


@dataclass
class RunConstantCache:
    """Quantities fixed for a whole run.

    Attributes
    ----------
    mass, a_kin : (N_H, N_H) arrays
        Coarse mass matrix and ``1/2 A + V_ext`` on the coarse basis.
    v4 : CSR ``(N_H^2, N_H^2)``
        ``v4[(m, n), (j, i)] = int V_mn psi_j psi_i``.
    v4_swap : CSR
        The same tensor re-indexed as ``[(j, i), (m, n)] -> V4[j, m, n, i]``.
    potentials : (nv_p, n_pairs) array
        ``V_mn`` on the potential space for overlapping pairs ``m <= n``.
    pair_index : (N_H, N_H) int array
        Column of ``potentials`` for each pair, ``-1`` when ``psi_m psi_n = 0``.
    type3_problems : int
        ``N_H (N_H + 1) / 2``; pairs with disjoint support have the zero potential
        and are not handed to the solver (``type3_solves`` counts real solves).
    """

    coarse: FeSpace
    potential_space: FeSpace
    mass: np.ndarray
    a_kin: np.ndarray
    v4: sp.csr_matrix
    v4_swap: sp.csr_matrix
    potentials: np.ndarray
    pair_index: np.ndarray
    type3_problems: int
    type3_solves: int
    build_time: float = 0.0

    @property
    def n_coarse(self) -> int:
        return self.coarse.n_dofs

    def combine(self, cl: np.ndarray, cs: np.ndarray) -> np.ndarray:
        """``sum_mn cl_m cs_n V_mn`` on the potential space."""
        n = self.n_coarse
        w = np.outer(cl, cs)
        w = w + w.T - np.diag(np.diag(w))  # collapse (m, n) and (n, m) onto m <= n
        iu, ju = np.triu_indices(n)
        idx = self.pair_index[iu, ju]
        ok = idx >= 0
        coef = np.zeros(self.potentials.shape[1])
        np.add.at(coef, idx[ok], w[iu[ok], ju[ok]])
        return self.potentials @ coef


def build_run_constant_cache(
    coarse: FeSpace,
    molecule: MoleculeSpec,
    potential_space: FeSpace,
    external_space: Optional[FeSpace] = None,
    poisson: Optional[PoissonSolver] = None,
    audit: Optional[MemoryAudit] = None,
) -> RunConstantCache:
    """Coarse mass, ``A_Kin`` and all ``V_mn`` with their tensor.

    Parameters
    ----------
    potential_space : FeSpace
        Nested space on which the ``V_mn`` are solved and integrated
        (typically the first fine space).
    external_space : FeSpace, optional
        Nested space on which ``V_ext psi_m psi_n`` is integrated; by default
        the coarse space itself (the nuclear singularity is handled by the
        cone quadrature of ``FeSpace.coulomb_matrix``).
    """
    t0 = time.perf_counter()
    audit = audit or MemoryAudit(coarse.n_dofs, molecule.n_orbitals)
    n = coarse.n_dofs
    mass = audit("M_H", coarse.mass.toarray())
    external_space = external_space or coarse
    P = external_space.prolongation(coarse)
    v_ext = P.T @ (external_space.coulomb_matrix(molecule.charges, molecule.positions) @ P)
    a_kin = audit("A_Kin", 0.5 * coarse.stiffness.toarray() + v_ext.toarray())

    emb = _Embedding(coarse, potential_space)
    poisson = poisson or PoissonSolver(potential_space, center=molecule.charge_center)
    overlap = (abs(coarse.mass) > 0).toarray()
    iu, ju = np.triu_indices(n)
    keep = overlap[iu, ju]
    pair_index = np.full((n, n), -1, dtype=np.int64)
    pair_index[iu[keep], ju[keep]] = np.arange(keep.sum())
    pair_index[ju[keep], iu[keep]] = np.arange(keep.sum())
    loads = np.zeros((potential_space.n_vertices, int(keep.sum())))
    for k, (m, q) in enumerate(zip(iu[keep], ju[keep])):
        loads[:, k] = potential_space.load_full(emb.column(m), emb.column(q))
    potentials = poisson.solve_load(loads)

    def rows():
        for m in range(n):
            for q in range(n):
                idx = pair_index[m, q]
                if idx >= 0:
                    yield m * n + q, audit("V4 row", emb.pair_integrals(potentials[:, idx])).ravel()

    v4 = _sparse_rows(rows(), n * n, n * n)
    return RunConstantCache(
        coarse=coarse,
        potential_space=potential_space,
        mass=mass,
        a_kin=0.5 * (a_kin + a_kin.T),
        v4=v4,
        v4_swap=_swap_layout(v4, n, "4"),
        potentials=potentials,
        pair_index=pair_index,
        type3_problems=n * (n + 1) // 2,
        type3_solves=int(keep.sum()),
        build_time=time.perf_counter() - t0,
    )


# -- linearized boundary value problem ---------------------------------------


def solve_linearized_bvp(
    system: HFSystem,
    orbitals_nodal: np.ndarray,
    eigenvalues: np.ndarray,
    pairs_nodal: np.ndarray,
    occupations: np.ndarray,
    exchange_weights: np.ndarray,
    shift: Optional[float] = None,
) -> np.ndarray:
    """One linear solve per orbital on the new space.

    Solves ``(1/2 A + V_ext + V_H + s M) phi~_l = (lambda_l + s) M phi_l +
    sum_s g_s int V(phi_l phi_s) phi_s psi_i`` where the previous orbitals,
    eigenvalues and pair potentials are given as full-vertex values already
    prolonged to ``system.space``. Returns M-normalized dof coefficients
    ``(n, N)``.

    The shift ``s`` leaves the exact solution unchanged. Without it the
    operator is nearly singular for neutral systems (the screened potential
    ``V_ext + V_H`` binds weakly), and the solve amplifies the discretization
    residual. ``V_H - K`` is positive on the occupied span, so
    ``s = 1/2 - min(lambda)`` makes the operator positive definite with
    spectrum above ``1/2``.
    """
    space = system.space
    if shift is None:
        shift = 0.5 + max(0.0, -float(np.min(eigenvalues)))
    v_h = np.einsum("vss,s->v", pairs_nodal, occupations)
    op = sp.csr_matrix(system.core + space.weighted_mass(v_h) + shift * space.mass)
    N = orbitals_nodal.shape[1]
    rhs = np.zeros((space.n_dofs, N))
    for l in range(N):
        rhs[:, l] = (eigenvalues[l] + shift) * space.load(orbitals_nodal[:, l])
        rhs[:, l] += space.load(pairs_nodal[:, l, :], orbitals_nodal * exchange_weights[None, :]).sum(axis=1)
    x = SpdSolver(op, rtol=1e-10).solve(rhs)
    norms = np.sqrt(np.einsum("il,il->l", x, space.mass @ x))
    return x / norms


# -- per-level and per-orbital caches ----------------------------------------


@dataclass
class CorrectionLevel:
    """Everything shared by the orbital corrections on one fine space."""

    system: HFSystem
    run: RunConstantCache
    emb: _Embedding
    phit: np.ndarray  # (n_dofs, N) coefficients of phi~
    phit_nodal: np.ndarray  # (nv, N)
    type1: np.ndarray  # (nv, N, N) Vtt_ls
    type2: np.ndarray  # (nv, N, N_H) Vt_lm
    run_prolong: sp.csr_matrix  # potential space -> fine space (full vertices)
    occupations: np.ndarray
    exchange_weights: np.ndarray
    type1_solves: int = 0
    type2_solves: int = 0
    cross_vtt: list = field(default_factory=list)  # int Vtt_ss psi_j psi_i, per s
    cross_wt: list = field(default_factory=list)  # int Vt_sj phi~_s psi_i, per s

    @property
    def space(self) -> FeSpace:
        return self.system.space

    @property
    def n_orbitals(self) -> int:
        return self.phit.shape[1]


def build_correction_level(
    system: HFSystem,
    run: RunConstantCache,
    phit: np.ndarray,
    occupations: np.ndarray,
    exchange_weights: np.ndarray,
    audit: Optional[MemoryAudit] = None,
) -> CorrectionLevel:
    """All Poisson solves of one correction step: for every orbital ``l``,
    ``N`` solves ``V(phi~_l phi~_s)`` and ``N_H`` solves ``V(phi~_l psi_m)``."""
    audit = audit or MemoryAudit(run.n_coarse, phit.shape[1])
    space = system.space
    emb = _Embedding(run.coarse, space)
    nodal = space.to_nodal(phit)
    N = phit.shape[1]
    nH = run.n_coarse
    poisson = system.poisson
    # type 1: N solves per orbital, (l, s) and (s, l) solved separately
    loads1 = np.stack([space.load_full(nodal, nodal[:, l]) for l in range(N)], axis=1)  # (nv, N, N)
    type1 = poisson.solve_load(loads1.reshape(space.n_vertices, N * N)).reshape(-1, N, N)
    type2 = np.empty((space.n_vertices, N, nH))
    psi_cols = emb.psi.toarray() if nH * space.n_vertices < 5e7 else None
    for l in range(N):
        for m in range(nH):
            col = psi_cols[:, m] if psi_cols is not None else emb.column(m)
            type2[:, l, m] = poisson.solve_load(space.load_full(nodal[:, l], col))
    level = CorrectionLevel(
        system=system,
        run=run,
        emb=emb,
        phit=phit,
        phit_nodal=nodal,
        type1=type1,
        type2=type2,
        run_prolong=space.prolongation_full(run.potential_space),
        occupations=np.asarray(occupations, float),
        exchange_weights=np.asarray(exchange_weights, float),
        type1_solves=N * N,
        type2_solves=N * nH,
    )
    for s in range(N):
        level.cross_vtt.append(audit("Vtt_s", emb.pair_integrals(type1[:, s, s])))
        wt = np.stack([emb.loads(type2[:, s, j], nodal[:, s]) for j in range(nH)])
        level.cross_wt.append(audit("Wt_s", wt))
    return level


@dataclass
class CorrectionCache:
    """Per-orbital block computed once before the small SCF loop."""

    level: CorrectionLevel
    orbital: int
    vt: sp.csr_matrix  # Vt[m, (j, i)]
    vt_swap: sp.csr_matrix  # [(m, i), j] -> Vt[m, j, i]
    vtt: np.ndarray
    wt: np.ndarray
    v3: np.ndarray
    v4s: float
    v3_cross1: np.ndarray  # (N, N_H): int Vtt_ss phi~_l psi_i
    v3_cross2: np.ndarray  # (N, N_H): int Vtt_ls phi~_s psi_i
    v4_cross1: np.ndarray  # (N,): int Vtt_ss phi~_l^2
    v4_cross2: np.ndarray  # (N,): int Vtt_ls phi~_s phi~_l
    b_kin: np.ndarray
    beta_kin: float
    c_hh: np.ndarray
    gamma: float

    @property
    def run(self) -> RunConstantCache:
        return self.level.run

    def fingerprint(self) -> bytes:
        """Bytes of every cached array, for immutability checks."""
        parts = [self.vt.data, self.vt_swap.data, self.vtt, self.wt, self.v3, np.atleast_1d(self.v4s),
                 self.v3_cross1, self.v3_cross2, self.v4_cross1, self.v4_cross2, self.b_kin,
                 np.atleast_1d(self.beta_kin), self.c_hh, np.atleast_1d(self.gamma),
                 self.run.mass, self.run.a_kin, self.run.v4.data, self.run.v4_swap.data]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def build_correction_cache(level: CorrectionLevel, l: int, audit: Optional[MemoryAudit] = None) -> CorrectionCache:
    """Tensors and vectors for the correction of orbital ``l``."""
    audit = audit or MemoryAudit(level.run.n_coarse, level.n_orbitals)
    emb = level.emb
    space = level.space
    nH = level.run.n_coarse
    N = level.n_orbitals
    phi = level.phit_nodal
    vtt_ll = level.type1[:, l, l]
    vt = _sparse_rows(((m, audit("Vt row", emb.pair_integrals(level.type2[:, l, m])).ravel()) for m in range(nH)), nH, nH * nH)
    h0phi = level.system.core @ level.phit[:, l]
    mphi = space.mass @ level.phit[:, l]
    v3c1 = np.stack([emb.loads(level.type1[:, s, s], phi[:, l]) for s in range(N)])
    v3c2 = np.stack([emb.loads(level.type1[:, l, s], phi[:, s]) for s in range(N)])
    return CorrectionCache(
        level=level,
        orbital=l,
        vt=vt,
        vt_swap=_swap_layout(vt, nH, "3"),
        vtt=level.cross_vtt[l],
        wt=level.cross_wt[l],
        v3=audit("V3", emb.loads(vtt_ll, phi[:, l])),
        v4s=float(vtt_ll @ space.load_full(phi[:, l], phi[:, l])),
        v3_cross1=audit("V3_1", v3c1),
        v3_cross2=audit("V3_2", v3c2),
        v4_cross1=np.array([level.type1[:, s, s] @ space.load_full(phi[:, l], phi[:, l]) for s in range(N)]),
        v4_cross2=np.array([level.type1[:, l, s] @ space.load_full(phi[:, s], phi[:, l]) for s in range(N)]),
        b_kin=audit("b_Kin", emb.psi_dofs.T @ h0phi),
        beta_kin=float(level.phit[:, l] @ h0phi),
        c_hh=audit("c_Hh", emb.psi_dofs.T @ mphi),
        gamma=float(level.phit[:, l] @ mphi),
    )


# -- the small eigenproblem ----------------------------------------------------


@dataclass
class CorrectionState:
    """Coefficients of ``theta phi~ + sum_m c_m psi_m`` and its eigenvalue."""

    c: np.ndarray
    theta: float
    eigenvalue: float = np.nan

    @property
    def vector(self) -> np.ndarray:
        return np.append(self.c, self.theta)


def block_mass(cache: CorrectionCache) -> np.ndarray:
    n = cache.run.n_coarse
    B = np.empty((n + 1, n + 1))
    B[:n, :n] = cache.run.mass
    B[:n, n] = B[n, :n] = cache.c_hh
    B[n, n] = cache.gamma
    return B


def assemble_block_operator(cache: CorrectionCache, state: CorrectionState, audit: Optional[MemoryAudit] = None) -> np.ndarray:
    """The ``(N_H + 1)``-square Fock matrix on the correction space.

    Only tensor contractions; rows and columns ``0..N_H-1`` are the coarse
    basis and the last one is ``phi~``.
    """
    audit = audit or (lambda name, a: a)
    run = cache.run
    n = run.n_coarse
    lvl = cache.level
    l = cache.orbital
    f = lvl.occupations
    g = lvl.exchange_weights
    c, t = np.asarray(state.c, float), float(state.theta)
    cc = audit("c kron c", np.kron(c, c))

    # self terms (s = l)
    vt_c = audit("Vt.c", (cache.vt.T @ c).reshape(n, n))  # sum_m c_m Vt[m, j, i]
    v4_cc = audit("V4.cc", (run.v4.T @ cc).reshape(n, n))  # sum_mn c_m c_n V4[m, n, j, i]
    x = audit("Vt swap.c", (cache.vt_swap @ c).reshape(n, n))  # [m, i] -> sum_j c_j Vt[m, j, i]
    v4x_cc = audit("V4 swap.cc", (run.v4_swap @ cc).reshape(n, n))  # [j, i] -> sum c_m c_n V4[j, m, n, i]

    hart_a = t * t * cache.vtt + 2 * t * vt_c + v4_cc
    exch_a = t * t * cache.wt + t * (x + x.T) + v4x_cc
    hart_b = t * t * cache.v3 + 2 * t * (c @ cache.wt) + cache.vt @ cc
    exch_b = t * t * cache.v3 + t * (c @ cache.vtt) + t * (c @ cache.wt) + c @ x
    wt3 = c @ cache.v3
    hart_beta = t * t * cache.v4s + 2 * t * wt3 + c @ cache.vtt @ c
    exch_beta = t * t * cache.v4s + 2 * t * wt3 + c @ cache.wt @ c

    A = audit("A_H block", np.empty((n + 1, n + 1)))
    # coarse-coarse pieces are held in [j, i] layout
    a = run.a_kin + f[l] * hart_a - g[l] * exch_a
    b = cache.b_kin + f[l] * hart_b - g[l] * exch_b
    beta = cache.beta_kin + f[l] * hart_beta - g[l] * exch_beta
    for s in range(lvl.n_orbitals):
        if s == l:
            continue
        a = a + f[s] * lvl.cross_vtt[s] - g[s] * lvl.cross_wt[s]
        b = b + f[s] * cache.v3_cross1[s] - g[s] * cache.v3_cross2[s]
        beta += f[s] * cache.v4_cross1[s] - g[s] * cache.v4_cross2[s]
    A[:n, :n] = a.T
    A[:n, n] = A[n, :n] = b
    A[n, n] = beta
    return A


def assemble_block_direct(level: CorrectionLevel, l: int, state: CorrectionState) -> np.ndarray:
    """Oracle: the same matrix from fresh Poisson solves and fine quadrature."""
    space = level.space
    emb = level.emb
    n = level.run.n_coarse
    basis = np.column_stack([emb.psi_dofs.toarray(), level.phit[:, l]])
    bn = space.to_nodal(basis)
    f, g = level.occupations, level.exchange_weights
    A = basis.T @ (level.system.core @ basis)
    poisson = level.system.poisson
    for s in range(level.n_orbitals):
        phi_s = bn @ state.vector if s == l else level.phit_nodal[:, s]
        v_ss = poisson.solve_product(phi_s, phi_s)
        A += f[s] * (basis.T @ (space.weighted_mass(v_ss) @ basis))
        v_sj = poisson.solve_load(space.load_full(bn, phi_s))  # V(phi_s b_j)
        ex = np.stack([space.load(v_sj[:, j], phi_s) for j in range(n + 1)], axis=1)  # [i, j]
        A -= g[s] * (basis.T @ ex)
    return A


@dataclass
class CorrectionReport:
    eigenvalues: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0


def correction_scf(
    cache: CorrectionCache,
    state: Optional[CorrectionState] = None,
    tol: float = 1e-10,
    max_iter: int = 100,
    force_iterations: Optional[int] = None,
    audit: Optional[MemoryAudit] = None,
) -> tuple[CorrectionState, CorrectionReport]:
    """SCF loop on the correction space of one orbital.

    Starts from ``theta = 1, c = 0`` unless ``state`` is given. Each sweep
    assembles the block operator, solves the dense generalized problem and
    keeps the eigenvector with the largest mass overlap with the previous
    state. Stops when the relative eigenvalue change is at most ``tol``
    (``tol = inf`` gives exactly one solve) or after ``force_iterations``.
    """
    t0 = time.perf_counter()
    n = cache.run.n_coarse
    audit = audit or MemoryAudit(n, cache.level.n_orbitals)
    if state is None:
        state = CorrectionState(np.zeros(n), 1.0)
    B = audit("block mass", block_mass(cache))
    report = CorrectionReport()
    prev = state.vector
    lam_old = None
    n_iter = force_iterations if force_iterations is not None else max_iter
    for it in range(1, n_iter + 1):
        A = assemble_block_operator(cache, state, audit)
        res = solve_dense_generalized(A, B)
        audit("eigenvectors", res.vectors)
        overlaps = audit("overlaps", np.abs(res.vectors.T @ (B @ prev)))
        k = int(np.argmax(overlaps))
        v = res.vectors[:, k]
        if v @ (B @ prev) < 0:
            v = -v
        lam = float(res.values[k])
        state = CorrectionState(v[:n].copy(), float(v[n]), lam)
        prev = v
        change = np.inf if lam_old is None else abs(lam - lam_old) / abs(lam)
        report.eigenvalues.append(lam)
        report.changes.append(change)
        report.iterations = it
        lam_old = lam
        if force_iterations is None and (change <= tol or np.isinf(tol)):
            break
    report.converged = bool(np.isinf(tol) or (report.changes and report.changes[-1] <= tol))
    report.wall_time = time.perf_counter() - t0
    return state, report


def reconstruct_orbital(state: CorrectionState, level: CorrectionLevel, l: int) -> np.ndarray:
    """Fine dof coefficients of ``theta phi~_l + sum_m c_m psi_m``, normalized."""
    u = state.theta * level.phit[:, l] + level.emb.psi_dofs @ state.c
    return u / np.sqrt(u @ (level.space.mass @ u))


def exchange_for_next_level(states: Sequence[CorrectionState], level: CorrectionLevel) -> np.ndarray:
    """Pair potentials ``V(phi_l phi_s)`` of the corrected orbitals.

    Linear combinations of cached potentials only::

        theta_l theta_s Vtt_ls + theta_s sum_m c_lm Vt_sm
            + theta_l sum_m c_sm Vt_lm + sum_mn c_lm c_sn V_mn

    The orbitals are not renormalized here; ``reconstruct_orbital`` and
    this routine agree because the correction states are mass-normalized.
    """
    N = len(states)
    out = np.empty((level.space.n_vertices, N, N))
    for l in range(N):
        for s in range(l, N):
            tl, ts = states[l].theta, states[s].theta
            cl, cs = states[l].c, states[s].c
            v = tl * ts * level.type1[:, l, s]
            v = v + ts * (level.type2[:, s, :] @ cl) + tl * (level.type2[:, l, :] @ cs)
            v = v + level.run_prolong @ level.run.combine(cl, cs)
            out[:, l, s] = out[:, s, l] = v
    return out


@dataclass
class CorrectionResult:
    orbitals: OrbitalSet
    pairs: np.ndarray
    states: list
    reports: list
    level: CorrectionLevel
    orthogonality_drift: float
    poisson_solves: int
    scf_iterations: int


def correct_orbitals(
    system: HFSystem,
    run: RunConstantCache,
    prev_nodal: np.ndarray,
    prev_eigenvalues: np.ndarray,
    prev_pairs_nodal: np.ndarray,
    occupations: np.ndarray,
    exchange_weights: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
    force_iterations: Optional[int] = None,
    audit: Optional[MemoryAudit] = None,
    threads: int = 1,
) -> CorrectionResult:
    """One full correction step on ``system.space``.

    Inputs from the previous level must already be prolonged to the new
    space. The corrected orbitals are re-orthonormalized (Loewdin) and
    their pair potentials transformed accordingly. With ``threads > 1`` the
    independent per-orbital problems run in a thread pool; results are
    collected in orbital order, so the output does not depend on scheduling.
    """
    phit = solve_linearized_bvp(system, prev_nodal, prev_eigenvalues, prev_pairs_nodal, occupations, exchange_weights)
    level = build_correction_level(system, run, phit, occupations, exchange_weights, audit)
    N = phit.shape[1]

    def one(l):
        cache = build_correction_cache(level, l, audit)
        return correction_scf(cache, None, tol, max_iter, force_iterations, audit)

    if threads > 1 and N > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(one, range(N)))
    else:
        done = [one(l) for l in range(N)]
    states = [d[0] for d in done]
    reports = [d[1] for d in done]
    raw = np.column_stack([st.theta * level.phit[:, l] + level.emb.psi_dofs @ st.c for l, st in enumerate(states)])
    norms = np.sqrt(np.einsum("il,il->l", raw, system.space.mass @ raw))
    coeffs = raw / norms
    pairs = exchange_for_next_level(states, level) / np.outer(norms, norms)[None]
    S = coeffs.T @ (system.space.mass @ coeffs)
    drift = float(np.abs(S - np.eye(N)).max())
    w, U = np.linalg.eigh(S)
    X = (U / np.sqrt(w)) @ U.T
    coeffs = coeffs @ X
    pairs = np.einsum("vls,la,sb->vab", pairs, X, X)
    eig = np.array([st.eigenvalue for st in states])
    orbitals = OrbitalSet(system.space, coeffs, eig, np.asarray(occupations, float), np.asarray(exchange_weights, float))
    return CorrectionResult(
        orbitals=orbitals,
        pairs=pairs,
        states=states,
        reports=reports,
        level=level,
        orthogonality_drift=drift,
        poisson_solves=level.type1_solves + level.type2_solves,
        scf_iterations=max(r.iterations for r in reports),
    )

