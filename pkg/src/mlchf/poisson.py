"""Coulomb potentials on a finite box.

Solves ``-Laplace u = 4 pi f`` for P1 data ``f`` and returns P1 potentials.
Dirichlet values on the box surface come from a truncated multipole expansion
(through quadrupoles) about a fixed centre.

The default ``"multipole"`` rule does not evaluate the moments of ``f``
directly. Each exterior solid harmonic ``Y_k`` is extended harmonically into
the box (``H_k``) once per space, and the expansion weights are recovered from
the projections ``y_k = integral f H_k`` through Green's identity::

    y = C mu,   C = (E_ext + E_int) / (4 pi),
    E_int[k, l] = integral_box  grad H_k . grad H_l,
    E_ext[k, l] = -surface integral of Y_k dY_l/dn.

In the continuum this returns the exact moments whenever ``f`` vanishes near
the surface. Discretely it makes the solution operator symmetric, so
``integral solve(f) g == integral solve(g) f`` to rounding error; the tensor
identities used by the correction scheme depend on that.
``"moments"`` evaluates the moments directly instead and ``"zero"`` uses
homogeneous boundary values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import FeSpace

__all__ = [
    "SpdSolver",
    "PoissonSolver",
    "PoissonProblem",
    "solve_poisson",
    "solve_pair_potentials",
    "solid_harmonics",
    "SolverError",
]

FOUR_PI = 4.0 * np.pi
DIRECT_LIMIT = 6000


class SolverError(RuntimeError):
    """A linear or eigen solver failed to reach its tolerance."""


class SpdSolver:
    """Reusable solver for one sparse SPD matrix.

    Small systems are factorized once with SuperLU. Larger ones use
    conjugate gradients preconditioned by smoothed-aggregation AMG, to a
    relative residual of ``rtol``.
    """

    def __init__(self, matrix: sp.spmatrix, rtol: float = 1e-10, direct_limit: int = DIRECT_LIMIT, maxiter: int = 500):
        self.matrix = sp.csr_matrix(matrix)
        self.rtol = rtol
        self.maxiter = maxiter
        self.direct = self.matrix.shape[0] <= direct_limit
        if self.direct:
            self._lu = spla.splu(self.matrix.tocsc())
        else:
            import pyamg

            self._amg = pyamg.smoothed_aggregation_solver(self.matrix, symmetry="symmetric")
            self._prec = self._amg.aspreconditioner(cycle="V")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] == 0:
            return np.zeros_like(b)
        if self.direct:
            return self._lu.solve(b)
        if b.ndim == 2:
            return np.stack([self.solve(b[:, k]) for k in range(b.shape[1])], axis=1)
        bn = np.linalg.norm(b)
        if bn == 0.0:
            return np.zeros_like(b)
        x, info = spla.cg(self.matrix, b, rtol=self.rtol, atol=0.0, maxiter=self.maxiter, M=self._prec)
        if info != 0:
            res = np.linalg.norm(b - self.matrix @ x) / bn
            raise SolverError(f"conjugate gradients stopped after {info} iterations, residual {res:.2e}")
        return x


def solid_harmonics(order: int = 2):
    """Real orthonormal solid harmonics ``r^l Y_lm`` up to ``order``.

    Each entry is ``(l, c0, g, Q)`` with ``p(x) = c0 + g.x + x^T Q x``.
    """
    if order not in (0, 1, 2):
        raise ValueError("multipole order must be 0, 1 or 2")
    out = [(0, 1.0 / (2.0 * np.sqrt(np.pi)), np.zeros(3), np.zeros((3, 3)))]
    if order >= 1:
        c1 = np.sqrt(3.0 / (4.0 * np.pi))
        for a in range(3):
            g = np.zeros(3)
            g[a] = c1
            out.append((1, 0.0, g, np.zeros((3, 3))))
    if order >= 2:
        c2 = 0.5 * np.sqrt(15.0 / np.pi)
        for a, b in ((0, 1), (1, 2), (0, 2)):
            q = np.zeros((3, 3))
            q[a, b] = q[b, a] = 0.5 * c2
            out.append((2, 0.0, np.zeros(3), q))
        cz = 0.25 * np.sqrt(5.0 / np.pi)
        out.append((2, 0.0, np.zeros(3), cz * np.diag([-1.0, -1.0, 2.0])))
        cxy = 0.25 * np.sqrt(15.0 / np.pi)
        out.append((2, 0.0, np.zeros(3), cxy * np.diag([1.0, -1.0, 0.0])))
    return out


class _Multipoles:
    """Interior polynomials ``p_k`` and exterior harmonics
    ``Y_k = 4 pi / (2l+1) p_k / r^(2l+1)`` about ``center``."""

    def __init__(self, center, order):
        self.center = np.asarray(center, dtype=float)
        self.terms = solid_harmonics(order)

    def __len__(self):
        return len(self.terms)

    def interior(self, x):
        d = np.asarray(x, float) - self.center
        return np.stack([c0 + d @ g + np.einsum("pi,ij,pj->p", d, q, d) for _, c0, g, q in self.terms], axis=1)

    def exterior(self, x):
        d = np.asarray(x, float) - self.center
        r = np.linalg.norm(d, axis=1)
        p = self.interior(x)
        ls = np.array([t[0] for t in self.terms])
        return p * (FOUR_PI / (2 * ls + 1)) / r[:, None] ** (2 * ls + 1)

    def exterior_grad(self, x):
        """``(n_points, n_terms, 3)`` gradients of the exterior harmonics."""
        d = np.asarray(x, float) - self.center
        r = np.linalg.norm(d, axis=1)
        out = np.empty((len(d), len(self.terms), 3))
        for k, (l, c0, g, q) in enumerate(self.terms):
            p = c0 + d @ g + np.einsum("pi,ij,pj->p", d, q, d)
            gp = g[None, :] + 2.0 * d @ q
            s = FOUR_PI / (2 * l + 1)
            out[:, k] = s * (gp / r[:, None] ** (2 * l + 1) - (2 * l + 1) * p[:, None] * d / r[:, None] ** (2 * l + 3))
        return out


def _surface_quadrature(bounds, panels=8, npts=8):
    """Tensor Gauss-Legendre points, weights and outward normals on a box surface."""
    xg, wg = np.polynomial.legendre.leggauss(npts)
    pts, wts, nrm = [], [], []
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        edges_u = np.linspace(lo[u], hi[u], panels + 1)
        edges_v = np.linspace(lo[v], hi[v], panels + 1)
        cu = (0.5 * (edges_u[1:, None] + edges_u[:-1, None]) + 0.5 * np.diff(edges_u)[:, None] * xg).ravel()
        wu = (0.5 * np.diff(edges_u)[:, None] * wg).ravel()
        cv = (0.5 * (edges_v[1:, None] + edges_v[:-1, None]) + 0.5 * np.diff(edges_v)[:, None] * xg).ravel()
        wv = (0.5 * np.diff(edges_v)[:, None] * wg).ravel()
        U, V = np.meshgrid(cu, cv, indexing="ij")
        W = np.outer(wu, wv)
        for side, val in ((-1.0, lo[ax]), (1.0, hi[ax])):
            p = np.empty((U.size, 3))
            p[:, ax] = val
            p[:, u] = U.ravel()
            p[:, v] = V.ravel()
            n = np.zeros(3)
            n[ax] = side
            pts.append(p)
            wts.append(W.ravel())
            nrm.append(np.broadcast_to(n, p.shape))
    return np.concatenate(pts), np.concatenate(wts), np.concatenate(nrm)


class PoissonSolver:
    """Coulomb potentials of P1 densities on one finite element space.

    Parameters
    ----------
    space : FeSpace
    boundary : {"multipole", "moments", "zero"}
    order : int
        Multipole truncation order (0, 1 or 2).
    center : array_like, optional
        Expansion centre; defaults to the box centre. Keep it fixed for a
        given space so the solve stays linear.
    rtol : float
        Relative residual for the iterative path.

    Attributes
    ----------
    n_solves : int
        Number of right-hand sides solved so far (one per potential).
    """

    def __init__(self, space: FeSpace, boundary: str = "multipole", order: int = 2, center=None, rtol: float = 1e-10):
        if boundary not in ("multipole", "moments", "zero"):
            raise ValueError(f"unknown boundary rule {boundary!r}")
        self.space = space
        self.boundary = boundary
        self.order = order
        bounds = space.mesh.bounds
        self.center = 0.5 * (bounds[0] + bounds[1]) if center is None else np.asarray(center, dtype=float)
        self.multipoles = _Multipoles(self.center, order)
        self.rtol = rtol
        self.n_solves = 0
        self._bmask = space.mesh.boundary_vertex_mask

    @cached_property
    def linear_solver(self) -> SpdSolver:
        return SpdSolver(self.space.stiffness, rtol=self.rtol)

    @cached_property
    def harmonic_extensions(self) -> np.ndarray:
        """Full-vertex discrete harmonic extensions ``H_k`` of the exterior harmonics."""
        sp_ = self.space
        H = np.zeros((sp_.n_vertices, len(self.multipoles)))
        H[self._bmask] = self.multipoles.exterior(sp_.mesh.vertices[self._bmask])
        rhs = -(sp_.stiffness_full[sp_.dofs] @ H)
        H[sp_.dofs] = self.linear_solver.solve(rhs)
        return H

    @cached_property
    def coupling(self) -> np.ndarray:
        """The symmetric matrix ``C`` relating projections to expansion weights."""
        H = self.harmonic_extensions
        e_int = H.T @ (self.space.stiffness_full @ H)
        pts, wts, nrm = _surface_quadrature(self.space.mesh.bounds)
        Y = self.multipoles.exterior(pts)
        dY = np.einsum("pkd,pd->pk", self.multipoles.exterior_grad(pts), nrm)
        e_ext = -(Y * wts[:, None]).T @ dY
        c = (e_int + e_ext) / FOUR_PI
        return 0.5 * (c + c.T)

    @cached_property
    def _interior_polys(self):
        return self.multipoles.interior(self.space.mesh.vertices)

    def expansion_weights(self, load_full: np.ndarray) -> np.ndarray:
        """Multipole weights ``mu`` from the full-vertex load ``integral f psi_a``."""
        if self.boundary == "multipole":
            y = self.harmonic_extensions.T @ load_full
            return np.linalg.solve(self.coupling, y)
        return self._interior_polys.T @ load_full

    def solve_load(self, load_full: np.ndarray) -> np.ndarray:
        """Potential for the density with full-vertex load vector ``load_full``.

        Accepts ``(nv,)`` or ``(nv, k)``; returns full-vertex nodal values of
        the same shape.
        """
        sp_ = self.space
        load_full = np.asarray(load_full, dtype=float)
        ncols = 1 if load_full.ndim == 1 else load_full.shape[1]
        self.n_solves += ncols
        u = np.zeros_like(load_full)
        u[sp_.dofs] = self.linear_solver.solve(FOUR_PI * load_full[sp_.dofs])
        if self.boundary == "zero":
            return u
        mu = self.expansion_weights(load_full)
        if self.boundary == "multipole":
            return u + self.harmonic_extensions @ mu
        # direct moments: lift the boundary values through the interior
        g = np.zeros_like(load_full)
        g[self._bmask] = self.multipoles.exterior(sp_.mesh.vertices[self._bmask]) @ mu
        corr = self.linear_solver.solve(-(sp_.stiffness_full[sp_.dofs] @ g))
        g[sp_.dofs] = corr
        return u + g

    def solve_density(self, f_nodal: np.ndarray) -> np.ndarray:
        """Potential of a P1 density given at all vertices."""
        return self.solve_load(self.space.load_full(f_nodal))

    def solve_product(self, u_nodal: np.ndarray, v_nodal: np.ndarray) -> np.ndarray:
        """Potential of the product of two P1 functions (exact load)."""
        return self.solve_load(self.space.load_full(u_nodal, v_nodal))

    def solve_callable(self, func) -> np.ndarray:
        """Potential of a density given as a callable (quadrature load)."""
        return self.solve_load(self.space.load_callable_full(func))

    def boundary_values(self, load_full: np.ndarray) -> np.ndarray:
        """Multipole values at boundary vertices implied by a load vector."""
        mu = self.expansion_weights(load_full)
        return self.multipoles.exterior(self.space.mesh.vertices[self._bmask]) @ mu


@dataclass
class PoissonProblem:
    """Right-hand side ``f`` (one P1 function, or the product of two)."""

    space: FeSpace
    left: np.ndarray
    right: Optional[np.ndarray] = None
    boundary: str = "multipole"
    order: int = 2
    center: Optional[np.ndarray] = None


def solve_poisson(problem: PoissonProblem, solver: Optional[PoissonSolver] = None) -> np.ndarray:
    """Solve one problem; pass ``solver`` to reuse its factorization."""
    if solver is None:
        solver = PoissonSolver(problem.space, problem.boundary, problem.order, problem.center)
    if problem.right is None:
        return solver.solve_density(problem.left)
    return solver.solve_product(problem.left, problem.right)


def solve_pair_potentials(solver: PoissonSolver, left: np.ndarray, right: Optional[np.ndarray] = None) -> np.ndarray:
    """Potentials of all products ``left[:, a] * right[:, b]``.

    ``left`` and ``right`` hold full-vertex nodal values column-wise. When
    ``right`` is omitted the set is paired with itself and each unordered
    pair is solved once. Returns an array ``(nv, n_left, n_right)``.
    """
    same = right is None
    right = left if same else right
    na, nb = left.shape[1], right.shape[1]
    out = np.empty((left.shape[0], na, nb))
    if same:
        iu, ju = np.triu_indices(na)
        loads = solver.space.load_full(left[:, iu], right[:, ju])
        pots = solver.solve_load(loads)
        out[:, iu, ju] = pots
        out[:, ju, iu] = pots
    else:
        ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
        loads = solver.space.load_full(left[:, ia.ravel()], right[:, ib.ravel()])
        out[:] = solver.solve_load(loads).reshape(-1, na, nb)
    return out
