"""Piecewise-linear finite element spaces with homogeneous Dirichlet data.

Degrees of freedom are the interior mesh vertices. Most routines come in two
flavours: a ``*_full`` version acting on all vertices (needed for boundary
lifting and for products of functions) and a restricted version acting on
the degrees of freedom only.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

__all__ = ["FeSpace", "FeFunction", "tet_quadrature", "triple_product_tensor", "prolongation"]


def tet_quadrature() -> tuple[np.ndarray, np.ndarray]:
    """Fourteen-point rule on the reference simplex, exact for degree five.

    Returns barycentric points ``(14, 4)`` and weights summing to one (so the
    integral over a tet is ``vol * weights @ values``).
    """
    pts, wts = [], []
    for a, w in ((0.09273525031089123, 0.07349304311636196), (0.31088591926330060, 0.11268792571801585)):
        for i in range(4):
            lam = [a] * 4
            lam[i] = 1.0 - 3.0 * a
            pts.append(lam)
            wts.append(w)
    a = 0.04550370412564965
    for i, j in itertools.combinations(range(4), 2):
        lam = [a] * 4
        lam[i] = lam[j] = 0.5 - a
        pts.append(lam)
        wts.append(0.04254602077708147)
    wts = np.asarray(wts)
    return np.asarray(pts), wts / wts.sum()


def triple_product_tensor() -> np.ndarray:
    """``t[a, b, c] = (1/|T|) * integral of lambda_a lambda_b lambda_c`` over a tet."""
    t = np.empty((4, 4, 4))
    for a, b, c in itertools.product(range(4), repeat=3):
        t[a, b, c] = (1 + (a == b) + (b == c) + (a == c) + 2 * (a == b == c)) / 120.0
    return t


_TRIPLE = triple_product_tensor()
_PAIR = (np.ones((4, 4)) + np.eye(4)) / 20.0  # (1/|T|) * integral of lambda_a lambda_b


class FeSpace:
    """Continuous P1 space on a mesh, zero on the box surface.

    Parameters
    ----------
    mesh : Mesh
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        interior = ~mesh.boundary_vertex_mask
        self.dofs = np.flatnonzero(interior)
        self.dof_index = np.full(mesh.n_vertices, -1, dtype=np.int64)
        self.dof_index[self.dofs] = np.arange(self.dofs.size)

    def __repr__(self):
        return f"FeSpace(n_dofs={self.n_dofs}, n_tets={self.mesh.n_tets})"

    @property
    def n_dofs(self) -> int:
        return int(self.dofs.size)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    # -- element geometry ---------------------------------------------------

    @cached_property
    def volumes(self) -> np.ndarray:
        return self.mesh.volumes

    @cached_property
    def gradients(self) -> np.ndarray:
        """Constant gradients of the four barycentric functions, ``(nt, 4, 3)``."""
        p = self.mesh.vertices[self.mesh.tets]
        jac = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))  # columns are edge vectors
        g = np.empty((len(p), 4, 3))
        g[:, 1:] = np.linalg.inv(jac)  # row i is grad lambda_i
        g[:, 0] = -g[:, 1:].sum(axis=1)
        return g

    @cached_property
    def _quad(self):
        return tet_quadrature()

    def tet_blocks(self, size: int = 100_000):
        """Slices over the tets, to bound temporaries on large meshes."""
        nt = self.mesh.n_tets
        for start in range(0, nt, size):
            yield slice(start, min(start + size, nt))

    def quadrature_points(self, tets=slice(None)) -> np.ndarray:
        """Physical quadrature points ``(nt, 14, 3)`` (not cached)."""
        lam, _ = self._quad
        return np.einsum("qa,tad->tqd", lam, self.mesh.vertices[self.mesh.tets[tets]])

    def quadrature_weights(self, tets=slice(None)) -> np.ndarray:
        """Physical weights ``(nt, 14)``."""
        return self.volumes[tets, None] * self._quad[1][None, :]

    def at_quadrature(self, nodal: np.ndarray, tets=slice(None)) -> np.ndarray:
        """Values of full-vertex P1 functions at quadrature points.

        ``nodal`` may be ``(nv,)`` or ``(nv, k)``; the result is ``(nt, 14)``
        or ``(nt, 14, k)``.
        """
        lam = self._quad[0]
        return np.einsum("qa,ta...->tq...", lam, nodal[self.mesh.tets[tets]])

    # -- assembly -----------------------------------------------------------

    def _assemble(self, local: np.ndarray) -> sp.csr_matrix:
        t = self.mesh.tets
        rows = np.repeat(t, 4, axis=1).ravel()
        cols = np.tile(t, (1, 4)).ravel()
        n = self.n_vertices
        mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        mat.sum_duplicates()
        return mat

    def restrict(self, mat: sp.spmatrix) -> sp.csr_matrix:
        """Rows and columns of a full-vertex matrix belonging to dofs."""
        return sp.csr_matrix(mat[self.dofs][:, self.dofs])

    @cached_property
    def stiffness_full(self) -> sp.csr_matrix:
        g = self.gradients
        local = np.einsum("tad,tbd->tab", g, g) * self.volumes[:, None, None]
        return self._assemble(local)

    @cached_property
    def mass_full(self) -> sp.csr_matrix:
        local = self.volumes[:, None, None] * _PAIR[None]
        return self._assemble(local)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """``A[i, j] = integral grad psi_i . grad psi_j``."""
        return self.restrict(self.stiffness_full)

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return self.restrict(self.mass_full)

    def weighted_mass_full(self, weight: np.ndarray) -> sp.csr_matrix:
        """Exact ``integral w psi_a psi_b`` for a P1 weight given at all vertices."""
        w = weight[self.mesh.tets]
        local = np.einsum("abc,tc->tab", _TRIPLE, w) * self.volumes[:, None, None]
        return self._assemble(local)

    def weighted_mass(self, weight: np.ndarray) -> sp.csr_matrix:
        return self.restrict(self.weighted_mass_full(weight))

    def potential_matrix(self, func: Callable[[np.ndarray], np.ndarray]) -> sp.csr_matrix:
        """``integral V psi_i psi_j`` for a callable ``V(points) -> values``,
        using the degree-five rule (suited to smooth or mildly singular V)."""
        return self.restrict(self.potential_matrix_full(func))

    def potential_matrix_full(self, func) -> sp.csr_matrix:
        vals = self.evaluate_callable(func)
        lam = self._quad[0]
        local = np.einsum("tq,qa,qb->tab", vals * self.quadrature_weights(), lam, lam)
        return self._assemble(local)

    def coulomb_matrix(self, charges, positions, near: float = 1.5, order: int = 8) -> sp.csr_matrix:
        """``integral V psi_i psi_j`` for ``V = -sum_k Z_k / |x - R_k|``.

        Tets within ``near`` diameters of a nucleus are integrated by splitting
        them into signed cones with apex at the nucleus; a Duffy map removes
        the singularity and a tensor Gauss rule with ``order`` points per
        direction integrates the rest. Other tets use the degree-five rule.
        """
        return self.restrict(self.coulomb_matrix_full(charges, positions, near, order))

    def coulomb_matrix_full(self, charges, positions, near: float = 1.5, order: int = 8) -> sp.csr_matrix:
        charges = np.atleast_1d(np.asarray(charges, dtype=float))
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        lam = self._quad[0]
        local = np.zeros((self.mesh.n_tets, 4, 4))
        for blk in self.tet_blocks():
            pts = self.quadrature_points(blk)
            wts = self.quadrature_weights(blk)
            for z, r in zip(charges, positions):
                vals = -z / np.maximum(np.linalg.norm(pts - r, axis=2), 1e-300)
                local[blk] += np.einsum("tq,qa,qb->tab", vals * wts, lam, lam)
        centroids = self.mesh.vertices[self.mesh.tets].mean(axis=1)
        for z, r in zip(charges, positions):
            close = np.flatnonzero(np.linalg.norm(centroids - r, axis=1) <= near * self.mesh.tet_diameters)
            pts = self.quadrature_points(close)
            vals = -z / np.maximum(np.linalg.norm(pts - r, axis=2), 1e-300)
            local[close] -= np.einsum("tq,qa,qb->tab", vals * self.quadrature_weights(close), lam, lam)
            local[close] += -z * _singular_mass(self.mesh.vertices[self.mesh.tets[close]], self.gradients[close], r, order)
        return self._assemble(local)

    def evaluate_callable(self, func, tets=slice(None)) -> np.ndarray:
        pts = self.quadrature_points(tets)
        return np.asarray(func(pts.reshape(-1, 3)), dtype=float).reshape(pts.shape[:2])

    def _scatter(self, local: np.ndarray) -> np.ndarray:
        idx = self.mesh.tets.ravel()
        flat = local.reshape(idx.size, -1)
        cols = [np.bincount(idx, weights=flat[:, k], minlength=self.n_vertices) for k in range(flat.shape[1])]
        return np.stack(cols, axis=1).reshape((self.n_vertices,) + local.shape[2:])

    def load_full(self, u: np.ndarray, v: Optional[np.ndarray] = None) -> np.ndarray:
        """``b[a] = integral u v psi_a`` (or ``integral u psi_a``) for P1 ``u, v``.

        Exact. ``u`` and ``v`` are full-vertex arrays; a second trailing axis
        on ``u`` is broadcast (several right-hand sides at once).
        """
        t = self.mesh.tets
        vol = self.volumes
        if v is None:
            local = np.einsum("ab,tb...->ta...", _PAIR, u[t]) * vol.reshape((-1, 1) + (1,) * (u.ndim - 1))
        else:
            if u.ndim > 1 and v.ndim == 1:
                v = v[:, None]
            local = np.einsum("abc,tb...,tc...->ta...", _TRIPLE, u[t], v[t])
            local *= vol.reshape((-1, 1) + (1,) * (local.ndim - 2))
        return self._scatter(local)

    def load(self, u: np.ndarray, v: Optional[np.ndarray] = None) -> np.ndarray:
        return self.load_full(u, v)[self.dofs]

    def load_callable_full(self, func, times: Optional[np.ndarray] = None) -> np.ndarray:
        """``integral f (times) psi_a`` with ``f`` a callable and optional P1 factor."""
        vals = self.evaluate_callable(func) * self.quadrature_weights()
        if times is not None:
            vals = vals * self.at_quadrature(times)
        return self._scatter(np.einsum("tq,qa->ta", vals, self._quad[0]))

    # -- functions ----------------------------------------------------------

    def to_nodal(self, coeffs: np.ndarray, boundary: Optional[np.ndarray] = None) -> np.ndarray:
        """Full-vertex values from dof coefficients (boundary defaults to 0)."""
        coeffs = np.asarray(coeffs)
        shape = (self.n_vertices,) + coeffs.shape[1:]
        out = np.zeros(shape) if boundary is None else np.array(boundary, dtype=float, copy=True).reshape(shape)
        out[self.dofs] = coeffs
        return out

    def interpolate(self, func) -> np.ndarray:
        """Nodal interpolant of a callable at all vertices."""
        return np.asarray(func(self.mesh.vertices), dtype=float)

    def integrate(self, nodal: np.ndarray) -> float:
        return float(np.einsum("t,t...->...", self.volumes, nodal[self.mesh.tets].mean(axis=1)))

    def l2_norm(self, nodal: np.ndarray) -> float:
        return float(np.sqrt(nodal @ (self.mass_full @ nodal)))

    def evaluate(self, nodal: np.ndarray, points) -> np.ndarray:
        """Point values of a P1 function; NaN outside the box."""
        ids, bary = self.mesh.locate(points)
        vals = np.einsum("pa,pa...->p...", bary, nodal[self.mesh.tets[np.maximum(ids, 0)]])
        vals = np.asarray(vals, dtype=float)
        vals[ids < 0] = np.nan
        return vals

    # -- nested spaces ------------------------------------------------------

    def prolongation_full(self, coarse: "FeSpace") -> sp.csr_matrix:
        """Exact embedding of P1 functions on an ancestor mesh, all vertices."""
        return prolongation(coarse.mesh, self.mesh)

    def prolongation(self, coarse: "FeSpace") -> sp.csr_matrix:
        """Embedding from coarse dofs to fine dofs."""
        return sp.csr_matrix(self.prolongation_full(coarse)[self.dofs][:, coarse.dofs])

    def function(self, coeffs, boundary=None) -> "FeFunction":
        return FeFunction(self, np.asarray(coeffs, dtype=float), boundary)


def _singular_mass(corners: np.ndarray, grads: np.ndarray, r: np.ndarray, order: int) -> np.ndarray:
    """``integral lambda_a lambda_b / |x - r|`` over tets ``corners`` (m, 4, 3)."""
    g, w = np.polynomial.legendre.leggauss(order)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    s, u, v = (a.ravel() for a in np.meshgrid(g, g, g, indexing="ij"))
    wq = np.einsum("i,j,k->ijk", w, w, w).ravel()
    out = np.zeros((corners.shape[0], 4, 4))
    for k in range(4):
        base = np.delete(corners, k, axis=1) - r  # (m, 3, 3) apex at r
        det_t = np.linalg.det(corners[:, 1:] - corners[:, :1])
        det = (-1) ** k * np.sign(det_t) * np.linalg.det(base)  # signed 6 |T_k|, T_k = T with corner k -> r
        keep = np.abs(det) > 1e-14 * np.abs(det_t)
        if not keep.any():
            continue
        b = base[keep]
        d = b[:, None, 0] + u[None, :, None] * (b[:, None, 1] - b[:, None, 0]) + (u * v)[None, :, None] * (b[:, None, 2] - b[:, None, 1])
        x = r + s[None, :, None] * d  # (m, q, 3)
        rel = x - corners[keep][:, None, 0]
        bary = np.empty(x.shape[:2] + (4,))
        bary[..., 1:] = np.einsum("mqd,mad->mqa", rel, grads[keep][:, 1:])
        bary[..., 0] = 1.0 - bary[..., 1:].sum(axis=2)
        # 1/|x - r| times the Duffy Jacobian s^2 u |det| leaves s u |det| / |d|
        wt = wq[None] * s[None] * u[None] / np.linalg.norm(d, axis=2) * (np.sign(det[keep]) * np.abs(np.linalg.det(b)))[:, None]
        out[keep] += np.einsum("mq,mqa,mqb->mab", wt, bary, bary)
    return out


def _one_step(mesh: Mesh) -> sp.csr_matrix:
    """Prolongation from ``mesh.previous`` to ``mesh`` on all vertices."""
    n_old = mesh.previous.n_vertices
    mats = []
    n = n_old
    start = 0
    for count in mesh.midpoint_rounds:
        pairs = mesh.midpoint_parents[start : start + count]
        rows = np.concatenate([np.arange(n), n + np.repeat(np.arange(count), 2)])
        cols = np.concatenate([np.arange(n), pairs.ravel()])
        vals = np.concatenate([np.ones(n), np.full(2 * count, 0.5)])
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(n + count, n)))
        n += count
        start += count
    out = sp.identity(n_old, format="csr")
    for m in mats:
        out = m @ out
    return sp.csr_matrix(out)


def prolongation(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """Full-vertex interpolation matrix from an ancestor mesh to ``fine``."""
    if not fine.is_descendant_of(coarse):
        raise ValueError("fine mesh is not a refinement of the coarse mesh")
    chain = []
    m = fine
    while m is not coarse:
        chain.append(m)
        m = m.previous
    out = sp.identity(coarse.n_vertices, format="csr")
    for m in reversed(chain):
        cache = m.__dict__.setdefault("_prolong_step", None)
        if cache is None:
            cache = _one_step(m)
            m.__dict__["_prolong_step"] = cache
        out = cache @ out
    out = sp.csr_matrix(out)
    out.eliminate_zeros()
    return out


@dataclass
class FeFunction:
    """A P1 function: dof coefficients plus optional boundary values."""

    space: FeSpace
    coeffs: np.ndarray
    boundary_values: Optional[np.ndarray] = None

    def nodal(self) -> np.ndarray:
        return self.space.to_nodal(self.coeffs, self.boundary_values)

    def __call__(self, points) -> np.ndarray:
        return self.space.evaluate(self.nodal(), points)
