"""Residual error indicators and Doerfler marking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hartree_fock import HFSystem, OrbitalSet

__all__ = ["IndicatorField", "compute_indicators", "dorfler_mark", "element_residuals", "jump_terms"]


@dataclass
class IndicatorField:
    """Squared indicators per tetrahedron."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("indicators must be finite and non-negative")

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def restricted(self, tets) -> float:
        return float(self.values[np.asarray(tets)].sum())


def element_residuals(system: HFSystem, orbitals: OrbitalSet, pairs: np.ndarray, hartree: Optional[np.ndarray] = None) -> np.ndarray:
    """``h_T^2 sum_l || (V_ext + V_H - lambda_l) phi_l - sum_s g_s V_ls phi_s ||_T^2``.

    The Laplacian term drops out because the orbitals are linear on each tet.
    """
    space = system.space
    phi = orbitals.nodal()
    if hartree is None:
        hartree = system.hartree(pairs, orbitals.occupations)
    g = orbitals.exchange_weights
    out = np.zeros(space.mesh.n_tets)
    for blk in space.tet_blocks():
        v_loc = space.evaluate_callable(system.molecule.external_potential, blk) + space.at_quadrature(hartree, blk)
        phi_q = space.at_quadrature(phi, blk)  # (nt, q, N)
        w = space.quadrature_weights(blk)
        for l in range(orbitals.n_orbitals):
            vls_q = space.at_quadrature(pairs[:, l, :], blk)
            r = (v_loc - orbitals.eigenvalues[l]) * phi_q[:, :, l] - np.einsum("tqs,tqs,s->tq", vls_q, phi_q, g)
            out[blk] += (w * r**2).sum(axis=1)
    return space.mesh.tet_diameters**2 * out


def jump_terms(space, nodal: np.ndarray) -> np.ndarray:
    """``sum over faces of T of h_e ||J_e||_e^2`` for P1 functions ``nodal`` (nv, k).

    ``J_e = 1/2 (grad u|T+ - grad u|T-) . nu+`` is constant on each face, so
    the face norm is exact.
    """
    mesh = space.mesh
    nodal = nodal.reshape(mesh.n_vertices, -1)
    grads = np.einsum("tad,tak->tkd", space.gradients, nodal[mesh.tets])
    ft = mesh.face_tets
    jump = 0.5 * np.einsum("fkd,fd->fk", grads[ft[:, 0]] - grads[ft[:, 1]], mesh.face_normals)
    per_face = mesh.face_diameters * mesh.face_areas * (jump**2).sum(axis=1)
    out = np.bincount(ft[:, 0], weights=per_face, minlength=mesh.n_tets)
    out += np.bincount(ft[:, 1], weights=per_face, minlength=mesh.n_tets)
    return out


def compute_indicators(system: HFSystem, orbitals: OrbitalSet, pairs: np.ndarray, hartree: Optional[np.ndarray] = None) -> IndicatorField:
    """Element plus face indicators summed over orbitals."""
    values = element_residuals(system, orbitals, pairs, hartree) + jump_terms(system.space, orbitals.nodal())
    return IndicatorField(values)


def dorfler_mark(indicators, theta: float) -> np.ndarray:
    """Smallest set of tets carrying a ``theta`` fraction of the total.

    Sorted by decreasing value with ties broken by increasing id; the result
    is that sorted prefix. ``indicators`` may be an ``IndicatorField`` or an
    array.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    values = np.asarray(getattr(indicators, "values", indicators), dtype=float)
    total = values.sum()
    if values.size == 0 or total <= 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(values.size), -values))
    csum = np.cumsum(values[order])
    k = int(np.searchsorted(csum, theta * total, side="left"))
    return order[: min(k + 1, values.size)]
