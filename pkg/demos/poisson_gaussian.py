"""Hartree potential of a unit Gaussian charge.

A normalized Gaussian density has the closed-form potential
erf(r / sqrt(2)) / r. The box is finite, so the Dirichlet data on its
surface comes from a multipole expansion of the charge. We compare that
boundary treatment with naive zero boundary values.
"""
import numpy as np
from scipy.special import erf

from mlchf.fespace import FeSpace
from mlchf.mesh import build_box_mesh, refine, uniform_refine
from mlchf.poisson import PoissonSolver


def gaussian(x):
    r2 = np.sum(x * x, axis=-1)
    return np.exp(-r2 / 2) / (2 * np.pi) ** 1.5


mesh = uniform_refine(build_box_mesh(np.array([[-12.0] * 3, [12.0] * 3]), (4, 4, 4)), 6)
for _ in range(3):
    centroids = mesh.vertices[mesh.tets].mean(axis=1)
    mesh = refine(mesh, np.flatnonzero(np.linalg.norm(centroids, axis=1) < 4.0))
space = FeSpace(mesh)
print(f"{space.n_dofs} interior dofs, {mesh.tets.shape[0]} tets")

density = space.interpolate(gaussian)
pts = np.array([[2.0, 0, 0], [0, 4.0, 0], [0, 0, 6.0], [5.0, 5.0, 0]])
r = np.linalg.norm(pts, axis=1)
exact = erf(r / np.sqrt(2)) / r

for boundary in ("multipole", "zero"):
    u = PoissonSolver(space, boundary=boundary).solve_density(density)
    err = np.abs(space.evaluate(u, pts) - exact)
    print(f"{boundary:>9}: pointwise errors " + " ".join(f"{e:.1e}" for e in err))
