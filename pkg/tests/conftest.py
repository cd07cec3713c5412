import numpy as np
import pytest

from mlchf.fespace import FeSpace
from mlchf.hartree_fock import HFSystem, MoleculeSpec
from mlchf.mesh import build_box_mesh, uniform_refine


def box(half=4.0):
    return np.array([[-half] * 3, [half] * 3])


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_box_mesh(box(), (4, 4, 4))


@pytest.fixture(scope="session")
def small_space(coarse_mesh):
    """About 235 dofs on [-4, 4]^3."""
    return FeSpace(uniform_refine(coarse_mesh, 2))


@pytest.fixture(scope="session")
def hydrogen():
    return MoleculeSpec(np.array([1.0]), np.zeros((1, 3)), 1, "spin", ("H",))


@pytest.fixture(scope="session")
def helium():
    return MoleculeSpec(np.array([2.0]), np.zeros((1, 3)), 2, "closed", ("He",))


@pytest.fixture(scope="session")
def h2_spin():
    """Two spin orbitals around two protons: exercises the two-orbital paths."""
    pos = np.array([[-0.7, 0.1, 0.0], [0.7, -0.1, 0.05]])
    return MoleculeSpec(np.array([1.0, 1.0]), pos, 2, "spin", ("H", "H"))


@pytest.fixture(scope="session")
def h2_system(small_space, h2_spin):
    return HFSystem(small_space, h2_spin)
