"""Finite element Hartree-Fock with multilevel correction."""
from .driver import RunConfig, parse_config, parse_molecule, run, write_report
from .hartree_fock import HFSystem, MoleculeSpec, scf_solve
from .mesh import build_box_mesh, refine, uniform_refine

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "parse_config",
    "parse_molecule",
    "run",
    "write_report",
    "HFSystem",
    "MoleculeSpec",
    "scf_solve",
    "build_box_mesh",
    "refine",
    "uniform_refine",
]
