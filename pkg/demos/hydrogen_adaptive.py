"""Adaptive refinement for the hydrogen atom.

The exact ground state energy is -0.5 Hartree. We start from a uniform
mesh of the box, solve the Hartree-Fock problem once, and then let the
residual estimator steer refinement towards the nucleus. Each level only
solves the small correction problem instead of repeating the full SCF.

Run with ``python demos/hydrogen_adaptive.py``.
"""
from pathlib import Path

import numpy as np

from mlchf import RunConfig, parse_molecule, run

HERE = Path(__file__).parent

config = RunConfig(max_levels=14, max_dofs=40_000)
molecule = parse_molecule(HERE / "h.mol", config.occupancy)

result = run(config, molecule)

print("level   dofs      energy       error      eta^2   marked")
for r in result.records:
    print(f"{r.level:5d} {r.dofs:7d} {r.energy:12.8f} {r.energy + 0.5:9.2e} {r.eta2:9.2e} {r.marked:7d}")

err = np.abs(result.energies + 0.5)
print(f"\nerror went from {err[0]:.2e} to {err[-1]:.2e} over {len(err)} levels")
print("energies decrease monotonically:", bool(np.all(np.diff(result.energies) <= 1e-10)))
