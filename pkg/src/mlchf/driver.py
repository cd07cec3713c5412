"""Adaptive outer loop, configuration and reporting."""
from __future__ import annotations

import csv
import json
import resource
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .estimator import compute_indicators, dorfler_mark
from .fespace import FeSpace
from .hartree_fock import HFSystem, MoleculeSpec, OrbitalSet, initial_guess, scf_solve
from .mesh import Mesh, build_box_mesh, is_conforming, refine, uniform_refine
from .mlcorrection import MemoryAudit, RunConstantCache, build_run_constant_cache, correct_orbitals

__all__ = [
    "ConfigError",
    "RunConfig",
    "LevelRecord",
    "RunResult",
    "LevelState",
    "parse_molecule",
    "parse_config",
    "run",
    "start",
    "advance",
    "write_report",
    "read_levels_csv",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ["level", "dofs", "energy", "eta2", "marked", "time_s", "mem_mb", "poisson_solves", "scf_iters"]


class ConfigError(ValueError):
    """Invalid configuration or molecule input."""


@dataclass
class RunConfig:
    """Settings of one adaptive run.

    ``tol`` is the relative energy tolerance of the plain SCF iteration and
    ``correction_tol`` the relative eigenvalue tolerance of the small SCF
    loop on each correction space. ``energy_tol`` stops the outer loop once
    the energy changes by less than it between levels (0 disables).
    ``force_iterations`` fixes the number of inner SCF sweeps in both modes.
    With ``report_timing`` off, ``time_s`` and ``mem_mb`` are written as zero
    so that repeated runs give byte-identical reports.
    """

    molecule: str = ""
    box: tuple = (-10.0, -10.0, -10.0, 10.0, 10.0, 10.0)
    coarse_divisions: tuple = (4, 4, 4)
    initial_refinements: int = 6
    theta: float = 0.5
    tol: float = 1e-6
    correction_tol: float = 1e-10
    energy_tol: float = 0.0
    max_levels: int = 12
    max_dofs: int = 200_000
    mode: str = "mlc"
    occupancy: str = "auto"
    out: str = "out"
    threads: int = 1
    mixing: float = 0.5
    max_scf_iter: int = 60
    force_iterations: Optional[int] = None
    report_timing: bool = True

    def validate(self) -> "RunConfig":
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta}")
        if not self.tol > 0 or not self.correction_tol > 0:
            raise ConfigError("tolerances must be positive")
        if self.max_levels < 1:
            raise ConfigError("max_levels must be at least 1")
        if self.mode not in ("mlc", "direct"):
            raise ConfigError(f"mode must be 'mlc' or 'direct', got {self.mode!r}")
        if self.occupancy not in ("auto", "closed", "spin"):
            raise ConfigError(f"occupancy must be auto, closed or spin, got {self.occupancy!r}")
        if len(self.box) != 6 or any(self.box[a] >= self.box[a + 3] for a in range(3)):
            raise ConfigError("box needs six numbers x0 y0 z0 x1 y1 z1 with lower < upper")
        if len(self.coarse_divisions) != 3 or min(self.coarse_divisions) < 2:
            raise ConfigError("coarse_divisions needs three integers >= 2")
        if self.initial_refinements < 0 or self.threads < 1 or self.max_dofs < 1:
            raise ConfigError("initial_refinements >= 0, threads >= 1 and max_dofs >= 1 required")
        if not 0.0 < self.mixing <= 1.0:
            raise ConfigError("mixing must lie in (0, 1]")
        if self.force_iterations is not None and self.force_iterations < 1:
            raise ConfigError("force_iterations must be positive")
        return self

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.box, dtype=float).reshape(2, 3)


_CONFIG_TYPES = {
    "molecule": str,
    "box": "floats",
    "coarse_divisions": "ints",
    "initial_refinements": int,
    "theta": float,
    "tol": float,
    "correction_tol": float,
    "energy_tol": float,
    "max_levels": int,
    "max_dofs": int,
    "mode": str,
    "occupancy": str,
    "out": str,
    "threads": int,
    "mixing": float,
    "max_scf_iter": int,
    "force_iterations": int,
    "report_timing": "bool",
}


def convert_value(key: str, raw: str):
    kind = _CONFIG_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind is int and raw.strip().lower() in ("none", ""):
            return None
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``key = value`` lines (``#`` comments) and apply overrides."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = convert_value(key, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def parse_molecule(path, occupancy: str = "auto") -> MoleculeSpec:
    """Parse ``SYMBOL Z x y z`` lines (Bohr) plus an ``electrons N`` line."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read molecule file {path}: {exc}") from exc
    symbols, charges, positions, n_el = [], [], [], None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0].lower() == "electrons":
            if len(parts) != 2:
                raise ConfigError(f"{path}:{n}: expected 'electrons N'")
            try:
                n_el = int(parts[1])
            except ValueError:
                raise ConfigError(f"{path}:{n}: electron count must be an integer") from None
            continue
        if len(parts) != 5:
            raise ConfigError(f"{path}:{n}: expected 'SYMBOL Z x y z'")
        try:
            z, x, y, w = (float(v) for v in parts[1:])
        except ValueError:
            raise ConfigError(f"{path}:{n}: non-numeric field") from None
        if z <= 0:
            raise ConfigError(f"{path}:{n}: nuclear charge must be positive")
        symbols.append(parts[0])
        charges.append(z)
        positions.append((x, y, w))
    if not charges:
        raise ConfigError(f"{path}: no nuclei given")
    if n_el is None:
        raise ConfigError(f"{path}: missing 'electrons N' line")
    if occupancy == "auto":
        occupancy = "closed" if n_el % 2 == 0 else "spin"
    try:
        return MoleculeSpec(np.array(charges), np.array(positions), n_el, occupancy, tuple(symbols))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class LevelRecord:
    level: int
    dofs: int
    energy: float
    eigenvalues: list
    eta2: float = float("nan")
    marked: int = 0
    time_s: float = 0.0
    mem_mb: float = 0.0
    poisson_solves: int = 0
    scf_iters: int = 0
    cancellation: float = float("nan")
    orthogonality_drift: float = 0.0
    conforming: bool = True
    type1_solves: int = 0
    type2_solves: int = 0

    def csv_row(self) -> list:
        return [self.level, self.dofs, repr(self.energy), repr(self.eta2), self.marked,
                f"{self.time_s:.6f}", f"{self.mem_mb:.1f}", self.poisson_solves, self.scf_iters]


@dataclass
class LevelState:
    """Solution on the current adaptive space."""

    level: int
    system: HFSystem
    orbitals: OrbitalSet
    pairs: np.ndarray

    @property
    def space(self) -> FeSpace:
        return self.system.space


@dataclass
class RunResult:
    config: RunConfig
    molecule: MoleculeSpec
    records: list
    state: Optional[LevelState] = None
    run_cache: Optional[RunConstantCache] = None
    audit: Optional[MemoryAudit] = None
    coarse: Optional[FeSpace] = None
    error: Optional[str] = None

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.records])


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _cancellation(system: HFSystem, orbitals: OrbitalSet, pairs: np.ndarray) -> float:
    """Norm of (Hartree - exchange) acting on the orbitals; zero for one electron."""
    hart = system.space.weighted_mass(system.hartree(pairs, orbitals.occupations)) @ orbitals.coeffs
    return float(np.abs(hart - system.exchange_vectors(orbitals, pairs)).max())


def _fock_eigenvalues(system: HFSystem, orbitals: OrbitalSet, pairs: np.ndarray) -> np.ndarray:
    op, _, _, _ = system.fock_operator(system.hartree(pairs, orbitals.occupations), orbitals, pairs)
    C = orbitals.coeffs
    return np.einsum("il,il->l", C, op @ C)


def start(config: RunConfig, molecule: MoleculeSpec):
    """Coarse space, first fine space, full SCF there and (mlc) the run cache."""
    t0 = time.perf_counter()
    mesh0 = build_box_mesh(config.bounds, config.coarse_divisions)
    for r in molecule.positions:
        if np.any(r <= config.bounds[0]) or np.any(r >= config.bounds[1]):
            raise ConfigError("every nucleus must lie inside the box")
    coarse = FeSpace(mesh0)
    space = FeSpace(uniform_refine(mesh0, config.initial_refinements))
    system = HFSystem(space, molecule)
    orbs = initial_guess(system)
    orbs, pairs, rep = scf_solve(system, orbs, config.tol, config.max_scf_iter, config.mixing, config.force_iterations)
    audit = MemoryAudit(coarse.n_dofs, molecule.n_orbitals)
    run_cache = None
    solves = rep.poisson_solves
    if config.mode == "mlc":
        before = system.poisson.n_solves
        run_cache = build_run_constant_cache(coarse, molecule, space, poisson=system.poisson, audit=audit)
        solves += system.poisson.n_solves - before
    energy = system.energy(orbs, pairs).total
    rec = LevelRecord(
        level=1,
        dofs=space.n_dofs,
        energy=energy,
        eigenvalues=orbs.eigenvalues.tolist(),
        time_s=time.perf_counter() - t0,
        mem_mb=_peak_mb(),
        poisson_solves=solves,
        scf_iters=rep.iterations,
        cancellation=_cancellation(system, orbs, pairs),
        conforming=is_conforming(space.mesh),
    )
    return LevelState(1, system, orbs, pairs), rec, run_cache, audit, coarse


def estimate_and_mark(state: LevelState, theta: float):
    ind = compute_indicators(state.system, state.orbitals, state.pairs)
    return ind, dorfler_mark(ind, theta)


def advance(
    state: LevelState,
    mesh: Mesh,
    config: RunConfig,
    run_cache: Optional[RunConstantCache] = None,
    audit: Optional[MemoryAudit] = None,
    mode: Optional[str] = None,
    force_iterations: Optional[int] = None,
) -> tuple[LevelState, LevelRecord]:
    """Solve on the refined ``mesh`` starting from ``state``.

    ``mode="mlc"`` performs one correction step; ``"direct"`` runs the full
    SCF iteration on the new space, warm-started from the prolonged orbitals.
    """
    mode = mode or config.mode
    omega = force_iterations if force_iterations is not None else config.force_iterations
    t0 = time.perf_counter()
    molecule = state.system.molecule
    space = FeSpace(mesh)
    system = HFSystem(space, molecule, None)
    old = state.orbitals
    P = space.prolongation_full(state.space)
    prev_nodal = P @ old.nodal()
    drift, t1, t2 = 0.0, 0, 0
    if mode == "mlc":
        if run_cache is None:
            raise ValueError("the correction mode needs the run-constant cache")
        before = system.poisson.n_solves
        prev_pairs = _prolong_pairs(P, state.pairs)
        res = correct_orbitals(
            system, run_cache, prev_nodal, old.eigenvalues, prev_pairs, old.occupations, old.exchange_weights,
            tol=config.correction_tol, max_iter=config.max_scf_iter, force_iterations=omega, audit=audit,
            threads=config.threads,
        )
        orbs, pairs = res.orbitals, res.pairs
        orbs = orbs.replace(orbs.coeffs, _fock_eigenvalues(system, orbs, pairs))
        iters = res.scf_iterations
        solves = system.poisson.n_solves - before
        drift = res.orthogonality_drift
        t1, t2 = res.level.type1_solves, res.level.type2_solves
        # the level object holds fine potentials; drop it to keep memory flat
        del res
    else:
        init = OrbitalSet(space, prev_nodal[space.dofs], old.eigenvalues, old.occupations, old.exchange_weights)
        orbs, pairs, rep = scf_solve(system, init, config.tol, config.max_scf_iter, config.mixing, omega)
        iters = rep.iterations
        solves = rep.poisson_solves
    energy = system.energy(orbs, pairs).total
    rec = LevelRecord(
        level=state.level + 1,
        dofs=space.n_dofs,
        energy=energy,
        eigenvalues=orbs.eigenvalues.tolist(),
        time_s=time.perf_counter() - t0,
        mem_mb=_peak_mb(),
        poisson_solves=solves,
        scf_iters=iters,
        cancellation=_cancellation(system, orbs, pairs),
        orthogonality_drift=drift,
        conforming=is_conforming(mesh),
        type1_solves=t1,
        type2_solves=t2,
    )
    return LevelState(state.level + 1, system, orbs, pairs), rec


def _prolong_pairs(P, pairs):
    nv, N, _ = pairs.shape
    return (P @ pairs.reshape(nv, N * N)).reshape(-1, N, N)


def run(config: RunConfig, molecule: Optional[MoleculeSpec] = None, callback: Optional[Callable] = None) -> RunResult:
    """Full adaptive run; ``callback(record)`` is called after every level.

    Stops after ``max_levels`` levels, before a refinement would exceed
    ``max_dofs``, or once the energy changes by less than ``energy_tol``.
    Solver failures end the run early with ``error`` set and the records
    gathered so far.
    """
    config.validate()
    if molecule is None:
        molecule = parse_molecule(config.molecule, config.occupancy)
    state, rec, run_cache, audit, coarse = start(config, molecule)
    result = RunResult(config, molecule, [rec], state, run_cache, audit, coarse)
    if callback:
        callback(rec)
    while len(result.records) < config.max_levels:
        t0 = time.perf_counter()
        ind, marked = estimate_and_mark(state, config.theta)
        rec.eta2, rec.marked = ind.total, int(marked.size)
        if marked.size == 0:
            break
        mesh = refine(state.space.mesh, marked)
        if (~mesh.boundary_vertex_mask).sum() > config.max_dofs:
            rec.marked = 0
            break
        mark_time = time.perf_counter() - t0
        try:
            state, new = advance(state, mesh, config, run_cache, audit)
        except Exception as exc:  # solver failure: keep what we have
            result.error = f"{type(exc).__name__}: {exc}"
            break
        new.time_s += mark_time
        result.records.append(new)
        result.state = state
        if callback:
            callback(new)
        if config.energy_tol > 0 and abs(new.energy - rec.energy) < config.energy_tol:
            rec = new
            break
        rec = new
    if result.error is None and np.isnan(rec.eta2):
        ind = compute_indicators(state.system, state.orbitals, state.pairs)
        rec.eta2 = ind.total
    return result


def write_report(records: Sequence[LevelRecord], directory, config: Optional[RunConfig] = None, extra: Optional[dict] = None):
    """``levels.csv`` (fixed nine columns) and ``summary.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    timing = config is None or config.report_timing
    with open(out / "levels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            row = r.csv_row()
            if not timing:
                row[5], row[6] = "0", "0"
            w.writerow(row)
    summary = {
        "final_energy": records[-1].energy if records else None,
        "final_dofs": records[-1].dofs if records else None,
        "levels": len(records),
        "eigenvalues": records[-1].eigenvalues if records else None,
        "max_cancellation_residual": max((r.cancellation for r in records), default=None),
        "config": asdict(config) if config is not None else None,
    }
    if extra:
        summary.update(extra)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    return out


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def read_levels_csv(path) -> list[dict]:
    """Parse ``levels.csv`` back into typed dictionaries."""
    types = [int, int, float, float, int, float, float, int, int]
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if rows[0] != CSV_COLUMNS:
        raise ValueError("unexpected header")
    return [{k: t(v) for k, t, v in zip(CSV_COLUMNS, types, row)} for row in rows[1:]]
