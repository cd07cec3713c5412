"""Command line entry point.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
solver fails (levels finished before the failure are still written).
"""
from __future__ import annotations

import argparse
import logging
import sys
import traceback

from .driver import ConfigError, parse_config, parse_molecule, run, write_report

log = logging.getLogger("mlchf")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlchf", description="Adaptive finite element Hartree-Fock.")
    p.add_argument("molecule", nargs="?", help="molecule file (SYMBOL Z x y z lines plus 'electrons N')")
    p.add_argument("--config", help="key = value configuration file; flags override it")
    p.add_argument("--mode", choices=["mlc", "direct"])
    p.add_argument("--tol", type=float, help="relative SCF energy tolerance")
    p.add_argument("--theta", type=float, help="marking fraction in (0, 1)")
    p.add_argument("--max-dofs", type=int, dest="max_dofs")
    p.add_argument("--max-levels", type=int, dest="max_levels")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    overrides = {k: getattr(args, k) for k in ("mode", "tol", "theta", "max_dofs", "max_levels", "threads", "out")}
    overrides["molecule"] = args.molecule
    try:
        config = parse_config(args.config, overrides)
        if not config.molecule:
            raise ConfigError("no molecule file given")
        molecule = parse_molecule(config.molecule, config.occupancy)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    records = []

    def report(rec):
        records.append(rec)
        log.info("level %d  dofs %d  energy %.10f  time %.1fs", rec.level, rec.dofs, rec.energy, rec.time_s)
        write_report(records, config.out, config)

    try:
        result = run(config, molecule, callback=report)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        write_report(records, config.out, config, {"error": f"{type(exc).__name__}: {exc}"})
        print(f"solver failure: {exc}", file=sys.stderr)
        log.debug(traceback.format_exc())
        return 3
    extra = {"error": result.error} if result.error else None
    write_report(result.records, config.out, config, extra)
    if result.error:
        print(f"solver failure: {result.error}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
