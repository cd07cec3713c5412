import json

import pytest

from mlchf import cli
from mlchf import driver
from mlchf.driver import (
    CSV_COLUMNS,
    ConfigError,
    LevelRecord,
    RunConfig,
    parse_config,
    parse_molecule,
    read_levels_csv,
    run,
    write_report,
)
from mlchf.poisson import SolverError

SMALL = dict(box=(-6.0, -6.0, -6.0, 6.0, 6.0, 6.0), coarse_divisions=(3, 3, 3), initial_refinements=3)


@pytest.fixture
def h_file(tmp_path):
    p = tmp_path / "h.mol"
    p.write_text("# hydrogen atom\nelectrons 1\nH 1 0.0 0.0 0.0\n")
    return p


def test_parse_hydrogen(h_file):
    mol = parse_molecule(h_file)
    assert len(mol.charges) == 1 and mol.n_electrons == 1
    assert mol.occupancy == "spin"
    assert mol.symbols == ("H",)


def test_parse_lih(tmp_path):
    p = tmp_path / "lih.mol"
    p.write_text("electrons 4\nLi 3 0 0 0\nH 1 0 0 3.015  # bond along z\n")
    mol = parse_molecule(p)
    assert len(mol.charges) == 2 and mol.n_electrons == 4 and mol.n_orbitals == 2


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("electrons 1\nH -1 0 0 0\n", ":2:"),
        ("electrons 1\nH 1 0 0\n", ":2:"),
        ("electrons 2\n# ok\nHe 2 0 0 zero\n", ":3:"),
        ("H 1 0 0 0\n", "electrons"),
        ("electrons x\nH 1 0 0 0\n", ":1:"),
        ("electrons 1\n", "no nuclei"),
    ],
)
def test_malformed_molecules(tmp_path, text, fragment):
    p = tmp_path / "bad.mol"
    p.write_text(text)
    with pytest.raises(ConfigError, match=fragment):
        parse_molecule(p)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("theta = 0.3\nmode = direct  # baseline\nbox = -5 -5 -5 5 5 5\nmax_dofs = 1000\n")
    cfg = parse_config(p, {"theta": 0.6, "tol": None})
    assert cfg.theta == 0.6 and cfg.mode == "direct" and cfg.max_dofs == 1000
    assert cfg.box == (-5.0, -5.0, -5.0, 5.0, 5.0, 5.0)
    assert cfg.tol == RunConfig().tol


@pytest.mark.parametrize("text", ["theta = 1.5\n", "unknown = 3\n", "theta 0.5\n", "max_levels = 0\n", "mode = fast\n", "tol = -1\n"])
def test_bad_config(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        parse_config(p)


def test_report_header_only_and_roundtrip(tmp_path):
    write_report([], tmp_path / "empty")
    lines = (tmp_path / "empty" / "levels.csv").read_text().splitlines()
    assert lines == [",".join(CSV_COLUMNS)]
    recs = [LevelRecord(1, 100, -0.4123456789012345, [-0.4], 0.25, 7, 1.5, 120.0, 40, 3),
            LevelRecord(2, 180, -0.45, [-0.45], 0.125, 9, 2.0, 130.0, 28, 8)]
    write_report(recs, tmp_path / "two", RunConfig())
    rows = read_levels_csv(tmp_path / "two" / "levels.csv")
    assert len(rows) == 2 and all(len(r) == 9 for r in rows)
    for rec, row in zip(recs, rows):
        for key in CSV_COLUMNS:
            assert row[key] == pytest.approx(getattr(rec, key))
    summary = json.loads((tmp_path / "two" / "summary.json").read_text())
    assert summary["final_energy"] == recs[-1].energy
    assert summary["config"]["theta"] == RunConfig().theta


def test_single_level(hydrogen):
    res = run(RunConfig(max_levels=1, **SMALL), hydrogen)
    assert len(res.records) == 1
    assert res.records[0].eta2 > 0


def test_levels_and_accounting(hydrogen):
    res = run(RunConfig(max_levels=4, **SMALL), hydrogen)
    dofs = [r.dofs for r in res.records]
    assert all(b > a for a, b in zip(dofs, dofs[1:]))
    for r in res.records[1:]:
        assert r.poisson_solves == r.type1_solves + r.type2_solves
        assert r.cancellation < 1e-10
    first = res.records[0]
    assert first.poisson_solves >= res.run_cache.type3_solves


def test_direct_mode_runs(helium):
    res = run(RunConfig(mode="direct", max_levels=2, **SMALL), helium)
    assert len(res.records) == 2
    assert res.records[1].energy < res.records[0].energy + 1e-6


def test_deterministic_csv(tmp_path, h_file):
    cfg = _cfg_file(tmp_path, "max_levels = 3\nreport_timing = false\n")
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main([str(h_file), "--config", str(cfg), "--out", str(out), "--threads", "1", "--quiet"]) == 0
        blobs.append((out / "levels.csv").read_bytes())
    assert blobs[0] == blobs[1]
    assert blobs[0].count(b"\n") == 4


def test_energy_tolerance_stops_early(hydrogen):
    res = run(RunConfig(max_levels=10, energy_tol=1.0, **SMALL), hydrogen)
    assert len(res.records) == 2


def test_max_dofs_limits_run(hydrogen):
    res = run(RunConfig(max_levels=10, max_dofs=400, **SMALL), hydrogen)
    assert res.records[-1].dofs <= 400


def _cfg_file(tmp_path, extra=""):
    p = tmp_path / "run.cfg"
    p.write_text("box = -6 -6 -6 6 6 6\ncoarse_divisions = 3 3 3\ninitial_refinements = 3\nmax_levels = 2\n" + extra)
    return p


def test_cli_success(tmp_path, h_file):
    out = tmp_path / "out"
    code = cli.main([str(h_file), "--config", str(_cfg_file(tmp_path)), "--out", str(out), "--theta", "0.4", "--quiet"])
    assert code == 0
    rows = read_levels_csv(out / "levels.csv")
    assert [r["level"] for r in rows] == [1, 2]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["theta"] == 0.4
    assert summary["final_energy"] == rows[-1]["energy"]


def test_cli_config_errors(tmp_path, h_file):
    bad = tmp_path / "bad.mol"
    bad.write_text("electrons 1\nH -1 0 0 0\n")
    assert cli.main([str(bad), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert cli.main([str(h_file), "--theta", "2", "--quiet"]) == 2
    assert cli.main(["--quiet"]) == 2
    assert cli.main([str(tmp_path / "missing.mol"), "--quiet"]) == 2


def test_cli_solver_failure_writes_partial(tmp_path, h_file, monkeypatch):
    def broken(*args, **kwargs):
        raise SolverError("forced failure")

    monkeypatch.setattr(driver, "advance", broken)
    out = tmp_path / "out"
    code = cli.main([str(h_file), "--config", str(_cfg_file(tmp_path)), "--out", str(out), "--quiet"])
    assert code == 3
    rows = read_levels_csv(out / "levels.csv")
    assert len(rows) == 1
    assert "forced failure" in json.loads((out / "summary.json").read_text())["error"]
