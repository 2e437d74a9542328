import json

import numpy as np
import pytest

from twoweight import harness
from twoweight.grid import scaled_box4
from twoweight.harness import (
    RunConfig,
    cli_main,
    dump_pair,
    format_report,
    generate_pair,
    load_pair_file,
    verify_theorem,
    write_report,
)
from twoweight.measure import Measure, common_points


# ------------------------------------------------------------ config

def test_config_defaults_valid():
    cfg = RunConfig()
    assert cfg.dim == 1 and cfg.generator == "random_atomic"


def test_config_rejects_bad_fields():
    for kwargs in ({"dim": 3}, {"alpha": 2.0}, {"eps": 1.5},
                   {"resolution": 9}, {"c0": 1.0}, {"gamma": 6.0},
                   {"c_en": 0.5}, {"delta_trunc": 5.0, "radius": 1.0},
                   {"generator": "bogus"}):
        with pytest.raises(ValueError):
            RunConfig(**kwargs)


def test_config_parameter_chain():
    RunConfig(r_param=1, tau_param=2, rho_param=4)
    with pytest.raises(ValueError, match="tau > r"):
        RunConfig(r_param=2, tau_param=2, rho_param=9)
    with pytest.raises(ValueError, match="tau > r"):
        RunConfig(r_param=1, tau_param=2, rho_param=3)
    RunConfig(r_param=1)  # partial triples are not constrained


# ------------------------------------------------------------ generators

def test_random_atomic_deterministic():
    a = generate_pair("random_atomic", {"resolution": 4}, 1)
    b = generate_pair("random_atomic", {"resolution": 4}, 1)
    for x, y in zip(a, b):
        assert np.array_equal(x.points, y.points)
        assert np.array_equal(x.masses, y.masses)
    c = generate_pair("random_atomic", {"resolution": 4}, 2)
    assert not (np.array_equal(a[0].points, c[0].points)
                and np.array_equal(a[0].masses, c[0].masses))


def test_common_atoms_share_points():
    sigma, omega = generate_pair("common_atoms", {"resolution": 4}, 3)
    assert len(common_points(sigma, omega)) > 0


def test_doubling_like_is_doubling():
    from twoweight.grid import make_grid
    for dim, res in ((1, 4), (2, 3)):
        sigma, _ = generate_pair("doubling_like",
                                 {"dim": dim, "resolution": res,
                                  "alpha": 0.0}, 4)
        g = make_grid(dim, res, 0, {"kind": "beta",
                                    "bits": [[0] * res] * dim})
        bound = 2 ** dim * 1.25 + 1e-12
        for q in g.cubes():
            qm = sigma.masses[sigma.in_box(
                np.array(q.lo) * 1, np.array(q.lo) + q.side)].sum()
            lo4, hi4 = scaled_box4(q, 2.0)
            dm = sigma.masses[sigma.in_box4(lo4, hi4)].sum()
            if qm > 0:
                assert dm <= bound * qm


def test_cantor_like_structure():
    sigma, omega = generate_pair("cantor_like", {"resolution": 6}, 0)
    assert sigma.total_mass == pytest.approx(1.0)
    assert omega.natoms > 0
    again, _ = generate_pair("cantor_like", {"resolution": 6}, 5)
    assert np.array_equal(sigma.points, again.points)
    with pytest.raises(ValueError, match="one dimensional"):
        generate_pair("cantor_like", {"dim": 2, "resolution": 3}, 0)


def test_pair_file_roundtrip(tmp_path):
    sigma, omega = generate_pair("random_atomic", {"resolution": 4}, 7)
    path = tmp_path / "pair.json"
    path.write_text(dump_pair(sigma, omega))
    s2, o2 = load_pair_file(str(path))
    assert np.array_equal(sigma.points, s2.points)
    assert np.array_equal(omega.masses, o2.masses)


def test_pair_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n")
    with pytest.raises(ValueError, match="line 2"):
        load_pair_file(str(bad))
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"sigma": {"dim": 1, "resolution": 2,
                                             "atoms": []}}))
    with pytest.raises(ValueError, match="omega"):
        load_pair_file(str(missing))


# ------------------------------------------------------------ verify

def test_verify_trivial_pair_indeterminate():
    empty = Measure.from_atoms(1, 4, [])
    omega = Measure.from_atoms(1, 4, [((3,), 1.0)])
    rep = verify_theorem(RunConfig(), pair=(empty, omega))
    assert rep["ntv"]["indeterminate"] is True
    assert rep["ntv"]["ntv"] == 0.0
    assert rep["testing"]["norm"] == 0.0


def test_verify_single_disjoint_pair():
    sigma = Measure.from_atoms(1, 2, [((0,), 1.0)])
    omega = Measure.from_atoms(1, 2, [((3,), 1.0)])
    rep = verify_theorem(RunConfig(resolution=2), pair=(sigma, omega))
    assert rep["testing"]["forward"] == pytest.approx(
        rep["testing"]["norm"])
    assert rep["ntv"]["ratio"] <= 1.0
    assert all(c["pass"] for c in rep["checks"])


def test_verify_all_checks_pass_across_generators():
    for kind in ("random_atomic", "common_atoms", "doubling_like",
                 "cantor_like"):
        for seed in (0, 1):
            cfg = RunConfig(generator=kind, seed=seed,
                            resolution=4, family_kind="unit")
            rep = verify_theorem(cfg)
            bad = [c for c in rep["checks"] if not c["pass"]]
            assert not bad, (kind, seed, bad)


def test_verify_deterministic_report():
    cfg = RunConfig(seed=11)
    a = format_report(verify_theorem(cfg))
    b = format_report(verify_theorem(RunConfig(seed=11)))
    assert a == b


def test_verify_resolution_declaration_is_stable():
    sigma, omega = generate_pair("random_atomic", {"resolution": 4}, 5)
    r4 = verify_theorem(RunConfig(resolution=4), pair=(sigma, omega))
    r5 = verify_theorem(RunConfig(resolution=5), pair=(sigma, omega))
    for key in ("a2", "testing", "ntv"):
        a = {k: v for k, v in r4[key].items() if isinstance(v, float)}
        b = {k: v for k, v in r5[key].items() if isinstance(v, float)}
        assert a == b
    assert r4["energy"]["strong"] == r5["energy"]["strong"]


def test_report_serialization_17_digits(tmp_path):
    rep = verify_theorem(RunConfig(seed=2))
    text = format_report(rep)
    obj = json.loads(text)
    assert isinstance(obj["testing"]["norm"], str)
    assert float(obj["testing"]["norm"]) == rep["testing"]["norm"]
    out = tmp_path / "report.json"
    write_report(rep, str(out))
    assert out.exists()
    csv_file = tmp_path / "report.csv"
    assert csv_file.exists()
    lines = csv_file.read_text().splitlines()
    assert lines[0] == "name,value"
    assert len(lines) > 5


def test_report_schema_fields():
    rep = verify_theorem(RunConfig(seed=3))
    for key in ("config", "a2", "energy", "testing", "functional_energy",
                "halfspace", "goodness_mc", "coronas", "checks"):
        assert key in rep
    for c in rep["checks"]:
        assert set(c) == {"name", "pass", "witness"}


# ------------------------------------------------------------ CLI

def test_cli_verify_exit_zero(capsys):
    code = cli_main(["verify", "--dim", "1", "--alpha", "0",
                     "--res", "4", "--seed", "7"])
    assert code == 0
    out = capsys.readouterr().out
    assert '"checks"' in out


def test_cli_subcommand_sections(capsys):
    assert cli_main(["prob-bad", "--res", "3", "--seed", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "goodness_mc" in out and "a2" not in out
    assert cli_main(["corona", "--res", "3", "--seed", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "coronas" in out and "halfspace" not in out


def test_cli_missing_file_exit_one(capsys):
    assert cli_main(["verify", "--pairs", "/no/such/file.json"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_usage_error_exit_one(capsys):
    assert cli_main(["frobnicate"]) == 1
    assert cli_main([]) == 1


def test_cli_bad_config_exit_one(tmp_path, capsys):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({"dim": 3}))
    assert cli_main(["verify", "--config", str(cfgfile)]) == 1


def test_cli_pairs_and_out(tmp_path, capsys):
    sigma, omega = generate_pair("random_atomic", {"resolution": 4}, 9)
    pfile = tmp_path / "pair.json"
    pfile.write_text(dump_pair(sigma, omega))
    ofile = tmp_path / "rep.json"
    code = cli_main(["verify", "--pairs", str(pfile),
                     "--out", str(ofile)])
    assert code == 0
    assert ofile.exists() and (tmp_path / "rep.csv").exists()


def test_cli_invariant_violation_exit_two(monkeypatch, capsys):
    monkeypatch.setattr(harness, "carleson_norm", lambda *a, **k: 99.0)
    code = cli_main(["verify", "--res", "4", "--seed", "7"])
    assert code == 2
    assert "FAIL" in capsys.readouterr().err


def test_cli_deterministic_report_files(tmp_path):
    outs = []
    for name in ("a.json", "b.json"):
        path = tmp_path / name
        assert cli_main(["report", "--res", "4", "--seed", "5",
                         "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
