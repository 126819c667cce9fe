import json

import pytest

from kolmofix import cli

SMALL_PARTICLE = """
name = small
dim = 1
m = 1
a[1][1] = "1"
b[1] = "0.5 * INT(y1) - x1"
V = "x1^2/2"
C = 1
Lambda = 1
solver.backend = particle
solver.dt = 1e-2
solver.T = 5
solver.burn_in = 1
solver.n_particles = 50
solver.n_snapshots = 10
solver.tol = 0.05
solver.seed = 4
"""


def report(path):
    return json.loads((path / "report.json").read_text())


def without_timestamp(path):
    return "\n".join(l for l in (path / "report.json").read_text().splitlines()
                     if '"timestamp"' not in l)


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL_PARTICLE)
    return p


def test_solve_ou_preset_file(tmp_path):
    cfg = tmp_path / "ou.cfg"
    from kolmofix.problem import preset_text
    cfg.write_text(preset_text("ou"))
    out = tmp_path / "out"
    assert cli.run(["solve", str(cfg), "--out", str(out)]) == 0
    r = report(out)
    assert r["schema_version"] == 1
    assert abs(r["solution"]["second_moment"][0] - 1.0) <= 1e-3
    assert (out / "measure.json").exists() and (out / "iterates.csv").exists()


def test_examples_cubic(tmp_path):
    out = tmp_path / "cubic"
    assert cli.run(["examples", "cubic-interaction", "--solve", "--verify", "--out", str(out)]) == 0
    r = report(out)
    assert r["solve"]["solution"]["abs_moment_1"] <= 0.05
    assert r["verify"]["integral"]["passed"]
    assert not r["verify"]["pointwise_sweep"]["any_pass"]


def test_missing_file(tmp_path, capsys):
    assert cli.run(["verify", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_parse_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text('dim = 1\nb[1] = "x1 +"\n')
    assert cli.run(["solve", str(bad), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_violations_exit_two(tmp_path):
    # the origin bound fails for this preset's W
    assert cli.run(["verify", "compact-support-diffusion", "--out", str(tmp_path)]) == 2
    r = report(tmp_path)
    assert r["integral"]["passed"] and not r["origin_bound"]["passed"]


def test_reports_reproducible(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["solve", str(small_cfg), "--out", str(a)]) == 0
    assert cli.run(["solve", str(small_cfg), "--out", str(b)]) == 0
    assert without_timestamp(a) == without_timestamp(b)
    assert (a / "measure.csv").read_bytes() == (b / "measure.csv").read_bytes()


def test_seed_precedence(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv("KOLMOFIX_SEED", "11")
    cli.run(["solve", str(small_cfg), "--out", str(tmp_path / "env")])
    cli.run(["solve", str(small_cfg), "--seed", "12", "--out", str(tmp_path / "flag")])
    monkeypatch.delenv("KOLMOFIX_SEED")
    cli.run(["solve", str(small_cfg), "--out", str(tmp_path / "file")])
    assert [report(tmp_path / k)["seed"] for k in ("env", "flag", "file")] == [11, 12, 4]


def test_truncated_solve(tmp_path):
    out = tmp_path / "trunc"
    assert cli.run(["solve", "cubic-interaction", "--compensate", "none", "--out", str(out)]) == 0
    r = report(out)
    assert r["truncated"] and r["solve"]["assumptions"]["uniform_bound"]["passed"]
    assert [lv["n"] for lv in r["solve"]["levels"]] == [4.0, 6.0, 8.0]


def test_residual_of_saved_measure(tmp_path):
    solved = tmp_path / "ou"
    cli.run(["solve", "ou", "--out", str(solved)])
    out = tmp_path / "res"
    code = cli.run(["residual", "ou", "--measure", str(solved / "measure.json"), "--tol", "1e-3",
                    "--out", str(out)])
    assert code == 0 and report(out)["residual"] <= 1e-3


@pytest.mark.parametrize("lemma", ["coefficients", "4.2"])
def test_diagnose_coefficients(tmp_path, lemma):
    assert cli.run(["diagnose", "cubic-interaction", "--lemma", lemma, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trend-coefficients.csv").exists()


def test_diagnose_needs_y(tmp_path, capsys):
    assert cli.run(["diagnose", "cubic-interaction", "--lemma", "mollification",
                    "--out", str(tmp_path)]) == 1
    assert "m >= 1" in capsys.readouterr().err


def test_examples_listing(tmp_path, capsys):
    assert cli.run(["examples", "--out", str(tmp_path)]) == 0
    assert len(report(tmp_path)["catalog"]) == 6
    assert "half-line-diffusion" in capsys.readouterr().out


def test_non_finite_values_are_strings():
    assert cli._clean({"a": float("inf"), "b": [float("nan")]}) == {"a": "inf", "b": ["nan"]}
