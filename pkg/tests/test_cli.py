from fractions import Fraction

import mpmath
import pytest

from cremerlab.cli import UsageError, main, parse_c, parse_theta
from cremerlab.dyadic_set import hausdorff_to_points, read_dyset
from cremerlab.rotation import perturbation_schedule

import numpy as np


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


# ---------------------------------------------------------------- parameter specs


def test_theta_forms(tmp_path):
    assert parse_theta("1/3", 64).rational == Fraction(1, 3)
    assert parse_theta("0.25", 64).value == mpmath.mpf(0.25)
    with mpmath.workprec(80):
        assert abs(parse_theta("pi/10000", 64).value - mpmath.pi / 10000) < mpmath.mpf(2) ** -70
    s = parse_theta("0/1+sched:N=100:1000,sigma=1/2", 128)
    ref = perturbation_schedule(0, 1, Fraction(1, 2), [100, 1000])
    assert s.schedule.N(1) == 1000 and s.value == ref.theta(1)
    assert parse_theta("0/1+sched:N=100:1000,k=0", 128).value == perturbation_schedule(0, 1, 0, [100]).theta(0)
    f = tmp_path / "golden.cf"
    f.write_text("CF 1: " + " ".join(["1"] * 40) + "\n")
    g = parse_theta(f"cf:{f}", 64).value
    assert abs(g - (mpmath.sqrt(5) - 1) / 2) < 1e-15


@pytest.mark.parametrize("bad", ["x", "pi", "pi-3", "1/2+foo", "0/1+sched:N=10,sigma=20",
                                 "0/1+sched:M=3", "0/1+sched:N=100,k=4", "cf:/nonexistent"])
def test_theta_rejects(bad):
    with pytest.raises(UsageError):
        parse_theta(bad, 64)


def test_sigma_conflict():
    with pytest.raises(UsageError):
        parse_theta("0/1+sched:N=100,sigma=1", 64, Fraction(2))


def test_c_forms():
    assert parse_c("-1", 64) == mpmath.mpc(-1)
    assert parse_c("0.25,-0.5", 64) == mpmath.mpc(0.25, -0.5)
    with pytest.raises(UsageError):
        parse_c("1,2,3", 64)


# ---------------------------------------------------------------- render


def test_render_unit_disk(tmp_path):
    assert run(tmp_path, "render", "--c", "0", "--n", "3") == 0
    s = read_dyset(tmp_path / "render.dyset")
    circle = np.exp(2j * np.pi * np.arange(4096) / 4096)
    assert hausdorff_to_points(s, circle) <= 2.0**-3
    for name in ("render.pgm", "render.meta", "CONFIG"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "render.pgm").read_text().startswith("P2\n")
    assert "boundary_exhausted=0.0" in (tmp_path / "render.meta").read_text()


def test_render_inverse(tmp_path):
    assert run(tmp_path, "render", "--c", "-1", "--n", "3", "--algo", "inverse", "--depth", "10") == 0
    meta = (tmp_path / "render.meta").read_text()
    assert "computer=inverse-iteration" in meta and "depth=10" in meta


def test_render_replay_is_byte_identical(tmp_path):
    assert run(tmp_path, "render", "--c", "-1", "--n", "2") == 0
    before = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert main(["replay", str(tmp_path / "CONFIG")]) == 0
    after = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert before == after


def test_config_records_resolved_precision(tmp_path, monkeypatch):
    monkeypatch.setenv("CREMERLAB_BITS", "96")
    assert run(tmp_path, "render", "--c", "0", "--n", "1") == 0
    argv = next(ln for ln in (tmp_path / "CONFIG").read_text().splitlines() if ln.startswith("argv="))
    assert "--bits 96" in argv and "--budget 10000" in argv


def test_render_starved_budget_is_inconclusive(tmp_path, capsys):
    assert run(tmp_path, "render", "--c", "-1", "--n", "3", "--budget", "3") == 3
    assert "inconclusive" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["render", "--c", "0", "--theta", "0"],
    ["render", "--n", "3"],
    ["render", "--c", "0", "--algo", "magic"],
    ["render", "--c", "0", "--budget", "0"],
    ["render", "--c", "zero"],
    ["bogus"],
    ["replay", "/nonexistent/CONFIG"],
])
def test_usage_errors_exit_2(tmp_path, argv):
    assert main([*argv, *(["--out", str(tmp_path)] if argv[0] == "render" else [])]) == 2


# ---------------------------------------------------------------- brjuno, probe, witness


def _final_sum(path):
    line = next(ln for ln in path.read_text().splitlines() if ln.startswith("S_FINAL="))
    return float(line.split("=")[1])


def test_brjuno_tables(tmp_path):
    assert run(tmp_path / "a", "brjuno", "--rule", "const1", "--depth", "30") == 0
    assert _final_sum(tmp_path / "a" / "brjuno.txt") < 4
    assert run(tmp_path / "b", "brjuno", "--rule", "exp2q", "--depth", "5") == 0
    text = (tmp_path / "b" / "brjuno.txt").read_text()
    assert "DEPTH=5" in text and _final_sum(tmp_path / "b" / "brjuno.txt") > 4


def test_brjuno_cf_file(tmp_path):
    f = tmp_path / "x.cf"
    f.write_text("CF 1: 1 2 3 4 5\n")
    assert run(tmp_path, "brjuno", "--theta", f"cf:{f}", "--depth", "10") == 0
    assert "DEPTH=4" in (tmp_path / "brjuno.txt").read_text()


def test_probe(tmp_path):
    assert run(tmp_path, "probe", "--c", "-1", "--theta", "pi/10000", "--n", "1,2") == 0
    text = (tmp_path / "probe.txt").read_text()
    assert "BASELINE=c=-1.0,0.0" in text and "EXCESS[" in text
    assert run(tmp_path, "probe", "--c", "-1", "--n", "2,1") == 2


def test_witness_round_failure_exits_3(tmp_path, capsys):
    code = run(tmp_path, "witness", "--sigmas", "0,10", "--N-max", "1000")
    assert code == 3
    assert "witness round failed" in capsys.readouterr().err
    assert (tmp_path / "round.txt").read_text().startswith("ROUND FAILED")
