import csv
import math

import numpy as np
import pytest

from nlfk import battery, io
from nlfk.cli import main
from nlfk.config import CHECKS, bundled_config_path, bundled_configs, load_config, parse_config
from nlfk.dpp import SpaceGrid, solve_value_dpp
from nlfk.errors import ConfigError
from nlfk.experiment import convergence_table, run_experiment
from nlfk.fd import FdScheme, solve_fd, viscosity_residuals
from nlfk.sde import NoiseStore, TimeGrid, simulate_forward
from nlfk.bsde import controlled_driver, solve_bsde_lsmc

MINIMAL = """
solvers = ["dpp"]
[problem]
horizon = 1.0
[problem.terminal]
name = "square"
[[problem.controls]]
diffusion = 1.0
[[grids]]
K = 10
h = 0.25
[[test_points]]
x = 0.0
"""


def test_minimal_config_parses():
    cfg = parse_config(MINIMAL)
    assert cfg.solvers == ("dpp",)
    assert cfg.problem.n_controls == 1 and cfg.finest.K == 10


def test_syntax_error_names_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("solvers = []\n[problem]\nhorizon = = 1\n", "bad.cfg")


@pytest.mark.parametrize(
    "edit, where",
    [
        (("horizon = 1.0", 'horizon = "one"'), "problem.horizon"),
        (('name = "square"', 'name = "cube"'), "problem.terminal.name"),
        (('solvers = ["dpp"]', 'solvers = ["dpp", "magic"]'), "solvers"),
        (('solvers = ["dpp"]', 'solvers = []'), "solvers"),
        (("diffusion = 1.0", "diffusion = [1.0, 2.0]"), "problem.controls[0].diffusion"),
        (("K = 10", "K = 10\nspeed = 3"), "grids[0]"),
        (("x = 0.0", "x = [0.0, 1.0]"), "test_points[0].x"),
    ],
)
def test_field_errors_name_the_field(edit, where):
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL.replace(*edit))
    assert err.value.where == where


def test_levels_must_refine():
    text = MINIMAL + "[[grids]]\nK = 5\nh = 0.1\n"
    with pytest.raises(ConfigError, match="strictly refined"):
        parse_config(text)


def test_unknown_check_rejected():
    with pytest.raises(ConfigError, match="list-checks"):
        parse_config('checks = ["vibes"]\n' + MINIMAL)


def test_bundled_configs_load():
    names = bundled_configs()
    assert {"heat.cfg", "gheat.cfg", "cfl_violation.cfg"} <= set(names)
    for n in names:
        load_config(bundled_config_path(n))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ensemble_csv(tmp_path):
    op = battery.heat()
    grid = TimeGrid(0, 1, 3)
    ens = simulate_forward(0, op, grid, 0.5, NoiseStore.generate(0, 2, 3, dt=grid.dt))
    rows = read_csv(io.write_ensemble(tmp_path / "e.csv", ens))
    assert rows[0] == ["path", "step", "time", "x_1", "control_index"]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[2][3]) == ens.states[0, 1, 0]
    assert rows[4][4] == ""


def test_bsde_csv(tmp_path):
    op = battery.heat()
    grid = TimeGrid(0, 1, 4)
    ens = simulate_forward(0, op, grid, 0.0, NoiseStore.generate(0, 50, 4, dt=grid.dt))
    sol = solve_bsde_lsmc(ens, ens.terminal()[:, 0], controlled_driver(op, ens))
    rows = read_csv(io.write_bsde(tmp_path / "b.csv", sol))
    assert rows[0] == ["path", "step", "Y", "Z_1"]
    assert float(rows[1][2]) == sol.Y[0, 0]


def test_value_field_and_residual_csv(tmp_path):
    op = battery.gheat()
    space = SpaceGrid(-2, 2, 0.5)
    vf = solve_value_dpp(op, TimeGrid(0, 1, 2), space)
    rows = read_csv(io.write_value_field(tmp_path / "v.csv", vf))
    assert rows[0] == ["step", "time", "x_1", "value", "argmax"]
    assert len(rows) == 1 + 3 * space.size
    assert rows[1][4] in ("0", "1") and rows[-1][4] == ""
    fd = solve_fd(op, FdScheme.build(op, space, out_steps=2))
    rep = viscosity_residuals(fd, op)
    rows = read_csv(io.write_residuals(tmp_path / "r.csv", fd, rep))
    assert rows[0][3] == "residual" and rows[1][3] == ""


def test_list_checks(capsys):
    assert main(["--list-checks"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in CHECKS)


def test_usage_errors(capsys, tmp_path):
    assert main([]) == 2
    assert main(["run", str(tmp_path / "missing.cfg")]) == 2
    assert main(["run", "heat.cfg", "--seed", "-1"]) == 2


def test_cfl_config_fails_with_admissible_step(capsys, tmp_path):
    code = main(["run", "cfl_violation.cfg", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 2
    assert "admissible dt <= 0.00125" in err


def test_numeric_failure_exit_code(tmp_path, capsys):
    text = MINIMAL.replace("diffusion = 1.0", "drift = { form = \"affine\", matrix = [[1e300]], offset = [0.0] }\nlipschitz = 1e300\ndiffusion = 0.0")
    text = text.replace('solvers = ["dpp"]', 'solvers = ["dpp", "policy_mc"]').replace("[[test_points]]\nx = 0.0", "[[test_points]]\nx = 1.0")
    path = tmp_path / "blow.cfg"
    path.write_text(text)
    with np.errstate(all="ignore"):
        assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "numeric error" in capsys.readouterr().err


def test_failing_check_exit_code(tmp_path, capsys):
    text = 'checks = ["value_tolerance"]\n' + MINIMAL.replace("x = 0.0", "x = 0.0\nexpected = 7.0")
    path = tmp_path / "wrong.cfg"
    path.write_text(text)
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "[FAIL] value_tolerance" in capsys.readouterr().out


def test_output_dir_precedence(tmp_path, monkeypatch, capsys):
    path = tmp_path / "m.cfg"
    path.write_text(MINIMAL)
    monkeypatch.setenv("NLFK_OUT", str(tmp_path / "env"))
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "env" / "points.csv").exists()
    assert main(["run", str(path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "points.csv").exists()


def test_heat_config_report(tmp_path):
    cfg = load_config(bundled_config_path("heat.cfg"))
    rep = run_experiment(cfg, out=tmp_path)
    assert rep.value("dpp") == pytest.approx(1.0, abs=0.02)
    assert rep.value("fd") == pytest.approx(1.0, abs=0.02)
    assert rep.exit_code == 0
    assert [c.name for c in rep.checks] == list(cfg.checks)
    text = (tmp_path / "report.txt").read_text()
    assert "u(0, 0) = 1.00" in text and "status: ok" in text


def test_gheat_config_report(tmp_path):
    cfg = load_config(bundled_config_path("gheat.cfg"))
    rep = run_experiment(cfg, jobs=2)
    assert rep.value("dpp") == pytest.approx(4.0, abs=0.1)
    assert abs(rep.value("dpp") - rep.value("fd")) <= 0.02 * rep.value("fd")
    assert rep.exit_code == 0


def test_same_seed_same_bytes(tmp_path):
    cfg = load_config(bundled_config_path("semilinear.cfg"))
    run_experiment(cfg, out=tmp_path / "a")
    run_experiment(cfg, out=tmp_path / "b")
    for name in ("points.csv", "checks.csv", "dpp_value.csv", "fd_value.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_monte_carlo(tmp_path):
    cfg = load_config(bundled_config_path("heat.cfg"))
    a = run_experiment(cfg.with_seed(1))
    b = run_experiment(cfg.with_seed(2))
    assert a.value("policy_mc") != b.value("policy_mc")
    assert a.value("dpp") == b.value("dpp")


def test_fd_space_table():
    tab = convergence_table(load_config(bundled_config_path("fd_space.cfg")))
    assert tab.order >= 1.8


def test_sde_strong_table():
    tab = convergence_table(load_config(bundled_config_path("sde_strong.cfg")))
    assert tab.order >= 0.45


def test_zero_noise_table(tmp_path, capsys):
    assert main(["table", "bsde_zero_noise.cfg", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "table.csv")
    assert rows[0] == ["level", "dt", "value", "error", "order"]
    assert float(rows[1][4]) >= 0.9
    assert abs(float(rows[-1][2]) - math.exp(-0.1)) <= 1e-5


def test_table_needs_three_levels():
    text = MINIMAL + '[table]\nkind = "dpp_time"\nlevels = [10, 20]\n'
    with pytest.raises(ConfigError, match="at least 3"):
        parse_config(text)
