import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from nlfk import battery
from nlfk.dpp import (
    AntitheticMC,
    GaussHermite,
    SolverConfig,
    SpaceGrid,
    dpp_two_stage,
    evaluate_policy_value,
    gap_minimality,
    interior_policy_share,
    monotone_dt_threshold,
    second_order_gap,
    solve_value_dpp,
)
from nlfk.errors import InputError
from nlfk.model import DriverSpec
from nlfk.sde import TimeGrid

BOX = SpaceGrid(-10.0, 10.0, 0.04)
GRID = TimeGrid(0.0, 1.0, 50)


@pytest.fixture(scope="module")
def gheat_field():
    return solve_value_dpp(battery.gheat(), GRID, BOX)


def test_space_grid_layout():
    g = SpaceGrid([-1.0, 0.0], [1.0, 1.0], [0.5, 0.25])
    assert g.shape == (5, 5) and g.size == 25
    assert np.array_equal(g.nodes()[1], [-1.0, 0.25])
    with pytest.raises(InputError):
        SpaceGrid(0.0, 1.0, 0.3)


def test_interpolation_is_exact_for_multilinear_data():
    g = SpaceGrid([-1.0, -1.0], [1.0, 1.0], 0.25)
    f = lambda x: 1 + 2 * x[..., 0] - x[..., 1] + 0.5 * x[..., 0] * x[..., 1]  # noqa: E731
    pts = np.array([[0.1, -0.37], [0.9, 0.99], [-1.0, 1.0]])
    vals, out = g.interpolate(f(g.nodes()), pts)
    assert np.allclose(vals, f(pts)) and out == 0
    _, out = g.interpolate(f(g.nodes()), np.array([[2.0, 0.0]]))
    assert out == 1


def test_heat_value():
    vf = solve_value_dpp(battery.heat(), GRID, BOX)
    assert vf.value(0.0, [0.0]) == pytest.approx(1.0, abs=0.02)
    assert np.array_equal(vf.values[-1], BOX.nodes()[:, 0] ** 2)


def test_gheat_value_and_policy(gheat_field):
    assert gheat_field.value(0.0, [0.0]) == pytest.approx(4.0, abs=0.1)
    assert interior_policy_share(gheat_field, 1, 6.0) == 1.0


def test_concave_value_and_policy():
    vf = solve_value_dpp(battery.concave(), GRID, BOX)
    assert vf.value(0.0, [0.0]) == pytest.approx(-1.0, abs=0.05)
    assert interior_policy_share(vf, 0, 6.0) == 1.0


def test_discounting_value():
    vf = solve_value_dpp(battery.discounting(), GRID, BOX)
    assert vf.value(0.0, [1.0]) == pytest.approx(math.exp(-0.1), abs=0.005)


def test_contamination_warning_on_tight_box():
    vf = solve_value_dpp(battery.gheat(), TimeGrid(0, 1, 10), SpaceGrid(-0.5, 0.5, 0.1))
    assert vf.contamination_fraction > 0.2 and vf.warnings


def test_default_rule_is_quadrature():
    vf = solve_value_dpp(battery.heat(), TimeGrid(0, 1, 5), SpaceGrid(-5, 5, 0.5))
    assert isinstance(vf.rule, GaussHermite) and vf.stderr(0.0, [0.0]) == 0.0


def test_monte_carlo_rule_is_seeded():
    rule = AntitheticMC(256, seed=4)
    a = solve_value_dpp(battery.gheat(), TimeGrid(0, 1, 10), SpaceGrid(-6, 6, 0.2), rule)
    b = solve_value_dpp(battery.gheat(), TimeGrid(0, 1, 10), SpaceGrid(-6, 6, 0.2), rule)
    assert np.array_equal(a.values, b.values)
    assert a.stderr(0.0, [0.0]) > 0
    assert a.value(0.0, [0.0]) == pytest.approx(4.0, abs=0.1 + 3 * a.stderr(0.0, [0.0]))


def test_policy_value_singleton():
    vf = solve_value_dpp(battery.heat(), GRID, BOX)
    est, se = evaluate_policy_value(battery.heat(), vf, 0.0, [0.0], 8000, seed=1)
    assert abs(est - vf.value(0.0, [0.0])) <= 3 * se + 0.02


def test_policy_value_learned_policy(gheat_field):
    est, se = evaluate_policy_value(battery.gheat(), gheat_field, 0.0, [0.0], 8000, seed=2)
    assert abs(est - 4.0) <= 3 * se + 0.1


def test_policy_value_wrong_policy(gheat_field):
    est, se = evaluate_policy_value(battery.gheat(), 0, 0.0, [0.0], 8000, seed=3, grid=GRID)
    assert abs(est - 1.0) <= 3 * se + 0.05
    assert gheat_field.value(0.0, [0.0]) - est == pytest.approx(3.0, abs=0.15)


def test_constant_policy_needs_grid():
    with pytest.raises(InputError):
        evaluate_policy_value(battery.gheat(), 0, 0.0, [0.0], 10, seed=0)


def test_two_stage_heat():
    cfg = SolverConfig(BOX, 0.02)
    res = dpp_two_stage(battery.heat(), 0.0, [0.0], 0.5, cfg)
    assert res.gap <= 0.02


def test_two_stage_gheat():
    res = dpp_two_stage(battery.gheat(), 0.0, [0.0], 0.5, SolverConfig(BOX, 0.02))
    assert res.gap <= 0.1


def test_two_stage_single_step_is_identical():
    cfg = SolverConfig(SpaceGrid(-6, 6, 0.1), 0.05)
    res = dpp_two_stage(battery.gheat(), 0.0, [0.3], 0.05, cfg)
    assert res.direct == res.two_stage


def test_two_stage_rejects_bad_midpoint():
    with pytest.raises(InputError):
        dpp_two_stage(battery.heat(), 0.0, [0.0], 1.0, SolverConfig(BOX, 0.02))


def test_gap_singleton_is_zero():
    op = battery.heat()
    vf = solve_value_dpp(op, GRID, BOX)
    res = second_order_gap(op, vf, 0, 0.0, [0.0], 500, seed=0)
    assert abs(res.terminal_mean) <= 0.05 and res.min_increment >= -0.05


def test_gap_optimal_control(gheat_field):
    res = second_order_gap(battery.gheat(), gheat_field, 1, 0.0, [0.0], 2000, seed=0)
    assert abs(res.terminal_mean) <= 0.1


def test_gap_suboptimal_control(gheat_field):
    res = second_order_gap(battery.gheat(), gheat_field, 0, 0.0, [0.0], 2000, seed=0)
    assert res.terminal_mean == pytest.approx(3.0, abs=0.15)
    assert res.min_increment >= -0.05
    assert gap_minimality(battery.gheat(), gheat_field, 0.0, [0.0], 2000, seed=0) <= 0.1


@pytest.mark.parametrize("j", [0, 1])
def test_envelope_dominance(gheat_field, j):
    u = gheat_field.value(0.0, [0.0])
    est, se = evaluate_policy_value(battery.gheat(), j, 0.0, [0.0], 4000, seed=10 + j, grid=GRID)
    assert est <= u + 3 * se + 0.05


def test_monotone_threshold():
    assert monotone_dt_threshold(battery.gheat()) == math.inf
    assert monotone_dt_threshold(battery.discounting(0.5)) == pytest.approx(1.0)


SMALL = SpaceGrid(-6.0, 6.0, 0.25)
SMALL_GRID = TimeGrid(0.0, 1.0, 10)


@settings(max_examples=20, deadline=None)
@given(bumps=st.lists(st.floats(0, 2), min_size=SMALL.size, max_size=SMALL.size), rate=st.sampled_from([0.0, -0.3, 0.3]))
def test_value_is_monotone_in_terminal(bumps, rate):
    op = battery.volatility_family([1.0, 2.0], "square", DriverSpec("linear_in_y", rate=rate) if rate else None)
    assert SMALL_GRID.dt <= monotone_dt_threshold(op)
    g = op.terminal(SMALL.nodes())
    u = solve_value_dpp(op, SMALL_GRID, SMALL, terminal=g)
    v = solve_value_dpp(op, SMALL_GRID, SMALL, terminal=g + np.array(bumps))
    assert np.all(u.values <= v.values + 1e-10)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(-5, 5))
def test_constant_shift(c):
    op = battery.gheat()
    u = solve_value_dpp(op, SMALL_GRID, SMALL)
    v = solve_value_dpp(op.with_terminal_shift(c), SMALL_GRID, SMALL)
    assert np.allclose(v.values - u.values, c, rtol=0, atol=1e-10)
