import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from nlfk import battery
from nlfk.errors import InputError
from nlfk.model import (
    DriverSpec,
    OperatorSpec,
    TerminalSpec,
    affine,
    control,
    eval_F,
    eval_generator,
    generator_values,
    min_diffusion_eigenvalue,
    validate_assumptions,
)

ZERO = DriverSpec()
X0 = np.zeros(1)


def test_generator_reduces_to_half_trace():
    assert eval_generator(control(0.0, 1.0), ZERO, 0.0, X0, 0.0, [0.0], [[2.0]]) == 1.0


def test_generator_drift_term_only():
    assert eval_generator(control(1.0, 0.0), ZERO, 0.0, X0, 0.0, [3.0], [[0.0]]) == 3.0


def test_generator_driver_term_only():
    drv = DriverSpec("linear_in_y", rate=-0.1)
    assert eval_generator(control(0.0, 1.0), drv, 0.0, X0, 5.0, [0.0], [[0.0]]) == pytest.approx(-0.5, abs=1e-15)


def test_generator_rejects_bad_shapes():
    with pytest.raises(InputError):
        eval_generator(control(0.0, 1.0), ZERO, 0.0, X0, 0.0, [0.0, 1.0], [[0.0]])
    with pytest.raises(InputError):
        eval_generator(control([0.0, 0.0], np.eye(2)), ZERO, 0.0, np.zeros(2), 0.0, [0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]])


def test_F_singleton():
    assert eval_F(battery.heat(), 0.0, X0, 0.0, [0.0], [[2.0]]) == (1.0, 0)


@pytest.mark.parametrize("S, expected", [(-1.0, (-0.5, 0)), (1.0, (2.0, 1))])
def test_F_two_volatilities(S, expected):
    assert eval_F(battery.gheat(), 0.0, X0, 0.0, [0.0], [[S]]) == expected


def test_F_tie_breaks_to_smallest_index():
    # S = 0: both generators vanish
    assert eval_F(battery.gheat(), 0.0, X0, 0.0, [0.0], [[0.0]])[1] == 0


def test_operator_needs_controls():
    with pytest.raises(InputError):
        OperatorSpec([], ZERO, TerminalSpec("square"), 1.0)


def test_operator_rejects_dimension_mismatch():
    with pytest.raises(InputError):
        OperatorSpec([control([0.0, 0.0], np.eye(2))], ZERO, TerminalSpec("square"), 1.0, dim_x=1)


def test_unknown_registry_name():
    with pytest.raises(InputError, match="known"):
        TerminalSpec("no_such_terminal")


def test_constant_family_has_no_violations():
    op = OperatorSpec(
        [control(0.5, 1.0), control(-0.5, 2.0)],
        DriverSpec("linear", rate=-0.3, lambda_z=[0.2]),
        TerminalSpec("first", 1.0, 1.0),
        1.0,
        ellipticity_lambda=1.0,
    )
    assert validate_assumptions(op, 500, seed=1).ok


def test_superlinear_driver_flagged():
    drv = DriverSpec("named", name="y_squared", lipschitz_z=0.0, monotonicity_mu=0.0)
    op = OperatorSpec([control(0.0, 1.0)], drv, TerminalSpec("first", 1.0, 1.0), 1.0)
    rep = validate_assumptions(op, 500, seed=2)
    bad = rep.by_name("driver.monotonicity")
    assert not bad.passed
    assert bad.witness is not None and "y" in bad.witness
    assert [c.name for c in rep.violations] == ["driver.monotonicity"]


def test_affine_drift_with_operator_norm_bound():
    A = np.array([[1.0, 2.0], [-0.5, 0.3]])
    norm = np.linalg.norm(A, 2)
    c = control(affine(A, [0.1, 0.2], "drift"), np.eye(2))
    assert c.lipschitz_bound == pytest.approx(norm)
    op = OperatorSpec([c], ZERO, TerminalSpec("sum", np.sqrt(2), np.sqrt(2)), 1.0, 2, 2, 1.0)
    rep = validate_assumptions(op, 1000, seed=3)
    assert rep.ok
    assert rep.by_name("control[0].drift_lipschitz").observed <= norm * (1 + 1e-12)


def test_declared_ellipticity_too_large_is_flagged():
    op = battery.gheat().replace(ellipticity_lambda=1.5)
    assert not validate_assumptions(op, 200).by_name("control[0].ellipticity").passed


def test_equicontinuity_is_not_certified():
    c = validate_assumptions(battery.gheat(), 100).by_name("equicontinuity_modulus_1e-6")
    assert not c.certified


# -- structural properties of F ------------------------------------------------

sym2 = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(lambda v: np.array([[v[0], v[1]], [v[1], v[2]]]))
vec2 = st.lists(st.floats(-5, 5), min_size=2, max_size=2).map(np.array)


def _family2():
    return OperatorSpec(
        [control([0.3, -0.2], [[1.0, 0.0], [0.0, 0.5]]), control([0.0, 0.4], [[2.0, 0.0], [0.3, 1.0]]),
         control([-0.1, 0.0], [[0.7, 0.2], [0.0, 0.7]])],
        DriverSpec("linear", rate=-0.2, lambda_z=[0.1, -0.3]),
        TerminalSpec("sum", 1.5, 1.5),
        1.0, 2, 2,
    )


FAM2 = _family2()
LAM2 = min_diffusion_eigenvalue(FAM2)


@settings(max_examples=200, deadline=None)
@given(S=sym2, S2=sym2, d=st.floats(0, 1), p=vec2, x=vec2, y=st.floats(-5, 5))
def test_F_convex_in_S(S, S2, d, p, x, y):
    mix = eval_F(FAM2, 0.3, x, y, p, d * S + (1 - d) * S2)[0]
    ends = d * eval_F(FAM2, 0.3, x, y, p, S)[0] + (1 - d) * eval_F(FAM2, 0.3, x, y, p, S2)[0]
    assert mix <= ends + 1e-12 * (1 + abs(ends))


@settings(max_examples=200, deadline=None)
@given(S=sym2, a=vec2, p=vec2, x=vec2)
def test_F_elliptic(S, a, p, x):
    # PSD direction of unit Frobenius norm; the 1/2 in F halves the gain
    if np.linalg.norm(a) < 1e-6:
        a = np.array([1.0, 0.0])
    D = np.outer(a, a) / np.dot(a, a)
    gain = eval_F(FAM2, 0.0, x, 0.0, p, S + D)[0] - eval_F(FAM2, 0.0, x, 0.0, p, S)[0]
    assert gain >= 0.5 * LAM2 - 1e-9


@settings(max_examples=200, deadline=None)
@given(S=sym2, p=vec2, x=vec2, y=st.floats(-5, 5))
def test_F_dominates_each_generator(S, p, x, y):
    val, j = eval_F(FAM2, 0.5, x, y, p, S)
    gens = [eval_generator(c, FAM2.driver, 0.5, x, y, p, S) for c in FAM2.controls]
    assert all(g <= val for g in gens)
    assert gens[j] == val


@settings(max_examples=100, deadline=None)
@given(S=sym2, p=vec2, x=vec2, y=st.floats(-5, 5), dup=st.integers(0, 2))
def test_duplicate_control_keeps_value(S, p, x, y, dup):
    more = FAM2.replace(controls=FAM2.controls + (FAM2.controls[dup],))
    assert eval_F(more, 0.5, x, y, p, S)[0] == eval_F(FAM2, 0.5, x, y, p, S)[0]


def test_vectorised_values_match_pointwise():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 2))
    p = rng.normal(size=(7, 2))
    a = rng.normal(size=(7, 2, 2))
    S = a + np.swapaxes(a, 1, 2)
    y = rng.normal(size=7)
    vals = generator_values(FAM2, 0.1, x, y, p, S)
    for i in range(7):
        for j, c in enumerate(FAM2.controls):
            assert vals[i, j] == pytest.approx(eval_generator(c, FAM2.driver, 0.1, x[i], y[i], p[i], S[i]), rel=1e-13)
