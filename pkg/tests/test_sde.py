import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from nlfk.errors import InputError, SimulationError
from nlfk.model import DriverSpec, OperatorSpec, TerminalSpec, affine, control, named
from nlfk.sde import (
    NoiseStore,
    TimeGrid,
    estimate_strong_order,
    fit_order,
    initial_data_stability,
    restart_flow,
    simulate_forward,
)


def make_op(drift, diffusion, lipschitz=None):
    return OperatorSpec([control(drift, diffusion, lipschitz)], DriverSpec(), TerminalSpec("first", 1.0, 1.0), 1.0)


DECAY = make_op(affine([[-1.0]], [0.0]), 0.0)
GEOMETRIC = make_op(0.0, named("geometric_half", "diffusion"), 0.5)
BROWNIAN = make_op(0.0, 1.0)
OU = make_op(affine([[-1.0]], [0.0]), 1.0)


def run(op, K, P, seed=0, x0=0.0, **kw):
    grid = TimeGrid(0.0, op.horizon, K)
    noise = NoiseStore.generate(seed, P, K, op.dim_w, grid.dt)
    return simulate_forward(0, op, grid, x0, noise, **kw)


def test_time_grid_nodes():
    g = TimeGrid(0.5, 1.0, 5)
    assert g.dt == pytest.approx(0.1)
    assert g.nodes[0] == 0.5 and g.nodes[-1] == pytest.approx(1.0)
    assert g.index_of(0.7) == 2
    with pytest.raises(InputError):
        g.index_of(0.75)
    with pytest.raises(InputError):
        TimeGrid(1.0, 1.0, 3)


def test_unit_drift_is_exact():
    for K in (1, 7, 100):
        ens = run(make_op(1.0, 0.0), K, 10)
        assert np.all(ens.terminal() == pytest.approx(1.0, abs=1e-12))


def test_brownian_terminal_moments():
    P = 100_000
    xt = run(BROWNIAN, 4, P, seed=5).terminal()[:, 0]
    assert abs(xt.mean()) <= 3 / math.sqrt(P)
    assert abs(xt.var() - 1.0) <= 0.05


def test_linear_decay_ode():
    xt = run(DECAY, 1000, 1, x0=1.0).terminal()[0, 0]
    assert abs(xt - math.exp(-1)) <= 2e-3


def test_initial_condition_and_trace():
    ens = run(BROWNIAN, 10, 3, x0=0.25)
    assert np.all(ens.states[:, 0] == 0.25)
    assert ens.controls.shape == (3, 10) and np.all(ens.controls == 0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_blow_up_reports_path_and_step():
    op = make_op(affine([[1e200]], [0.0]), 0.0, 1e200)
    with pytest.raises(SimulationError) as err:
        run(op, 10, 2, x0=1.0)
    assert err.value.step >= 1 and err.value.path == 0


def test_noise_is_counter_addressed():
    a = NoiseStore.generate(9, 600, 12)
    b = NoiseStore.generate(9, 300, 5)
    assert np.array_equal(a.increments[:300, :5], b.increments)
    for p, k in [(0, 0), (257, 3), (599, 11)]:
        assert np.array_equal(a.regenerate(p, k), a.increments[p, k])


def test_coarsened_noise_regenerates():
    fine = NoiseStore.generate(4, 20, 16, dt=1 / 16)
    coarse = fine.coarsen(4)
    assert coarse.dt == pytest.approx(0.25)
    assert np.allclose(coarse.increments[:, 1], fine.increments[:, 4:8].sum(axis=1))
    assert np.allclose(coarse.regenerate(13, 2), coarse.increments[13, 2])


def test_noise_mismatch_rejected():
    grid = TimeGrid(0.0, 1.0, 10)
    with pytest.raises(InputError):
        simulate_forward(0, BROWNIAN, grid, 0.0, NoiseStore.generate(0, 5, 5, dt=0.1))
    with pytest.raises(InputError):
        simulate_forward(0, BROWNIAN, grid, 0.0, NoiseStore.generate(0, 5, 10, dt=0.2))


def test_determinism():
    a = run(GEOMETRIC, 20, 50, seed=3, x0=1.0)
    b = run(GEOMETRIC, 20, 50, seed=3, x0=1.0)
    assert np.array_equal(a.states, b.states)


def test_restart_at_zero_is_identity():
    ens = run(GEOMETRIC, 16, 40, x0=1.0)
    assert np.array_equal(restart_flow(ens, 0, GEOMETRIC, 0).states, ens.states)


@settings(max_examples=25, deadline=None)
@given(r=st.integers(0, 32), seed=st.integers(0, 2**32), which=st.sampled_from(["decay", "geometric", "ou"]))
def test_restart_reproduces_tail_exactly(r, seed, which):
    op = {"decay": DECAY, "geometric": GEOMETRIC, "ou": OU}[which]
    ens = run(op, 32, 30, seed=seed, x0=1.0)
    again = restart_flow(ens, r, op, 0)
    assert np.array_equal(again.states[:, r:], ens.states[:, r:])


def test_restart_rejects_other_noise():
    ens = run(BROWNIAN, 8, 10)
    with pytest.raises(InputError):
        restart_flow(ens, 2, BROWNIAN, 0, noise=NoiseStore.generate(1, 10, 8, dt=1 / 8))


def test_exit_box_freezes_paths():
    ens = run(BROWNIAN, 50, 200, seed=2, exit_box=(-0.5, 0.5))
    for p in range(200):
        tau = ens.stop_step[p]
        assert np.all(ens.states[p, tau:] == ens.states[p, tau])
        if tau < 50:
            assert abs(ens.states[p, tau, 0]) > 0.5


def test_strong_order_brownian_is_exact():
    assert estimate_strong_order(BROWNIAN, 0, 0.0, 8, 3, 500, 1) == math.inf


def test_strong_order_additive_ou():
    assert estimate_strong_order(OU, 0, 1.0, 8, 4, 2000, 1) >= 0.8


def test_strong_order_ode():
    assert estimate_strong_order(DECAY, 0, 1.0, 8, 4, 10, 1) == pytest.approx(1.0, abs=0.2)


def test_strong_order_geometric():
    assert estimate_strong_order(GEOMETRIC, 0, 1.0, 16, 4, 10_000, 1) >= 0.45


def test_fit_order_on_exact_powers():
    h = np.array([0.1, 0.05, 0.025])
    assert fit_order(h, 3 * h**2) == pytest.approx(2.0)


def test_initial_data_stability_is_refinement_stable():
    cs = []
    for K in (20, 40):
        grid = TimeGrid(0.0, 1.0, K)
        noise = NoiseStore.generate(0, 2000, K, dt=grid.dt)
        cs.append(initial_data_stability(GEOMETRIC, 0, 1.0, 1.1, grid, noise))
    assert all(np.isfinite(cs))
    assert abs(cs[0] - cs[1]) / cs[1] < 0.2
