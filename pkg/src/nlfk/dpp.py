"""Backward dynamic programming over the finite control family.

The value is computed on a uniform lattice. One backward step at node ``x``
and control ``j`` is the one-step BSDE

    v_j = E[u_{k+1}(x + b dt + sigma sqrt(dt) xi)] + dt f(t_k, x, b, sigma, C_j, z_j)
    z_j = E[u_{k+1}(...) xi] / sqrt(dt)

with ``xi`` standard Gaussian in R^M and ``C_j`` the continuation (first
term). The node value is ``max_j v_j``; the maximiser is kept as a piecewise
constant feedback policy. The supremum over random controls is therefore
realised by Markov feedback at grid resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import RegressionBasis, controlled_driver, solve_bsde_lsmc
from .errors import InputError
from .sde import NoiseStore, TimeGrid, simulate_forward

CONTAMINATION_WARN = 0.2


@dataclass(frozen=True, eq=False)
class SpaceGrid:
    lower: np.ndarray
    upper: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        lo, hi, h = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (self.lower, self.upper, self.h))
        h = np.broadcast_to(h, lo.shape).copy()
        if lo.shape != hi.shape or np.any(hi <= lo) or np.any(h <= 0):
            raise InputError("space grid needs lower < upper and h > 0 on every axis")
        cells = (hi - lo) / h
        if np.any(np.abs(cells - np.round(cells)) > 1e-9 * np.maximum(cells, 1)):
            raise InputError(f"box widths {hi - lo} are not multiples of h={h}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "h", h)

    @property
    def dim(self):
        return self.lower.size

    @property
    def shape(self):
        return tuple(int(round(c)) + 1 for c in (self.upper - self.lower) / self.h)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def axes(self):
        return [lo + h * np.arange(n) for lo, h, n in zip(self.lower, self.h, self.shape)]

    def nodes(self):
        """All lattice points, shape ``(size, N)``, last axis varying fastest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def same_as(self, other):
        return (
            np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and np.array_equal(self.h, other.h)
        )

    def distance_to_boundary(self, x):
        x = np.asarray(x, dtype=float)
        return np.min(np.minimum(x - self.lower, self.upper - x), axis=-1)

    def interpolate(self, values, pts):
        """Clamped multilinear interpolation of node ``values`` (flat, C order).

        Returns the interpolated values and how many points fell outside the box.
        """
        pts = np.asarray(pts, dtype=float)
        shape = self.shape
        pos = (pts - self.lower) / self.h
        upper = np.array(shape, dtype=float) - 1
        outside = int(np.count_nonzero(np.any((pos < -1e-12) | (pos > upper + 1e-12), axis=-1)))
        pos = np.clip(pos, 0.0, upper)
        i0 = np.minimum(np.floor(pos).astype(np.int64), np.maximum(np.array(shape) - 2, 0))
        w = pos - i0
        strides = np.cumprod((1,) + shape[::-1])[:-1][::-1]
        out = np.zeros(pts.shape[:-1])
        for corner in np.ndindex(*(2,) * self.dim):
            c = np.array(corner)
            weight = np.prod(np.where(c == 1, w, 1.0 - w), axis=-1)
            flat = np.sum((i0 + c) * strides, axis=-1)
            out += weight * values[flat]
        return out, outside

    def nearest(self, pts):
        pos = np.rint((np.asarray(pts, dtype=float) - self.lower) / self.h).astype(np.int64)
        pos = np.clip(pos, 0, np.array(self.shape) - 1)
        strides = np.cumprod((1,) + self.shape[::-1])[:-1][::-1]
        return np.sum(pos * strides, axis=-1)


# -- expectation rules --------------------------------------------------------


@dataclass(frozen=True)
class GaussHermite:
    n_quad: int = 8

    def points(self, dim_w, k, stage=0):
        z, w = np.polynomial.hermite_e.hermegauss(self.n_quad)
        w = w / w.sum()
        grids = np.meshgrid(*([z] * dim_w), indexing="ij")
        wts = np.meshgrid(*([w] * dim_w), indexing="ij")
        xi = np.stack([g.ravel() for g in grids], axis=-1)
        return xi, np.prod(np.stack([g.ravel() for g in wts], axis=-1), axis=-1), False


@dataclass(frozen=True)
class AntitheticMC:
    """``P_loc`` Gaussian draws (``P_loc/2`` antithetic pairs) shared by all
    nodes of a time slice, keyed on ``(seed, stage, step)``."""

    P_loc: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.P_loc < 2 or self.P_loc % 2:
            raise InputError("P_loc must be an even number >= 2")

    def points(self, dim_w, k, stage=0):
        key = (self.seed % 2**64) + ((int(stage) * 2**32 + int(k)) << 64)
        half = np.random.Generator(np.random.Philox(key=key)).standard_normal((self.P_loc // 2, dim_w))
        xi = np.concatenate([half, -half])
        return xi, np.full(self.P_loc, 1.0 / self.P_loc), True


def default_rule(op):
    return GaussHermite(8) if op.dim_w <= 2 else AntitheticMC(4096)


# -- value field and policy ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Maximising control index per (step, node); nearest-node lookup off grid."""

    grid: TimeGrid
    space: SpaceGrid
    indices: np.ndarray
    offset: int = 0

    def __call__(self, k, x):
        return self.indices[self.offset + k][self.space.nearest(x)]

    def from_step(self, k0):
        """Policy for simulations that start at step ``k0`` of the solve grid."""
        return FeedbackPolicy(self.grid, self.space, self.indices, self.offset + k0)


@dataclass(frozen=True, eq=False)
class ValueField:
    grid: TimeGrid
    space: SpaceGrid
    values: np.ndarray
    policy: FeedbackPolicy | None = None
    contamination: int = 0
    evaluations: int = 0
    stderr_sq: np.ndarray | None = None
    warnings: list = field(default_factory=list)
    rule: object = None
    stage: int = 0

    def at(self, k, x):
        return self.space.interpolate(self.values[k], x)[0]

    def value(self, t, x):
        return float(self.at(self.grid.index_of(t), np.atleast_2d(np.asarray(x, dtype=float)))[0])

    def stderr(self, t, x):
        """Accumulated Monte-Carlo standard error at ``(t, x)``; zero for quadrature."""
        if self.stderr_sq is None:
            return 0.0
        k = self.grid.index_of(t)
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        return float(math.sqrt(max(self.space.interpolate(self.stderr_sq[k], pts)[0][0], 0.0)))

    @property
    def contamination_fraction(self):
        return self.contamination / self.evaluations if self.evaluations else 0.0

    def slice(self, k):
        return self.values[k].reshape(self.space.shape)


def solve_value_dpp(op, grid, space, rule=None, terminal=None, stage=0):
    """Backward recursion on the lattice; returns the value field (with policy).

    ``terminal`` overrides ``op.terminal`` and may be a callable on points or an
    array of node values. ``stage`` decorrelates Monte-Carlo draws between
    otherwise identical solves.
    """
    if space.dim != op.dim_x:
        raise InputError(f"space grid has N={space.dim}, operator has N={op.dim_x}")
    rule = rule or default_rule(op)
    nodes = space.nodes()
    n = nodes.shape[0]
    K, dt = grid.steps, grid.dt
    sqdt = math.sqrt(dt)
    values = np.empty((K + 1, n))
    if terminal is None:
        values[K] = op.terminal(nodes)
    elif callable(terminal):
        values[K] = np.asarray(terminal(nodes), dtype=float)
    else:
        values[K] = np.asarray(terminal, dtype=float).reshape(n)
    policy = np.empty((K, n), dtype=np.int64)
    se_sq = None
    clamped = total = 0
    rows = np.arange(n)
    for k in range(K - 1, -1, -1):
        t = grid.time(k)
        xi, wts, sampled = rule.points(op.dim_w, k, stage)
        if sampled and se_sq is None:
            se_sq = np.zeros((K + 1, n))
        bs, ss = op.coefficients(t, nodes)
        cand = np.empty((n, op.n_controls))
        var = np.empty((n, op.n_controls)) if sampled else None
        for j in range(op.n_controls):
            shift = np.einsum("nij,qj->nqi", ss[j], xi) * sqdt
            pts = nodes[:, None, :] + bs[j][:, None, :] * dt + shift
            u, out = space.interpolate(values[k + 1], pts)
            clamped += out
            total += u.size
            cont = u @ wts
            z = (u * wts) @ xi / sqdt
            cand[:, j] = cont + dt * op.driver(t, nodes, bs[j], ss[j], cont, z)
            if sampled:
                half = xi.shape[0] // 2
                pair = 0.5 * (u[:, :half] + u[:, half:])
                var[:, j] = pair.var(axis=1, ddof=1) / half
        best = np.argmax(cand, axis=1)
        values[k] = cand[rows, best]
        policy[k] = best
        if sampled:
            se_sq[k] = se_sq[k + 1] + var[rows, best]
    vf_policy = FeedbackPolicy(grid, space, policy)
    warnings = []
    frac = clamped / total if total else 0.0
    if frac > CONTAMINATION_WARN:
        warnings.append(f"{frac:.1%} of expectation points fell outside the space box")
    return ValueField(grid, space, values, vf_policy, clamped, total, se_sq, warnings, rule, stage)


def evaluate_policy_value(op, policy, t0, x0, path_count, seed, basis=None, grid=None):
    """Monte-Carlo value of one frozen feedback control started at ``(t0, x0)``.

    ``policy`` is a :class:`FeedbackPolicy`, a :class:`ValueField` (its policy is
    used) or a constant control index; for a constant index ``grid`` gives
    the time grid. Returns ``(estimate, stderr)``; by envelope dominance the
    estimate is a lower-bound estimator of the optimal value.
    """
    if isinstance(policy, ValueField):
        policy = policy.policy
    if isinstance(policy, FeedbackPolicy):
        k0 = policy.grid.index_of(t0)
        sim_grid = policy.grid.tail(k0)
        chooser = policy.from_step(k0)
    else:
        if grid is None:
            raise InputError("a constant policy needs an explicit time grid")
        k0 = grid.index_of(t0)
        sim_grid = grid.tail(k0)
        chooser = int(policy)
    ens = _simulate(op, chooser, sim_grid, x0, path_count, seed)
    sol = solve_bsde_lsmc(ens, op.terminal(ens.terminal()), controlled_driver(op, ens), basis or RegressionBasis())
    return sol.Y0_estimate, sol.Y0_stderr


def _simulate(op, chooser, sim_grid, x0, path_count, seed):
    noise = NoiseStore.generate(seed, path_count, sim_grid.steps, op.dim_w, sim_grid.dt)
    return simulate_forward(chooser, op, sim_grid, np.atleast_1d(np.asarray(x0, dtype=float)), noise)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Lattice and time resolution shared by the solves of a DPP experiment."""

    space: SpaceGrid
    dt: float
    rule: object = None

    def steps(self, t0, t1):
        k = (t1 - t0) / self.dt
        if abs(k - round(k)) > 1e-9 * max(k, 1) or round(k) < 1:
            raise InputError(f"interval [{t0}, {t1}] is not a multiple of dt={self.dt}")
        return int(round(k))


@dataclass
class TwoStageResult:
    direct: float
    two_stage: float
    combined_stderr: float

    @property
    def gap(self):
        return abs(self.direct - self.two_stage)


def dpp_two_stage(op, t0, x0, t_mid, config):
    """Direct value at ``(t0, x0)`` against the value obtained by first solving on
    ``[t_mid, T]`` and then on ``[t0, t_mid]`` with ``u(t_mid, .)`` as terminal data.

    Each solve uses its own Monte-Carlo stream (irrelevant for quadrature).
    """
    T = op.horizon
    if not t0 < t_mid < T:
        raise InputError(f"need t0 < t_mid < T, got {t0}, {t_mid}, {T}")
    direct = solve_value_dpp(op, TimeGrid(t0, T, config.steps(t0, T)), config.space, config.rule, stage=0)
    late = solve_value_dpp(op, TimeGrid(t_mid, T, config.steps(t_mid, T)), config.space, config.rule, stage=1)
    early = solve_value_dpp(
        op, TimeGrid(t0, t_mid, config.steps(t0, t_mid)), config.space, config.rule, terminal=late.values[0], stage=2
    )
    se_direct = direct.stderr(t0, x0)
    se_two = math.sqrt(early.stderr(t0, x0) ** 2 + late.stderr(t_mid, x0) ** 2)
    return TwoStageResult(direct.value(t0, x0), early.value(t0, x0), math.hypot(se_direct, se_two))


@dataclass
class GapResult:
    control: int
    min_increment: float
    terminal_mean: float
    terminal_stderr: float
    increments: np.ndarray


def frozen_value_field(op, value_field, control):
    """Value of the single control ``control`` on the lattice and grid of ``value_field``."""
    single = op.replace(controls=(op.controls[control],))
    return solve_value_dpp(single, value_field.grid, value_field.space, value_field.rule, stage=value_field.stage)


def second_order_gap(op, value_field, control, t0, x0, path_count, seed):
    """Gap process along simulated paths of one frozen control.

    ``Y`` for the frozen control is read off its own lattice solution
    ``v_j`` (the Markov representation ``Y_k = v_j(t_k, X_k)``), so that
    ``h_k = u(t_k, X_k) - Y_k`` carries discretisation error only. The gap is
    ``K_k = h_0 - h_k``: zero at the start, ``u(t0, x0) - Y_0`` at the end and
    nondecreasing up to numerical noise.
    """
    grid = value_field.grid
    k0 = grid.index_of(t0)
    sim_grid = grid.tail(k0)
    ens = _simulate(op, int(control), sim_grid, x0, path_count, seed)
    frozen = frozen_value_field(op, value_field, int(control))
    h = np.stack(
        [value_field.at(k0 + k, ens.states[:, k]) - frozen.at(k0 + k, ens.states[:, k]) for k in range(sim_grid.steps + 1)],
        axis=1,
    )
    gap = h[:, :1] - h
    inc = np.diff(gap, axis=1)
    kt = gap[:, -1]
    return GapResult(int(control), float(inc.min()), float(kt.mean()), float(kt.std(ddof=1) / math.sqrt(len(kt))), inc)


def gap_minimality(op, value_field, t0, x0, path_count, seed):
    """``min_j E[K_T]`` over all frozen controls; near zero when the family attains the sup."""
    return min(
        second_order_gap(op, value_field, j, t0, x0, path_count, seed).terminal_mean
        for j in range(op.n_controls)
    )


def monotone_dt_threshold(op):
    """Step size below which one backward step preserves nodewise order for a
    driver with monotonicity constant ``mu`` (``inf`` when ``mu == 0``)."""
    mu = abs(op.driver.monotonicity_mu or 0.0)
    return math.inf if mu == 0 else 1.0 / (2.0 * mu)


# -- structural diagnostics ---------------------------------------------------


@dataclass
class RegularityConstants:
    holder_t: float
    lipschitz_x: float
    growth: float


def regularity_constants(vf, radius):
    """Fitted constants on nodes with ``|x| <= radius``.

    ``holder_t``: max ``|u(t,x) - u(s,x)| / (sqrt|t-s| (1+|x|))``;
    ``lipschitz_x``: max difference quotient between neighbouring nodes;
    ``growth``: max ``u^2 / (1 + |x|^2)``.
    """
    nodes = vf.space.nodes()
    r = np.linalg.norm(nodes, axis=-1)
    inside = r <= radius + 1e-12
    u = vf.values[:, inside]
    times = vf.grid.nodes
    holder = 0.0
    for k in range(len(times) - 1):
        dt = np.sqrt(times[k + 1 :] - times[k])[:, None]
        q = np.abs(u[k + 1 :] - u[k]) / (dt * (1 + r[inside]))
        holder = max(holder, float(q.max()))
    lip = 0.0
    full = vf.values.reshape((len(times),) + vf.space.shape)
    mask = inside.reshape(vf.space.shape)
    for ax in range(vf.space.dim):
        d = np.abs(np.diff(full, axis=ax + 1)) / vf.space.h[ax]
        both = np.logical_and(
            np.take(mask, range(0, mask.shape[ax] - 1), axis=ax),
            np.take(mask, range(1, mask.shape[ax]), axis=ax),
        )
        lip = max(lip, float(d[:, both].max()))
    growth = float(np.max(u**2 / (1 + r[inside] ** 2)))
    return RegularityConstants(holder, lip, growth)


def interior_policy_share(vf, control, margin):
    """Share of (step, node) pairs at distance >= ``margin`` from the box
    boundary whose maximiser is ``control``."""
    d = vf.space.distance_to_boundary(vf.space.nodes())
    keep = d >= margin - 1e-12
    if not keep.any():
        raise InputError("no interior nodes at that margin")
    return float(np.mean(vf.policy.indices[:, keep] == control))
