"""Explicit monotone finite differences for the terminal-value problem.

Backward step on interior nodes::

    u_k = u_{k+1} + dt * F(t_{k+1}, x, u_{k+1}, D u_{k+1}, D^2 u_{k+1})

with central second differences, per-control upwind first differences in
the drift term and central first differences inside the driver. Under the
CFL bound every interior update is a nonnegative combination of old values,
which is the discrete form of the comparison principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsde import OrderCheck
from .dpp import SpaceGrid, ValueField
from .errors import CFLError, InputError
from .model import BoundCheck, generator_values
from .sde import TimeGrid

BOUNDARIES = ("extrapolate", "frozen")


def _coefficient_bounds(op, space, samples=17):
    nodes = space.nodes()
    a_max = b_max = 0.0
    diagonal = True
    for t in np.linspace(0.0, op.horizon, samples):
        bs, ss = op.coefficients(t, nodes)
        a = np.einsum("jnik,jnlk->jnil", ss, ss)
        a_max = max(a_max, float(np.max(np.linalg.norm(a, ord=2, axis=(-2, -1)))))
        b_max = max(b_max, float(np.max(np.abs(bs))))
        off = a - a * np.eye(op.dim_x)
        diagonal &= bool(np.all(np.abs(off) <= 1e-14 * (1 + np.abs(a).max())))
    return a_max, b_max, diagonal


def cfl_limit(op, space):
    """Largest admissible step ``h^2 / (2 N max|a| + h max|b| + h^2 |mu|)``."""
    a_max, b_max, _ = _coefficient_bounds(op, space)
    h = float(space.h.min())
    mu = abs(op.driver.monotonicity_mu or 0.0)
    denom = 2 * op.dim_x * a_max + h * b_max + h * h * mu
    return math.inf if denom == 0 else h * h / denom


@dataclass(frozen=True, eq=False)
class FdScheme:
    space: SpaceGrid
    dt: float
    steps: int
    store_every: int = 1
    boundary: str = "extrapolate"
    cross_fallback: bool = False

    @classmethod
    def build(cls, op, space, dt=None, out_steps=None, boundary="extrapolate", cross_fallback=False, t0=0.0):
        """Scheme on ``[t0, T]``; ``dt`` defaults to the largest CFL-admissible step.

        With ``out_steps`` the step count is rounded up to a multiple of it and
        only ``out_steps + 1`` slices are stored.
        """
        if boundary not in BOUNDARIES:
            raise InputError(f"boundary must be one of {BOUNDARIES}")
        if min(space.shape) < 4:
            raise InputError("finite differences need at least 4 nodes per axis")
        _, _, diagonal = _coefficient_bounds(op, space)
        if not diagonal and not cross_fallback:
            raise InputError("sigma sigma^T is not diagonal; set cross_fallback to use central cross differences")
        span = op.horizon - t0
        limit = cfl_limit(op, space)
        if dt is None:
            if math.isinf(limit):
                raise InputError("no diffusion or drift: pass dt explicitly")
            steps = math.ceil(span / limit * (1 + 1e-12))
        else:
            if dt > limit * (1 + 1e-12):
                raise CFLError(dt, limit)
            steps = round(span / dt)
            if abs(steps * dt - span) > 1e-9 * span:
                raise InputError(f"dt={dt} does not divide the horizon {span}")
        every = 1
        if out_steps is not None:
            every = math.ceil(steps / out_steps)
            steps = every * out_steps
        return cls(space, span / steps, steps, every, boundary, cross_fallback)


def _shifted(u, axis, offset):
    """Interior slice of ``u`` shifted by ``offset`` along ``axis``."""
    idx = []
    for a, n in enumerate(u.shape):
        if a == axis:
            idx.append(slice(1 + offset, n - 1 + offset))
        else:
            idx.append(slice(1, n - 1))
    return u[tuple(idx)]


def discrete_derivatives(u, space, cross=False):
    """Central gradient, forward/backward gradients and Hessian on interior nodes.

    ``u`` has the lattice shape; outputs are flattened over interior nodes.
    """
    n = space.dim
    centre = _shifted(u, 0, 0)
    m = centre.size
    grad = np.empty((m, n))
    fwd = np.empty((m, n))
    bwd = np.empty((m, n))
    hess = np.zeros((m, n, n))
    for a in range(n):
        h = space.h[a]
        up, dn = _shifted(u, a, 1).ravel(), _shifted(u, a, -1).ravel()
        c = centre.ravel()
        grad[:, a] = (up - dn) / (2 * h)
        fwd[:, a] = (up - c) / h
        bwd[:, a] = (c - dn) / h
        hess[:, a, a] = (up - 2 * c + dn) / (h * h)
    if cross:
        for a in range(n):
            for b in range(a + 1, n):
                pp = _corner(u, a, b, 1, 1)
                pm = _corner(u, a, b, 1, -1)
                mp = _corner(u, a, b, -1, 1)
                mm = _corner(u, a, b, -1, -1)
                v = (pp - pm - mp + mm) / (4 * space.h[a] * space.h[b])
                hess[:, a, b] = hess[:, b, a] = v
    return grad, fwd, bwd, hess


def _corner(u, a, b, sa, sb):
    idx = []
    for ax, n in enumerate(u.shape):
        off = sa if ax == a else sb if ax == b else 0
        idx.append(slice(1 + off, n - 1 + off))
    return u[tuple(idx)].ravel()


def _interior_mask(space):
    mask = np.zeros(space.shape, dtype=bool)
    mask[tuple(slice(1, n - 1) for n in space.shape)] = True
    return mask.ravel()


def apply_F(op, space, t, u, cross=False):
    """``F`` on interior nodes with the scheme's stencils; returns values and maximisers."""
    grid_u = u.reshape(space.shape)
    grad, fwd, bwd, hess = discrete_derivatives(grid_u, space, cross)
    x = space.nodes()[_interior_mask(space)]
    y = _shifted(grid_u, 0, 0).ravel()
    bs, _ = op.coefficients(t, x)
    upwind = np.where(bs > 0, fwd[None], bwd[None])
    vals = generator_values(op, t, x, y, grad, hess, p_drift=upwind)
    best = np.argmax(vals, axis=-1)
    return vals[np.arange(len(best)), best], best


def _fill_boundary(u, space, mode, frozen):
    g = u.reshape(space.shape)
    if mode == "frozen":
        mask = ~_interior_mask(space)
        u[mask] = frozen[mask]
        return u
    for a in range(space.dim):
        s = [slice(None)] * space.dim

        def at(i):
            s2 = list(s)
            s2[a] = i
            return tuple(s2)

        g[at(0)] = 3 * g[at(1)] - 3 * g[at(2)] + g[at(3)]
        g[at(-1)] = 3 * g[at(-2)] - 3 * g[at(-3)] + g[at(-4)]
    return u


def fd_step(op, scheme, u_next, t_next):
    """One backward step from the slice at ``t_next``."""
    F, _ = apply_F(op, scheme.space, t_next, u_next, scheme.cross_fallback)
    u = u_next.copy()
    u[_interior_mask(scheme.space)] += scheme.dt * F
    return u


def solve_fd(op, scheme, t0=0.0, terminal=None):
    """March backward from ``g`` at ``T``; returns the stored slices as a :class:`ValueField`."""
    space = scheme.space
    if space.dim != op.dim_x:
        raise InputError(f"space grid has N={space.dim}, operator has N={op.dim_x}")
    nodes = space.nodes()
    u = op.terminal(nodes) if terminal is None else np.asarray(terminal(nodes), dtype=float)
    g = u.copy()
    K = scheme.steps
    out_steps = K // scheme.store_every
    out = np.empty((out_steps + 1, u.size))
    out[-1] = u
    grid = TimeGrid(t0, t0 + scheme.dt * K, K)
    for k in range(K - 1, -1, -1):
        u = fd_step(op, scheme, u, grid.time(k + 1))
        _fill_boundary(u, space, scheme.boundary, g)
        if not np.all(np.isfinite(u)):
            from .errors import NumericError

            raise NumericError(f"finite-difference solution blew up at step {k}")
        if k % scheme.store_every == 0:
            out[k // scheme.store_every] = u
    return ValueField(TimeGrid(t0, op.horizon, out_steps), space, out)


@dataclass
class ResidualReport:
    field: np.ndarray
    max_abs: float
    location: tuple

    def summary(self):
        k, x = self.location
        return f"max|r| = {self.max_abs:.3e} at step {k}, x = {np.round(x, 6).tolist()}"


def viscosity_residuals(u, op, cross=False):
    """``(u_{k+1} - u_k)/dt + F(t_k, x, u_k, D u_k, D^2 u_k)`` on interior nodes.

    Boundary entries of ``field`` are NaN. For a converged solution the
    maximum shrinks under refinement; for data that is not a solution it
    stays of order one.
    """
    space = u.space
    grid = u.grid
    mask = _interior_mask(space)
    K = grid.steps
    field = np.full((K, space.size), np.nan)
    for k in range(K):
        F, _ = apply_F(op, space, grid.time(k), u.values[k], cross)
        dtu = (u.values[k + 1] - u.values[k]) / grid.dt
        field[k, mask] = dtu[mask] + F
    flat = int(np.nanargmax(np.abs(field)))
    k, j = divmod(flat, space.size)
    return ResidualReport(field, float(np.abs(field).flat[flat]), (k, space.nodes()[j]))


def check_comparison_order(u, v, tol=0.0):
    """``u <= v + tol`` at every stored node and time; ``margin = max(u - v)``."""
    if isinstance(u, ValueField) and isinstance(v, ValueField):
        if u.grid != v.grid or not u.space.same_as(v.space):
            raise InputError("value fields live on different grids")
    a = u.values if isinstance(u, ValueField) else np.asarray(u, dtype=float)
    b = v.values if isinstance(v, ValueField) else np.asarray(v, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"value fields have shapes {a.shape} and {b.shape}")
    diff = a - b
    flat = int(np.argmax(diff))
    margin = float(diff.flat[flat])
    ok = margin <= tol
    witness = None
    if not ok:
        k, j = np.unravel_index(flat, diff.shape)
        witness = (int(k), u.space.nodes()[j].tolist() if isinstance(u, ValueField) else int(j))
    return OrderCheck(ok, margin, witness)


def polynomial_perturbation(vf, eps=0.01, power=2):
    """``vf + eps (1 + |x|)^power`` at every slice."""
    phi = (1 + np.linalg.norm(vf.space.nodes(), axis=-1)) ** power
    return ValueField(vf.grid, vf.space, vf.values + eps * phi)


# -- structural checks on F ---------------------------------------------------


def _random_sym(rng, n, count, scale):
    a = rng.uniform(-scale, scale, size=(count, n, n))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_monotonicity_in_r(op, sample_count=500, seed=0, box=3.0):
    """Worst ``(F(r) - F(r'))(r - r') / |r - r'|^2`` against the declared ``mu``."""
    rng = np.random.default_rng(seed)
    n = op.dim_x
    t = rng.uniform(0, op.horizon, sample_count)
    x = rng.uniform(-box, box, (sample_count, n))
    p = rng.uniform(-box, box, (sample_count, n))
    S = _random_sym(rng, n, sample_count, box)
    r1 = rng.uniform(-box, box, sample_count)
    r2 = rng.uniform(-box, box, sample_count)
    worst, wit = -math.inf, None
    for i in range(sample_count):
        if r1[i] == r2[i]:
            continue
        g1 = generator_values(op, t[i], x[i], r1[i], p[i], S[i]).max()
        g2 = generator_values(op, t[i], x[i], r2[i], p[i], S[i]).max()
        q = (g1 - g2) * (r1[i] - r2[i]) / (r1[i] - r2[i]) ** 2
        if q > worst:
            worst, wit = q, {"t": float(t[i]), "x": x[i].tolist(), "r": float(r1[i]), "r_prime": float(r2[i])}
    mu = op.driver.monotonicity_mu
    ok = worst <= mu + 1e-9 * (1 + abs(mu))
    return BoundCheck("F.monotonicity_in_r", mu, float(worst), ok, None if ok else wit)


def doubling_pairs(rng, n, alpha, count, max_tries=200):
    """Random ``(S, S')`` with ``-3a I <= diag(S, -S') <= 3a [[I, -I], [-I, I]]``."""
    eye = np.eye(n)
    upper = 3 * alpha * np.block([[eye, -eye], [-eye, eye]])
    found_s, found_sp = [], []
    for _ in range(max_tries):
        S = _random_sym(rng, n, 4 * count, 3 * alpha)
        Sp = _random_sym(rng, n, 4 * count, 3 * alpha)
        big = np.zeros((4 * count, 2 * n, 2 * n))
        big[:, :n, :n] = S
        big[:, n:, n:] = -Sp
        lo_ok = np.linalg.eigvalsh(big + 3 * alpha * np.eye(2 * n)).min(axis=-1) >= 0
        hi_ok = np.linalg.eigvalsh(upper - big).min(axis=-1) >= 0
        keep = lo_ok & hi_ok
        found_s.extend(S[keep])
        found_sp.extend(Sp[keep])
        if len(found_s) >= count:
            return np.array(found_s[:count]), np.array(found_sp[:count])
    raise InputError("could not sample enough matrix pairs satisfying the doubling inequality")


def check_doubling_condition(op, sample_count=300, seed=0, alpha=1.0, box=3.0):
    """For each control: ``<a(x), S> - <a(y), S'> <= 3 alpha l^2 |x - y|^2`` on sampled pairs."""
    rng = np.random.default_rng(seed)
    n = op.dim_x
    S, Sp = doubling_pairs(rng, n, alpha, sample_count)
    t = rng.uniform(0, op.horizon, sample_count)
    x = rng.uniform(-box, box, (sample_count, n))
    y = rng.uniform(-box, box, (sample_count, n))
    worst, wit = -math.inf, None
    for j, c in enumerate(op.controls):
        sx = np.stack([c.sigma(ti, xi[None])[0] for ti, xi in zip(t, x)])
        sy = np.stack([c.sigma(ti, yi[None])[0] for ti, yi in zip(t, y)])
        ax = np.einsum("pik,pjk->pij", sx, sx)
        ay = np.einsum("pik,pjk->pij", sy, sy)
        lhs = np.sum(ax * S, axis=(-2, -1)) - np.sum(ay * Sp, axis=(-2, -1))
        bound = 3 * alpha * c.lipschitz_bound**2 * np.sum((x - y) ** 2, axis=-1)
        gap = lhs - bound
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst, wit = float(gap[i]), {"control": j, "x": x[i].tolist(), "y": y[i].tolist()}
    ok = worst <= 1e-9
    return BoundCheck("F.doubling_condition", 0.0, worst, ok, None if ok else wit)
